"""Instrumented Nutrition Advisor: synthetic population, two BMI variants, trace emission.

Each request runs ``Servlet.handle -> NutritionAdvisor.advice -> BmiService.bmi``
and ``advice -> AdviceCatalog.suggest``. The handler reads the person's
properties, the advisor writes the computed BMI and category back to the person.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from .trace import TraceEvent, write_trace

HEIGHT_RANGE = (100.0, 230.0)
WEIGHT_RANGE = (30.0, 250.0)
AGE_RANGE = (18, 80)
CORRELATION = 0.4

# (height mean, height sd, weight mean, weight sd)
POPULATION = {
    "Female": (161.0, 7.0, 64.0, 14.0),
    "Male": (175.0, 7.5, 86.0, 20.0),
}

FEMALE_NAMES = ("Alice", "Clara", "Elena", "Grace", "Iris", "Laura", "Nina", "Sofia")
MALE_NAMES = ("Adam", "Carl", "Emil", "Henry", "Jonas", "Lukas", "Oscar", "Simon")

CATEGORIES = ("Underweight", "Healthy", "Overweight", "Obese")
AGE_BANDS = (30, 45, 60)  # upper bounds of the first three bands
SUGGESTIONS = {
    "Underweight": ("protein shake", "nut mix", "cheese plate", "warm porridge"),
    "Healthy": ("fruit salad", "grain bowl", "vegetable soup", "fish dinner"),
    "Overweight": ("green smoothie", "lentil stew", "salad plate", "steamed vegetables"),
    "Obese": ("water bottle", "broth soup", "leaf salad", "light yogurt"),
}


class AdvisorVariant(str, Enum):
    METRIC = "Metric"
    IMPERIAL_BUG = "ImperialBug"


@dataclass(frozen=True)
class PersonSample:
    gender: str
    height: float
    weight: float
    name: str = ""
    age: int = 0


def generate_population(n, seed=0):
    """Persons with per-gender Gaussian height/weight sharing a latent factor."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    out = []
    a = np.sqrt(CORRELATION)
    b = np.sqrt(1.0 - CORRELATION)
    for _ in range(n):
        gender = "Female" if rng.random() < 0.5 else "Male"
        hm, hs, wm, ws = POPULATION[gender]
        while True:
            shared, eh, ew = rng.standard_normal(3)
            h = hm + hs * (a * shared + b * eh)
            w = wm + ws * (a * shared + b * ew)
            if HEIGHT_RANGE[0] <= h <= HEIGHT_RANGE[1] and WEIGHT_RANGE[0] <= w <= WEIGHT_RANGE[1]:
                break
        age = int(rng.integers(AGE_RANGE[0], AGE_RANGE[1] + 1))
        # popular names follow the birth cohort: two candidates per gender and age band
        names = FEMALE_NAMES if gender == "Female" else MALE_NAMES
        band = age_band(age)
        name = names[2 * band + int(rng.integers(2))]
        out.append(PersonSample(gender, round(float(h), 2), round(float(w), 2), name, age))
    return out


def compute_bmi(height, weight, variant=AdvisorVariant.METRIC):
    variant = AdvisorVariant(variant)
    if variant is AdvisorVariant.METRIC:
        return weight / (height / 100.0) ** 2
    # the bug: imperial constant applied to metric inputs
    return 703.0 * weight / height**2


def advice_text(bmi):
    """BMI category; each boundary belongs to the upper category."""
    if not np.isfinite(bmi) or bmi <= 0:
        raise ValueError(f"bmi must be finite and positive, got {bmi}")
    if bmi < 18.5:
        return "Underweight"
    if bmi < 25.0:
        return "Healthy"
    if bmi < 30.0:
        return "Overweight"
    return "Obese"


def age_band(age):
    return sum(age >= bound for bound in AGE_BANDS)


def suggestion(category, age):
    return SUGGESTIONS[category][age_band(age)]


def advice_message(category, suggested):
    return f"You are {category.lower()}, try a {suggested}"


# -- program structure -------------------------------------------------------


def nutrition_structure():
    """Structure document plus a name -> symbol map."""
    elements, sym = [], {}

    def add(name, kind, dtype, owner=None):
        s = len(elements)
        obj = {"symbol": s, "name": name, "kind": kind, "dataType": dtype}
        if owner is not None:
            obj["owner"] = sym[owner]
        elements.append(obj)
        sym[name] = s
        return s

    for t in ("Servlet", "NutritionAdvisor", "BmiService", "Person", "AdviceCatalog"):
        add(t, "Type", "Reference")

    props = [
        ("Person.name", "Text"), ("Person.gender", "Text"), ("Person.age", "Number"),
        ("Person.height", "Number"), ("Person.weight", "Number"), ("Person.bmi", "Number"),
        ("Person.category", "Text"), ("Servlet.requestCount", "Number"), ("Servlet.advisor", "Reference"),
        ("Servlet.logger", "Unknown"), ("NutritionAdvisor.bmiService", "Reference"),
        ("NutritionAdvisor.catalog", "Reference"), ("BmiService.precision", "Number"),
        ("AdviceCatalog.language", "Text"), ("AdviceCatalog.version", "Number"),
    ]
    for name, dtype in props:
        add(name, "Property", dtype, name.split(".")[0])

    params = {}

    def exe(name, dtype, plist=()):
        s = add(name, "Executable", dtype, name.split(".")[0])
        params[s] = [add(f"{name}.{p}", "Parameter", pt, name) for p, pt in plist]
        return s

    exe("Servlet.handle", "Text", [("request", "Reference")])
    exe("NutritionAdvisor.advice", "Text",
        [("name", "Text"), ("age", "Number"), ("height", "Number"), ("weight", "Number")])
    exe("BmiService.bmi", "Number", [("height", "Number"), ("weight", "Number")])
    exe("AdviceCatalog.suggest", "Text",
        [("category", "Text"), ("age", "Number"), ("name", "Text"), ("bmi", "Number")])
    person_fields = ["name", "gender", "age", "height", "weight", "bmi", "category"]
    ptype = {n: t for n, t in props if n.startswith("Person.")}
    for f in person_fields[:6]:
        exe(f"Person.get{f.capitalize()}", ptype[f"Person.{f}"])
    exe("Servlet.getLogger", "Unknown")
    for name in ("Servlet.service", "Servlet.init", "Servlet.destroy", "Servlet.flush"):
        exe(name, "Void")
    for f in person_fields:
        exe(f"Person.set{f.capitalize()}", "Void", [(f, ptype[f"Person.{f}"])])
    exe("AdviceCatalog.setLanguage", "Void", [("language", "Text")])
    exe("BmiService.setPrecision", "Void", [("precision", "Number")])
    for name in ("NutritionAdvisor.init", "NutritionAdvisor.reset", "BmiService.init",
                 "AdviceCatalog.load", "AdviceCatalog.clear", "Person.validate"):
        exe(name, "Void")

    calls = [
        ("Servlet.service", "Servlet.handle"),
        ("Servlet.handle", "NutritionAdvisor.advice"),
        ("NutritionAdvisor.advice", "BmiService.bmi"),
        ("NutritionAdvisor.advice", "AdviceCatalog.suggest"),
        ("Servlet.init", "NutritionAdvisor.init"),
        ("NutritionAdvisor.init", "BmiService.init"),
        ("NutritionAdvisor.init", "AdviceCatalog.load"),
    ]
    access = [("Servlet.handle", f"Person.{f}", "R") for f in ("name", "gender", "age", "height", "weight")]
    access += [("NutritionAdvisor.advice", "Person.bmi", "W"), ("NutritionAdvisor.advice", "Person.category", "W")]
    access += [(f"Person.get{f.capitalize()}", f"Person.{f}", "R") for f in person_fields[:6]]
    access += [(f"Person.set{f.capitalize()}", f"Person.{f}", "W") for f in person_fields]
    access += [("Servlet.flush", "Servlet.requestCount", "W")]
    access += [("AdviceCatalog.setLanguage", "AdviceCatalog.language", "W"),
               ("BmiService.setPrecision", "BmiService.precision", "W")]

    def link(a, ca, b, cb):
        return {"fromNode": sym[a], "fromColumn": ca, "toNode": sym[b], "toColumn": cb}

    links = [link("Servlet.handle", c, "NutritionAdvisor.advice", c) for c in ("name", "age", "height", "weight")]
    links += [link("NutritionAdvisor.advice", c, "BmiService.bmi", c) for c in ("height", "weight")]
    links += [link("NutritionAdvisor.advice", c, "AdviceCatalog.suggest", c) for c in ("category", "age", "name", "bmi")]

    doc = {
        "elements": elements,
        "callEdges": [[sym[a], sym[b]] for a, b in calls],
        "accessEdges": [[sym[e], sym[p], m] for e, p, m in access],
        "paramLists": {str(k): v for k, v in params.items() if v},
        "dataflowLinks": links,
    }
    return doc, sym


# -- execution ---------------------------------------------------------------


class _Recorder:
    def __init__(self):
        self.events = []
        self.rows = []  # (node, inv, caller, column, value)
        self._seq = 0
        self._inv = 0

    def emit(self, kind, elem, caller, inv, values):
        self.events.append(TraceEvent(self._seq, kind, elem, caller, inv, values))
        self._seq += 1

    def new_inv(self):
        self._inv += 1
        return self._inv


def _execute(population, variant, sym):
    rec = _Recorder()
    handle, advice = sym["Servlet.handle"], sym["NutritionAdvisor.advice"]
    bmi_node, suggest = sym["BmiService.bmi"], sym["AdviceCatalog.suggest"]
    service = sym["Servlet.service"]
    for i, person in enumerate(population):
        inv_h = rec.new_inv()
        rec.emit("enter", handle, service, inv_h, {"request": f"Request@{i}"})
        fields = {"name": person.name, "gender": person.gender, "age": person.age,
                  "height": person.height, "weight": person.weight}
        for f, v in fields.items():
            rec.emit("read", sym[f"Person.{f}"], handle, inv_h, {f: v})
            rec.rows.append((handle, inv_h, service, f, v))

        inv_a = rec.new_inv()
        a_args = {"name": person.name, "age": person.age, "height": person.height, "weight": person.weight}
        rec.emit("enter", advice, handle, inv_a, a_args)

        inv_b = rec.new_inv()
        b_args = {"height": person.height, "weight": person.weight}
        rec.emit("enter", bmi_node, advice, inv_b, b_args)
        value = compute_bmi(person.height, person.weight, variant)
        rec.emit("exit", bmi_node, advice, inv_b, {"ret": value})
        rec.rows.extend((bmi_node, inv_b, advice, k, v) for k, v in {**b_args, "ret": value}.items())

        category = advice_text(value)
        rec.emit("write", sym["Person.bmi"], advice, inv_a, {"bmi": value})
        rec.emit("write", sym["Person.category"], advice, inv_a, {"category": category})

        inv_s = rec.new_inv()
        s_args = {"category": category, "age": person.age, "name": person.name, "bmi": value}
        rec.emit("enter", suggest, advice, inv_s, s_args)
        suggested = suggestion(category, person.age)
        rec.emit("exit", suggest, advice, inv_s, {"ret": suggested})
        rec.rows.extend((suggest, inv_s, advice, k, v) for k, v in {**s_args, "ret": suggested}.items())

        message = advice_message(category, suggested)
        rec.emit("exit", advice, handle, inv_a, {"ret": message})
        rec.rows.extend((advice, inv_a, handle, k, v)
                        for k, v in {**a_args, "bmi": value, "category": category, "ret": message}.items())
        rec.emit("exit", handle, service, inv_h, {"ret": message})
        rec.rows.append((handle, inv_h, service, "ret", message))
    return rec


EVENTS_PER_REQUEST = 15
DATA_VALUES_PER_REQUEST = 21


def run_advisor(population, variant, out_dir):
    """Execute every request and write structure.json, trace.jsonl, ground_truth.csv.

    Returns ``(structure_path, trace_path)``.
    """
    if not population:
        raise ValueError("population is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc, sym = nutrition_structure()
    rec = _execute(population, variant, sym)
    structure_path = out / "structure.json"
    structure_path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    trace_path = out / "trace.jsonl"
    write_trace(rec.events, trace_path)
    with (out / "ground_truth.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["node", "inv", "caller", "column", "value"])
        for node, inv, caller, col, v in rec.rows:
            w.writerow([node, inv, caller, col, repr(v) if isinstance(v, float) else v])
    return structure_path, trace_path


def read_ground_truth(path):
    """Ground-truth rows keyed by (node, inv): (caller, {column: value})."""
    out = {}
    with Path(path).open(encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (int(rec["node"]), int(rec["inv"]))
            caller, row = out.setdefault(key, (int(rec["caller"]), {}))
            row[rec["column"]] = rec["value"]
    return out
