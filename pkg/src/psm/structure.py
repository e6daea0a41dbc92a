"""Static program structure: code elements, edges, modeling universe, model specs.

The structure file is UTF-8 JSON::

    {
      "elements":      [{"symbol": 3, "name": "Person.weight", "kind": "Property",
                         "dataType": "Number", "owner": 0}, ...],
      "callEdges":     [[caller, callee], ...],
      "accessEdges":   [[executable, property, "R" | "W"], ...],
      "paramLists":    {"<executable>": [param, ...], ...},
      "dataflowLinks": [{"fromNode": 7, "fromColumn": "height",
                         "toNode": 9, "toColumn": "height"}, ...]
    }
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping

from .errors import StructureError, StructureWarning


class Kind(str, Enum):
    TYPE = "Type"
    PROPERTY = "Property"
    EXECUTABLE = "Executable"
    PARAMETER = "Parameter"


class DataType(str, Enum):
    NUMBER = "Number"
    TEXT = "Text"
    REFERENCE = "Reference"
    UNKNOWN = "Unknown"
    VOID = "Void"

    @property
    def is_data(self):
        return self in (DataType.NUMBER, DataType.TEXT)


class Role(str, Enum):
    PA = "Pa"
    RET = "Ret"
    R = "R"
    W = "W"
    INV = "Inv"


@dataclass(frozen=True)
class CodeElement:
    symbol: int
    name: str
    kind: Kind
    data_type: DataType
    owner: int | None = None

    @property
    def simple_name(self):
        return self.name.rsplit(".", 1)[-1]


@dataclass(frozen=True)
class DataflowLink:
    from_node: int
    from_column: str
    to_node: int
    to_column: str


@dataclass(frozen=True)
class ProgramGraph:
    elements: Mapping[int, CodeElement]
    call_edges: tuple[tuple[int, int], ...] = ()
    access_edges: tuple[tuple[int, int, str], ...] = ()
    param_lists: Mapping[int, tuple[int, ...]] = field(default_factory=dict)
    dataflow_links: tuple[DataflowLink, ...] = ()

    def __getitem__(self, symbol):
        return self.elements[symbol]

    def executables(self):
        return [e for e in self.elements.values() if e.kind is Kind.EXECUTABLE]

    def params_of(self, executable):
        return [self.elements[s] for s in self.param_lists.get(executable, ())]

    def accesses_of(self, executable, mode=None):
        return [
            self.elements[p]
            for exe, p, m in self.access_edges
            if exe == executable and (mode is None or m == mode)
        ]

    def callees_of(self, executable):
        return sorted({callee for caller, callee in self.call_edges if caller == executable})

    def counts(self):
        """Element counts per kind, keyed by kind name."""
        out = {k.value: 0 for k in Kind}
        for e in self.elements.values():
            out[e.kind.value] += 1
        return out

    def to_json(self):
        return {
            "elements": [
                {
                    "symbol": e.symbol,
                    "name": e.name,
                    "kind": e.kind.value,
                    "dataType": e.data_type.value,
                    **({"owner": e.owner} if e.owner is not None else {}),
                }
                for e in sorted(self.elements.values(), key=lambda e: e.symbol)
            ],
            "callEdges": [list(c) for c in self.call_edges],
            "accessEdges": [list(a) for a in self.access_edges],
            "paramLists": {str(k): list(v) for k, v in sorted(self.param_lists.items())},
            "dataflowLinks": [
                {
                    "fromNode": d.from_node,
                    "fromColumn": d.from_column,
                    "toNode": d.to_node,
                    "toColumn": d.to_column,
                }
                for d in self.dataflow_links
            ],
        }

    def digest(self):
        """SHA-256 over the canonical JSON form; insensitive to key order and whitespace."""
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_TOP_KEYS = {"elements", "callEdges", "accessEdges", "paramLists", "dataflowLinks"}
_ELEMENT_KEYS = {"symbol", "name", "kind", "dataType", "owner"}


def load_structure(path):
    """Read and validate a structure file. Symbols are kept exactly as written."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise StructureError(f"{path}: not valid JSON ({exc})") from exc
    except OSError as exc:
        raise StructureError(f"{path}: cannot read ({exc})") from exc
    return parse_structure(raw, source=str(path))


def parse_structure(raw, source="<structure>"):
    if not isinstance(raw, dict):
        raise StructureError(f"{source}: top level must be an object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        warnings.warn(f"{source}: ignoring unknown keys {unknown}", StructureWarning, stacklevel=2)

    elements = {}
    for i, obj in enumerate(raw.get("elements", [])):
        elem = _parse_element(obj, i, source)
        if elem.symbol in elements:
            raise StructureError(f"{source}: duplicate symbol {elem.symbol} ({elem.name})")
        elements[elem.symbol] = elem

    def need(symbol, what):
        if not isinstance(symbol, int) or symbol not in elements:
            raise StructureError(f"{source}: {what} references unknown symbol {symbol}")
        return elements[symbol]

    for e in elements.values():
        if e.kind in (Kind.PROPERTY, Kind.PARAMETER) and e.owner is None:
            raise StructureError(f"{source}: {e.kind.value} {e.name} (symbol {e.symbol}) has no owner")
        if e.owner is not None:
            need(e.owner, f"owner of {e.name}")
        if e.data_type is DataType.VOID and e.kind is not Kind.EXECUTABLE:
            raise StructureError(f"{source}: Void data type on non-executable {e.name} (symbol {e.symbol})")

    calls = []
    for pair in raw.get("callEdges", []):
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise StructureError(f"{source}: call edge {pair!r} is not a pair")
        for s in pair:
            if need(s, "call edge").kind is not Kind.EXECUTABLE:
                raise StructureError(f"{source}: call edge endpoint {s} is not an executable")
        calls.append((pair[0], pair[1]))

    accesses = []
    for triple in raw.get("accessEdges", []):
        if not isinstance(triple, (list, tuple)) or len(triple) != 3 or triple[2] not in ("R", "W"):
            raise StructureError(f"{source}: access edge {triple!r} must be [executable, property, 'R'|'W']")
        exe, prop, mode = triple
        if need(exe, "access edge").kind is not Kind.EXECUTABLE:
            raise StructureError(f"{source}: access edge source {exe} is not an executable")
        if need(prop, "access edge").kind is not Kind.PROPERTY:
            raise StructureError(f"{source}: access edge target {prop} is not a property")
        accesses.append((exe, prop, mode))

    params = {}
    for key, plist in raw.get("paramLists", {}).items():
        try:
            exe = int(key)
        except ValueError:
            raise StructureError(f"{source}: paramLists key {key!r} is not a symbol") from None
        if need(exe, "paramLists").kind is not Kind.EXECUTABLE:
            raise StructureError(f"{source}: paramLists key {exe} is not an executable")
        if len(set(plist)) != len(plist):
            raise StructureError(f"{source}: paramLists for {exe} contains duplicates")
        for p in plist:
            if need(p, f"paramLists[{exe}]").kind is not Kind.PARAMETER:
                raise StructureError(f"{source}: paramLists[{exe}] member {p} is not a parameter")
        params[exe] = tuple(plist)

    links = []
    for obj in raw.get("dataflowLinks", []):
        try:
            link = DataflowLink(int(obj["fromNode"]), str(obj["fromColumn"]), int(obj["toNode"]), str(obj["toColumn"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise StructureError(f"{source}: malformed dataflow link {obj!r}") from exc
        for s in (link.from_node, link.to_node):
            if need(s, f"dataflow link {obj!r}").kind is not Kind.EXECUTABLE:
                raise StructureError(f"{source}: dataflow link endpoint {s} is not an executable")
        links.append(link)

    return ProgramGraph(elements, tuple(calls), tuple(accesses), params, tuple(links))


def _parse_element(obj, index, source):
    if not isinstance(obj, dict):
        raise StructureError(f"{source}: element #{index} is not an object")
    extra = sorted(set(obj) - _ELEMENT_KEYS)
    if extra:
        warnings.warn(f"{source}: element #{index} ignoring unknown keys {extra}", StructureWarning, stacklevel=3)
    try:
        symbol = obj["symbol"]
        if not isinstance(symbol, int) or isinstance(symbol, bool) or symbol < 0:
            raise StructureError(f"{source}: element #{index} symbol {symbol!r} is not a non-negative integer")
        owner = obj.get("owner")
        if owner is not None and (not isinstance(owner, int) or isinstance(owner, bool)):
            raise StructureError(f"{source}: element {symbol} owner {owner!r} is not a symbol")
        return CodeElement(symbol, str(obj["name"]), Kind(obj["kind"]), DataType(obj["dataType"]), owner)
    except KeyError as exc:
        raise StructureError(f"{source}: element #{index} missing field {exc}") from None
    except ValueError as exc:
        raise StructureError(f"{source}: element #{index}: {exc}") from None


# -- modeling universe -------------------------------------------------------


@dataclass(frozen=True)
class ModelingUniverse:
    included: frozenset
    selector: object = None

    def __contains__(self, symbol):
        return symbol in self.included

    def __len__(self):
        return len(self.included)


def _compile_selector(selector) -> Callable[[CodeElement], bool]:
    if selector is None:
        return lambda e: True
    if callable(selector):
        return selector
    if isinstance(selector, str):
        pairs = {}
        for part in filter(None, (p.strip() for p in selector.split(","))):
            key, sep, value = part.partition("=")
            if not sep:
                raise ValueError(f"selector clause {part!r} is not key=value")
            pairs[key.strip()] = value.strip()
        selector = pairs
    if isinstance(selector, Mapping):
        getters = {
            "kind": lambda e: e.kind.value,
            "dataType": lambda e: e.data_type.value,
            "name": lambda e: e.name,
            "owner": lambda e: None if e.owner is None else str(e.owner),
        }
        for key in selector:
            if key not in getters:
                raise ValueError(f"unknown selector key {key!r}")

        def match(e):
            for key, value in selector.items():
                got = getters[key](e)
                if key == "name" and isinstance(value, str) and value.endswith("*"):
                    if not got.startswith(value[:-1]):
                        return False
                elif got != str(value):
                    return False
            return True

        return match
    raise TypeError(f"unsupported selector {selector!r}")


def select_universe(graph, selector=None):
    """Pick the modeled code elements. The default selector includes everything."""
    pred = _compile_selector(selector)
    return ModelingUniverse(frozenset(s for s, e in graph.elements.items() if pred(e)), selector)


# -- model specs -------------------------------------------------------------


@dataclass(frozen=True)
class FeatureColumnSpec:
    id: str
    role: Role
    source_symbol: int
    data_type: DataType


@dataclass(frozen=True)
class ModelSpec:
    node: int
    columns: tuple[FeatureColumnSpec, ...]
    condition_domain: tuple[int, ...]
    name: str = ""

    condition_column = "caller"

    @property
    def empty(self):
        return not self.columns

    def column(self, cid):
        for c in self.columns:
            if c.id == cid:
                return c
        raise KeyError(cid)

    @property
    def column_ids(self):
        return [c.id for c in self.columns]


def executable_columns(graph, executable, include_invocations=False, universe=None):
    """Candidate feature columns of one executable, in Pa, Inv, R, W, Ret order.

    Column ids: parameters use their simple name, the return value is ``ret``,
    property accesses use the property's simple name. A clash with an already
    used id gets an ``@R``/``@W`` suffix, then ``#<symbol>``.
    """
    exe = graph[executable]

    def keep(e):
        return e.data_type.is_data and (universe is None or e.symbol in universe)

    cols, used = [], set()

    def add(cid, role, sym, dtype, suffix):
        if cid in used:
            cid = f"{cid}@{suffix}"
        if cid in used:
            cid = f"{cid}#{sym}"
        used.add(cid)
        cols.append(FeatureColumnSpec(cid, role, sym, dtype))

    for p in graph.params_of(executable):
        if keep(p):
            add(p.simple_name, Role.PA, p.symbol, p.data_type, "Pa")
    if include_invocations and graph.callees_of(executable):
        add("inv", Role.INV, executable, DataType.TEXT, "Inv")
    for mode, role in (("R", Role.R), ("W", Role.W)):
        seen = set()
        for prop in sorted(graph.accesses_of(executable, mode), key=lambda e: e.symbol):
            if prop.symbol in seen or not keep(prop):
                continue
            seen.add(prop.symbol)
            add(prop.simple_name, role, prop.symbol, prop.data_type, mode)
    if exe.data_type.is_data:
        add("ret", Role.RET, executable, exe.data_type, "Ret")
    return cols


def derive_model_specs(universe, graph, include_invocations=False):
    """One spec per executable in the universe; property and type factors fold into them.

    The condition domain is every executable symbol of the project, whether or
    not it was selected into the universe.
    """
    domain = tuple(sorted(e.symbol for e in graph.executables()))
    specs = []
    for sym in sorted(universe.included):
        e = graph[sym]
        if e.kind is not Kind.EXECUTABLE:
            continue
        cols = executable_columns(graph, sym, include_invocations, universe)
        specs.append(ModelSpec(sym, tuple(cols), domain, e.name))
    return specs


def kind_type_counts(graph, universe=None):
    """Element counts per kind and data-type bucket (Data, Ref, Unk, Void, Total)."""
    out = {}
    for kind in (Kind.TYPE, Kind.PROPERTY, Kind.PARAMETER, Kind.EXECUTABLE):
        row = {"Data": 0, "Ref": 0, "Unk": 0, "Void": 0, "Total": 0}
        for e in graph.elements.values():
            if e.kind is not kind or (universe is not None and e.symbol not in universe):
                continue
            bucket = {
                DataType.NUMBER: "Data",
                DataType.TEXT: "Data",
                DataType.REFERENCE: "Ref",
                DataType.UNKNOWN: "Unk",
                DataType.VOID: "Void",
            }[e.data_type]
            row[bucket] += 1
            row["Total"] += 1
        out[kind.value] = row
    return out

