"""Condition the Nutrition Advisor on gender and follow the effect to the BMI service.

Gender is only read inside ``Servlet.handle``. Its influence on the BMI
reaches ``BmiService.bmi`` only through the height and weight values that
flow down the call chain, so the network has to carry it across two hops.

Run with ``python walkthroughs/conditioning.py [workdir]``; the fit takes
about half a minute on one CPU.
"""

import sys
import tempfile
import warnings
from pathlib import Path

import numpy as np

from psm._runtime import tune_allocator
from psm.analysis import simulate_roundtrips
from psm.demo import AdvisorVariant, generate_population, run_advisor
from psm.network import Condition, propagate_forward
from psm.pipeline import fit_from_files

tune_allocator()
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="psm-"))

structure, trace = run_advisor(generate_population(1000, seed=0), AdvisorVariant.METRIC, work / "metric")
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    network, _ = fit_from_files(structure, trace)
for node in network.fitted_nodes():
    r = node.fit_report
    print(f"{node.name:<26} dims={node.flow.dim:>2} train={r.train_nll:7.3f} test={r.test_nll:7.3f}")

path = ["Servlet.handle", "NutritionAdvisor.advice", "BmiService.bmi"]
female = propagate_forward(network, path, Condition({"gender": "Female"}), n=1000, seed=1)
everyone = propagate_forward(network, path, None, n=1000, seed=2)
bmi = network.resolve("BmiService.bmi")
f, e = female[bmi]["ret"].astype(float), everyone[bmi]["ret"].astype(float)
print(f"\nbmi given gender=Female: mean {f.mean():.2f}, sd {f.std():.2f}")
print(f"bmi unconditioned:       mean {e.mean():.2f}, sd {e.std():.2f}")

# same conditioning, then ten trips back to the handler and down again
trips = simulate_roundtrips(network, path, Condition({"gender": "Female"}), k=10, n=1000, seed=3)
print()
print(trips.to_text())
h = trips.terminal["height"].astype(float)
print(f"terminal heights after {trips.hops} hops: mean {h.mean():.1f} cm, sd {h.std():.1f} cm")
