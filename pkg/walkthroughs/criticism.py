"""Two companies ship the same advisor; one of them applies the imperial formula to metric inputs.

Both networks are fitted on traces of the same population. Comparing them
node by node shows that the inputs of the BMI service agree while its
output does not, which points at the service itself.

Run with ``python walkthroughs/criticism.py [workdir]``.
"""

import sys
import tempfile
import warnings
from pathlib import Path

from psm._runtime import tune_allocator
from psm.analysis import semantic_compare
from psm.demo import AdvisorVariant, generate_population, run_advisor
from psm.pipeline import fit_from_files

tune_allocator()
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="psm-"))
population = generate_population(1000, seed=0)

networks = {}
for variant in (AdvisorVariant.METRIC, AdvisorVariant.IMPERIAL_BUG):
    files = run_advisor(population, variant, work / variant.value)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        networks[variant], _ = fit_from_files(*files)

metric, imperial = networks[AdvisorVariant.METRIC], networks[AdvisorVariant.IMPERIAL_BUG]
for name in ("BmiService.bmi", "NutritionAdvisor.advice"):
    report = semantic_compare(metric, imperial, metric.resolve(name), n=1000, alpha=0.01, seed=0)
    print(report.to_text())

# a network compared with itself should rarely reject
rejections = sum(r.reject for seed in range(20)
                 for r in semantic_compare(metric, metric, metric.resolve("BmiService.bmi"), seed=seed).results)
print(f"\nself-comparison over 20 seeds: {rejections} rejected columns")
