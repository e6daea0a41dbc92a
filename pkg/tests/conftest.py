"""Shared fixtures: demo inputs and fitted networks are built once per session."""

import warnings

import pytest

from psm._runtime import tune_allocator
from psm.demo import AdvisorVariant, generate_population, run_advisor

tune_allocator()

DEMO_N = 1000
DEMO_SEED = 0


@pytest.fixture(scope="session")
def demo_metric(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_metric")
    return run_advisor(generate_population(DEMO_N, DEMO_SEED), AdvisorVariant.METRIC, out)


@pytest.fixture(scope="session")
def demo_imperial(tmp_path_factory):
    out = tmp_path_factory.mktemp("demo_imperial")
    return run_advisor(generate_population(DEMO_N, DEMO_SEED), AdvisorVariant.IMPERIAL_BUG, out)


def _fit(paths):
    from psm.pipeline import fit_from_files

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fit_from_files(*paths)


@pytest.fixture(scope="session")
def metric_fit(demo_metric):
    """(network, prepared inputs) for the metric demo with default settings."""
    return _fit(demo_metric)


@pytest.fixture(scope="session")
def imperial_fit(demo_imperial):
    return _fit(demo_imperial)


@pytest.fixture(scope="session")
def metric_network(metric_fit):
    return metric_fit[0]


@pytest.fixture(scope="session")
def imperial_network(imperial_fit):
    return imperial_fit[0]
