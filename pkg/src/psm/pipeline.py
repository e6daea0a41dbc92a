"""Structure + trace -> datasets -> fitted network, shared by the CLI and tests."""

from __future__ import annotations

import hashlib
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

from .dataset import MAX_ROWS, MIN_ROWS, tally
from .errors import PipelineError
from .flow import TrainConfig
from .network import build_network, fit_network
from .structure import derive_model_specs, load_structure, select_universe
from .trace import correlate_invocations, read_trace


@contextmanager
def phase(name):
    """Re-raise any failure inside the block as a :class:`PipelineError` tagged ``name``."""
    try:
        yield
    except PipelineError:
        raise
    except (OSError, ValueError, KeyError) as exc:
        raise PipelineError(name, exc) from exc
    except Exception as exc:
        if type(exc).__module__.startswith("psm"):
            raise PipelineError(name, exc) from exc
        raise


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class Prepared:
    graph: object
    universe: object
    specs: list
    records: list
    datasets: dict
    events: int


def prepare(structure_path, trace_path, selector=None, include_invocations=False, seed=0,
            min_rows=MIN_ROWS, max_rows=MAX_ROWS):
    """Load, select, derive, ingest and tally; failures carry the phase name."""
    with phase("load"):
        graph = load_structure(structure_path)
    with phase("select"):
        universe = select_universe(graph, selector)
        specs = derive_model_specs(universe, graph, include_invocations)
    with phase("ingest"):
        events = list(read_trace(trace_path))
        records = correlate_invocations(events, graph, include_invocations)
    by_node = {}
    for r in records:
        by_node.setdefault(r.node, []).append(r)
    datasets = {}
    with phase("tally"):
        for spec in specs:
            if spec.empty:
                continue
            recs = by_node.get(spec.node, [])
            if not recs:
                continue
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                datasets[spec.node] = tally(recs, spec, seed, min_rows, max_rows)
    return Prepared(graph, universe, specs, records, datasets, len(events))


def fit_from_files(structure_path, trace_path, config=TrainConfig(), selector=None,
                   include_invocations=False, workers=1):
    prep = prepare(structure_path, trace_path, selector, include_invocations, config.seed)
    links = [lk for lk in prep.graph.dataflow_links if lk.from_node in prep.universe and lk.to_node in prep.universe]
    with phase("fit"):
        network = build_network(prep.specs, links, prep.graph.digest())
        network = fit_network(network, prep.datasets, config, workers)
    cfg = {**network.config, "selector": selector if isinstance(selector, (str, dict, type(None))) else repr(selector),
           "includeInvocations": include_invocations,
           "inputs": {"structure": file_digest(structure_path), "trace": file_digest(trace_path)}}
    return replace(network, config=cfg), prep
