"""Probabilistic model network: one conditional flow per executable plus dataflow links.

Inference works on decoded (raw) values at the API boundary and on encoded
vectors internally. Hops between linked nodes use nearest-neighbour matching:
the next node is sampled in bulk (with the upstream node as caller when that
call site exists) and each received row picks one of its ``k`` closest
proposals on the linked columns. Linked columns keep the received values;
the remaining columns come from the chosen proposal. ``method="band"`` instead restricts the next
node to the [5%, 95%] range of the received values per linked column.
"""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import __version__
from .dataset import EncodingSet, Mode, encode, infer_encodings
from .errors import (
    ConditionTooTightError,
    DatasetError,
    DigestMismatchError,
    FlowError,
    InferenceWarning,
    NetworkError,
    PersistenceError,
)
from .flow import FitReport, FlowParams, TrainConfig, fit, init_flow, inverse_g, log_prob
from .structure import DataflowLink, DataType, FeatureColumnSpec, ModelSpec, Role

FORMAT_VERSION = 1
PROPOSAL_FACTOR = 20
MIN_PROPOSALS = 1000
MIN_ACCEPTANCE = 1e-4
EQUALITY_BAND = 0.5  # continuous equality tolerance, in training standard deviations
NEIGHBOURS = 4


class NodeState(str, Enum):
    EMPTY = "Empty"
    FITTED = "Fitted"
    INELIGIBLE = "Ineligible"


@dataclass(frozen=True)
class NetworkNode:
    spec: ModelSpec
    state: NodeState = NodeState.EMPTY
    encodings: EncodingSet | None = None
    flow: FlowParams | None = None
    fit_report: FitReport | None = None
    train_scores: np.ndarray | None = field(default=None, repr=False)
    caller_counts: tuple = ()
    rows: int = 0
    reason: str = ""
    # in-memory only; not persisted
    dataset: object = field(default=None, repr=False, compare=False)
    split: object = field(default=None, repr=False, compare=False)

    @property
    def symbol(self):
        return self.spec.node

    @property
    def name(self):
        return self.spec.name or str(self.spec.node)

    @property
    def fitted(self):
        return self.state is NodeState.FITTED


@dataclass(frozen=True)
class ModelNetwork:
    nodes: dict
    links: tuple = ()
    topology_source: str = ""
    config: dict = field(default_factory=dict)

    def __getitem__(self, symbol):
        try:
            return self.nodes[symbol]
        except KeyError:
            raise NetworkError(f"no node {symbol}") from None

    def fitted_nodes(self):
        return [n for _, n in sorted(self.nodes.items()) if n.fitted]

    def resolve(self, ref):
        """Node symbol from a symbol or a (possibly suffix-matched) name."""
        if isinstance(ref, (int, np.integer)):
            if int(ref) not in self.nodes:
                raise NetworkError(f"no node {ref}")
            return int(ref)
        ref = str(ref)
        if ref.isdigit():
            return self.resolve(int(ref))
        exact = [s for s, n in self.nodes.items() if n.name == ref]
        if exact:
            return exact[0]
        partial = [s for s, n in self.nodes.items() if n.name.endswith("." + ref)]
        if len(partial) == 1:
            return partial[0]
        raise NetworkError(f"node {ref!r} is {'ambiguous' if partial else 'unknown'}")

    def links_between(self, a, b):
        """(column at a, column at b) pairs from links in either direction."""
        pairs = [(lk.from_column, lk.to_column) for lk in self.links if lk.from_node == a and lk.to_node == b]
        pairs += [(lk.to_column, lk.from_column) for lk in self.links if lk.from_node == b and lk.to_node == a]
        return pairs

    def upstream_of(self, node):
        return sorted({lk.from_node for lk in self.links if lk.to_node == node})


@dataclass(frozen=True)
class Condition:
    """Column constraints (scalar equality or ``(lo, hi)`` interval) and an optional caller."""

    assignments: dict = field(default_factory=dict)
    caller_equals: int | None = None

    def __post_init__(self):
        for cid, v in self.assignments.items():
            if isinstance(v, (tuple, list)):
                if len(v) != 2 or not v[0] <= v[1]:
                    raise ValueError(f"interval for {cid!r} must be (lo, hi) with lo <= hi")

    @classmethod
    def parse(cls, items):
        """From ``["gender=Female", "weight=60:70", "caller=12"]``."""
        assignments, caller = {}, None
        for item in items or ():
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"condition {item!r} is not column=value")
            key = key.strip()
            value = value.strip()
            if key == "caller":
                caller = int(value)
            elif ":" in value:
                lo, hi = value.split(":", 1)
                assignments[key] = (float(lo), float(hi))
            else:
                assignments[key] = _maybe_number(value)
        return cls(assignments, caller)

    @property
    def empty(self):
        return not self.assignments and self.caller_equals is None


def _maybe_number(text):
    try:
        return float(text)
    except ValueError:
        return text


@dataclass
class Samples:
    """Decoded rows of one node with their encoded form and callers."""

    node: int
    columns: dict
    callers: np.ndarray
    encoded: np.ndarray
    cond: np.ndarray
    clamped: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.callers)

    def __getitem__(self, column_id):
        return self.columns[column_id]

    def take(self, index):
        index = np.asarray(index, dtype=np.int64)
        return Samples(
            self.node,
            {k: v[index] for k, v in self.columns.items()},
            self.callers[index],
            self.encoded[index],
            self.cond[index],
            self.clamped[index],
            dict(self.meta),
        )

    def to_csv(self, path):
        """Write rows to a path or an open text stream."""
        if hasattr(path, "write"):
            self._write_csv(path)
            return
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            self._write_csv(fh)

    def _write_csv(self, fh):
        ids = list(self.columns)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["caller", *ids])
        for i in range(len(self)):
            w.writerow([int(self.callers[i]), *(_fmt(self.columns[c][i]) for c in ids)])


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


# -- construction and fitting ------------------------------------------------


def build_network(specs, links=(), topology_source=""):
    nodes = {}
    for spec in specs:
        if spec.node in nodes:
            raise NetworkError(f"duplicate node symbol {spec.node}")
        nodes[spec.node] = NetworkNode(spec)
    for lk in links:
        for sym, col in ((lk.from_node, lk.from_column), (lk.to_node, lk.to_column)):
            if sym not in nodes:
                raise NetworkError(f"link {_link_str(lk)} references node {sym} outside the network")
            if col not in nodes[sym].spec.column_ids:
                raise NetworkError(f"link {_link_str(lk)} names missing column {col!r} of node {sym}")
    return ModelNetwork(nodes, tuple(links), topology_source)


def _link_str(lk):
    return f"{lk.from_node}.{lk.from_column}->{lk.to_node}.{lk.to_column}"


def node_seed(seed, symbol):
    return int(np.random.SeedSequence([int(seed), int(symbol)]).generate_state(1)[0])


def _fit_node(node, dataset, config):
    if dataset is None:
        return replace(node, state=NodeState.INELIGIBLE, reason="no invocation records")
    if not dataset.eligible:
        return replace(node, state=NodeState.INELIGIBLE, reason=dataset.reason, rows=dataset.row_count,
                       dataset=dataset)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            encodings = infer_encodings(dataset)
        if encodings.dim == 0:
            return replace(node, state=NodeState.INELIGIBLE, reason="all columns constant",
                           rows=dataset.row_count, dataset=dataset)
        split = encode(dataset, encodings)
        seed = node_seed(config.seed, node.symbol)
        params = init_flow(encodings.dim, encodings.cond_dim, config.capacity, seed,
                           elementwise=config.elementwise or None)
        params, report = fit(params, split, config)
    except (FlowError, DatasetError) as exc:
        return replace(node, state=NodeState.INELIGIBLE, reason=f"fit failed: {exc}",
                       rows=dataset.row_count, dataset=dataset)
    scores = np.sort(log_prob(params, split.train, split.cond_train))
    callers, counts = np.unique(dataset.condition_values, return_counts=True)
    return replace(
        node,
        state=NodeState.FITTED,
        encodings=encodings,
        flow=params,
        fit_report=report,
        train_scores=scores,
        caller_counts=tuple((int(c), int(k)) for c, k in zip(callers, counts)),
        rows=dataset.row_count,
        reason="",
        dataset=dataset,
        split=split,
    )


def fit_network(network, datasets, config=TrainConfig(), workers=1):
    """Fit every node with an eligible dataset; returns a new network.

    Per-node seeds derive from ``config.seed`` and the node symbol, so the
    worker count never changes results.
    """
    symbols = sorted(network.nodes)
    jobs = [(network.nodes[s], datasets.get(s)) for s in symbols]
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fitted = list(pool.map(lambda job: _fit_node(job[0], job[1], config), jobs))
    else:
        fitted = [_fit_node(n, d, config) for n, d in jobs]
    cfg = {**network.config, "train": asdict(config)}
    return replace(network, nodes=dict(zip(symbols, fitted)), config=cfg)


def fit_table(network):
    rows = []
    for node in network.fitted_nodes():
        r = node.fit_report
        rows.append({
            "node": node.symbol,
            "name": node.name,
            "dataPoints": node.rows,
            "dimensions": node.encodings.dim,
            "parameters": r.parameter_count,
            "epochsRun": r.epochs_run,
            "bestEpoch": r.best_epoch,
            "trainNLL": r.train_nll,
            "testNLL": r.test_nll,
        })
    return rows


# -- sampling and likelihood -------------------------------------------------


def _fitted(network, node):
    sym = network.resolve(node)
    n = network[sym]
    if not n.fitted:
        raise NetworkError(f"node {n.name} is not fitted ({n.state.value}{': ' + n.reason if n.reason else ''})")
    return n


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _callers(node, n, caller, rng):
    if caller is not None:
        caller = int(caller)
        if caller not in node.encodings.condition.categories:
            warnings.warn(f"caller {caller} unseen by {node.name}; using the reserved unseen category",
                          InferenceWarning, stacklevel=3)
        return np.full(n, caller, dtype=np.int64)
    symbols = np.asarray([c for c, _ in node.caller_counts], dtype=np.int64)
    counts = np.asarray([k for _, k in node.caller_counts], dtype=np.float64)
    if len(symbols) == 1:
        return np.full(n, symbols[0], dtype=np.int64)
    return rng.choice(symbols, size=n, p=counts / counts.sum())


def _draw(node, n, caller, rng):
    callers = _callers(node, n, caller, rng)
    cond = node.encodings.encode_callers(callers)
    z = rng.standard_normal((n, node.flow.dim))
    x = inverse_g(node.flow, z, cond) if n else z
    table, clamped = node.encodings.decode(x) if n else ({c: np.empty(0) for c in node.encodings.column_ids},
                                                           np.zeros(0, dtype=bool))
    return Samples(node.symbol, table, callers, x, cond, clamped)


def sample_node(network, node, condition=None, n=1000, seed=0):
    """Decoded samples of one node; ``condition.caller_equals`` fixes the caller input."""
    node = _fitted(network, node)
    if n < 0:
        raise ValueError("n must be non-negative")
    condition = condition or Condition()
    if condition.assignments:
        return condition_dynamic(network, node.symbol, condition, n, seed)
    return _draw(node, n, condition.caller_equals, _rng(seed))


def _rows_table(rows):
    if isinstance(rows, dict):
        return {k: list(np.atleast_1d(v)) for k, v in rows.items()}
    rows = list(rows)
    keys = set().union(*(r.keys() for r in rows)) if rows else set()
    return {k: [r.get(k) for r in rows] for k in keys}


def node_log_likelihood(network, node, rows, callers=None):
    """Log-likelihood (nats) of raw rows under a fitted node.

    ``rows`` is a column table or a list of row dicts. Callers come from the
    ``callers`` argument, else a ``caller`` column, else the node's most frequent
    training caller.
    """
    node = _fitted(network, node)
    table = _rows_table(rows)
    missing = [c for c in node.encodings.column_ids if c not in table or any(v is None for v in table[c])]
    if missing:
        raise NetworkError(f"rows for {node.name} lack columns {missing}")
    n = len(table[node.encodings.column_ids[0]])
    if callers is None:
        if "caller" in table:
            callers = [int(c) for c in table["caller"]]
        else:
            top = max(node.caller_counts, key=lambda ck: (ck[1], -ck[0]))[0]
            callers = [top] * n
    x, c = node.encodings.encode(table, np.asarray(callers))
    return log_prob(node.flow, x, c)


# -- dynamic conditioning ------------------------------------------------------


def _column_kind(node, cid):
    if cid not in node.encodings.column_ids:
        raise NetworkError(f"node {node.name} has no modeled column {cid!r}")
    return node.encodings[cid]


def _constraint_weights(node, samples, assignments):
    """Per-sample weights; zero outside the constraint support."""
    w = np.ones(len(samples))
    exact = {}
    for cid, target in assignments.items():
        if cid in node.encodings.constants:
            v = node.encodings.constants[cid]
            if isinstance(target, (tuple, list)):
                hit = not isinstance(v, str) and target[0] <= v <= target[1]
            else:
                hit = str(v) == str(target) if isinstance(v, str) else float(target) == v
            w *= float(hit)
            continue
        enc = _column_kind(node, cid)
        values = samples.columns[cid]
        if isinstance(target, (tuple, list)):
            if enc.data_type is DataType.TEXT:
                raise NetworkError(f"interval constraint on text column {cid!r}")
            v = values.astype(np.float64)
            w *= (v >= target[0]) & (v <= target[1])
        elif enc.mode is Mode.CONTINUOUS:
            band = EQUALITY_BAND * enc.std
            d = values.astype(np.float64) - float(target)
            w *= (np.abs(d) <= band) * np.exp(-0.5 * (d / (0.5 * band)) ** 2)
            exact[cid] = float(target)
        else:
            key = str(target) if enc.data_type is DataType.TEXT else float(target)
            if enc.data_type is DataType.TEXT:
                w *= np.asarray([str(v) == key for v in values], dtype=np.float64)
            else:
                w *= values.astype(np.float64) == key
    return w, exact


def _resample(weights, n, rng):
    pos = np.flatnonzero(weights > 0)
    if len(pos) >= n and np.all(weights[pos] == weights[pos[0]]):
        return np.sort(rng.choice(pos, size=n, replace=False))
    return rng.choice(len(weights), size=n, replace=True, p=weights / weights.sum())


def _set_exact(node, samples, exact):
    if not exact:
        return samples
    sl = node.encodings.slices()
    for cid, v in exact.items():
        samples.columns[cid] = np.full(len(samples), v)
        samples.encoded[:, sl[cid]] = node.encodings[cid].encode(np.full(len(samples), v))
    return samples


def condition_dynamic(network, node, condition, n=1000, seed=0, proposals=None):
    """Samples restricted to value/interval constraints by importance resampling.

    ``M = max(20 n, 1000)`` proposals are drawn from the unconditioned node (or
    its static caller condition). Intervals and discrete equalities are hard
    filters; a continuous equality keeps proposals within half a training
    standard deviation, weighted by a Gaussian kernel, and reports the
    column at exactly the requested value.
    """
    node = _fitted(network, node)
    rng = _rng(seed)
    m = proposals or max(PROPOSAL_FACTOR * n, MIN_PROPOSALS)
    pool = _draw(node, m, condition.caller_equals, rng)
    if not condition.assignments:
        return pool.take(np.arange(n))
    w, exact = _constraint_weights(node, pool, condition.assignments)
    accepted = int(np.count_nonzero(w))
    rate = accepted / m
    if rate < MIN_ACCEPTANCE:
        raise ConditionTooTightError(
            f"condition on {node.name} accepted {accepted} of {m} proposals; widen the intervals")
    idx = _resample(w, n, rng)
    out = _set_exact(node, pool.take(idx), exact)
    ess = float(w.sum() ** 2 / np.sum(w * w))
    out.meta.update(acceptance=rate, effective_size=ess, proposals=m)
    if ess < n / 10:
        warnings.warn(f"condition on {node.name}: effective sample size {ess:.0f} for n={n}",
                      InferenceWarning, stacklevel=2)
    return out


# -- propagation ---------------------------------------------------------------


def _hop_pool(network, src, dst, m, rng):
    known = {c for c, _ in dst.caller_counts}
    caller = src.symbol if src.symbol in known else None
    return _draw(dst, m, caller, rng)


def _encoded_block(node, columns, table):
    """Encoded matrix of selected columns from a raw column table."""
    parts = [node.encodings[c].encode(table[c]) for c in columns]
    return np.hstack(parts)


def _linked_columns(network, src, dst):
    pairs = network.links_between(src.symbol, dst.symbol)
    usable = [(a, b) for a, b in pairs if a in src.encodings.column_ids and b in dst.encodings.column_ids]
    if not usable:
        raise NetworkError(f"no usable dataflow link between {src.name} and {dst.name}")
    return usable


def _hop_knn(network, src, dst, received, rng, k=NEIGHBOURS, factor=PROPOSAL_FACTOR):
    pairs = _linked_columns(network, src, dst)
    n = len(received)
    pool = _hop_pool(network, src, dst, max(factor * n, MIN_PROPOSALS), rng)
    dst_cols = [b for _, b in pairs]
    query_table = {b: received.columns[a] for a, b in pairs}
    tree = cKDTree(_encoded_block(dst, dst_cols, pool.columns))
    k = min(k, len(pool))
    _, nbr = tree.query(_encoded_block(dst, dst_cols, query_table), k=k)
    nbr = nbr.reshape(n, k)
    pick = nbr[np.arange(n), rng.integers(k, size=n)]
    out = pool.take(pick)
    # the link carries the value itself; only unlinked columns come from the neighbour
    sl = dst.encodings.slices()
    for a, b in pairs:
        values = np.asarray(received.columns[a]).copy()
        out.columns[b] = values
        out.encoded[:, sl[b]] = dst.encodings[b].encode(values)
    out.meta.update(neighbours=nbr, pool=pool)
    return out


def _hop_band(network, src, dst, received, rng):
    pairs = _linked_columns(network, src, dst)
    assignments = {}
    for a, b in pairs:
        enc = dst.encodings[b]
        if enc.mode is Mode.CONTINUOUS:
            v = received.columns[a].astype(np.float64)
            assignments[b] = (float(np.quantile(v, 0.05)), float(np.quantile(v, 0.95)))
    known = {c for c, _ in dst.caller_counts}
    caller = src.symbol if src.symbol in known else None
    return condition_dynamic(network, dst.symbol, Condition(assignments, caller), len(received), rng)


def _check_path(network, path, direction):
    nodes = [_fitted(network, p) for p in path]
    if not nodes:
        raise NetworkError("empty path")
    for a, b in zip(nodes, nodes[1:]):
        if direction == "forward":
            ok = any(lk.from_node == a.symbol and lk.to_node == b.symbol for lk in network.links)
        else:
            ok = any(lk.from_node == b.symbol and lk.to_node == a.symbol for lk in network.links)
        if not ok:
            raise NetworkError(f"no {direction} dataflow link between {a.name} and {b.name}")
    return nodes


def propagate(network, nodes, start, rng, method="knn"):
    """Carry ``start`` samples along already-validated ``nodes``; returns samples per node."""
    hop = {"knn": _hop_knn, "band": _hop_band}.get(method)
    if hop is None:
        raise ValueError(f"unknown hop method {method!r}")
    out = {nodes[0].symbol: start}
    current = start
    for a, b in zip(nodes, nodes[1:]):
        current = hop(network, a, b, current, rng)
        out[b.symbol] = current
    return out


def propagate_forward(network, path, root_condition=None, n=1000, seed=0, method="knn"):
    """Sample the root (optionally conditioned), then condition each next node on what it receives."""
    nodes = _check_path(network, path, "forward")
    rng = _rng(seed)
    root = sample_node(network, nodes[0].symbol, root_condition, n, rng)
    return propagate(network, nodes, root, rng, method)


def propagate_backward(network, path, start, n=1000, seed=0, method="knn"):
    """Walk ``path`` against the link direction, starting from samples or a condition at ``path[0]``."""
    nodes = _check_path(network, path, "backward")
    rng = _rng(seed)
    if not isinstance(start, Samples):
        start = sample_node(network, nodes[0].symbol, start, n, rng)
    return propagate(network, nodes, start, rng, method)


def _observation_condition(observation):
    if isinstance(observation, Condition):
        return observation
    return Condition(dict(observation))


def reason_backward(network, node, observation, n=1000, seed=0, upstream=None, k=NEIGHBOURS):
    """Upstream samples ranked by how well they explain an observation at ``node``.

    Draws ``20 n`` upstream samples, carries each one hop forward by matching
    its ``k`` nearest proposals at ``node``, scores the observation under those
    neighbours (indicator for intervals and discrete values, Gaussian kernel
    for continuous values), and resamples ``n`` upstream rows by score.
    Rows come back ordered from most to least likely; ``meta["weights"]`` holds
    their scores.
    """
    target = _fitted(network, node)
    parents = network.upstream_of(target.symbol)
    if not parents:
        raise NetworkError(f"node {target.name} has no upstream dataflow link")
    if upstream is None:
        if len(parents) > 1:
            names = [network[p].name for p in parents]
            raise NetworkError(f"node {target.name} has several upstream nodes {names}; choose one")
        upstream = parents[0]
    src = _fitted(network, upstream)
    if src.symbol not in parents:
        raise NetworkError(f"{src.name} is not upstream of {target.name}")
    cond = _observation_condition(observation)
    rng = _rng(seed)
    m = max(PROPOSAL_FACTOR * n, MIN_PROPOSALS)
    candidates = _draw(src, m, None, rng)
    hop = _hop_knn(network, src, target, candidates, rng, k=k, factor=1)
    nbr = hop.meta["neighbours"]
    pool_w, _ = _constraint_weights(target, _pool_of(hop, nbr), cond.assignments)
    weights = pool_w.reshape(nbr.shape).mean(axis=1)
    if not np.any(weights > 0):
        raise ConditionTooTightError(f"no upstream sample of {src.name} explains the observation")
    idx = rng.choice(m, size=n, replace=True, p=weights / weights.sum())
    order = np.argsort(-weights[idx], kind="stable")
    out = candidates.take(idx[order])
    out.meta.update(weights=weights[idx[order]], observed_node=target.symbol)
    return out


def _pool_of(hop, nbr):
    """Samples for every neighbour index (flattened)."""
    return hop.meta["pool"].take(nbr.ravel())


# -- persistence ---------------------------------------------------------------


def _spec_json(spec):
    return {
        "node": spec.node,
        "name": spec.name,
        "columns": [{"id": c.id, "role": c.role.value, "source": c.source_symbol, "dataType": c.data_type.value}
                    for c in spec.columns],
        "conditionDomain": list(spec.condition_domain),
    }


def _spec_from_json(obj):
    cols = tuple(FeatureColumnSpec(c["id"], Role(c["role"]), c["source"], DataType(c["dataType"]))
                 for c in obj["columns"])
    return ModelSpec(obj["node"], cols, tuple(obj["conditionDomain"]), obj.get("name", ""))


def _node_json(node):
    return {
        "node": node.symbol,
        "name": node.name,
        "state": node.state.value,
        "reason": node.reason,
        "rows": node.rows,
        "spec": _spec_json(node.spec),
        "encodings": node.encodings.to_json() if node.encodings else None,
        "flow": node.flow.to_json() if node.flow else None,
        "fitReport": node.fit_report.to_json() if node.fit_report else None,
        "trainScores": node.train_scores.tolist() if node.train_scores is not None else None,
        "callerCounts": [list(ck) for ck in node.caller_counts],
    }


def _node_from_json(obj):
    return NetworkNode(
        spec=_spec_from_json(obj["spec"]),
        state=NodeState(obj["state"]),
        encodings=EncodingSet.from_json(obj["encodings"]) if obj["encodings"] else None,
        flow=FlowParams.from_json(obj["flow"]) if obj["flow"] else None,
        fit_report=FitReport.from_json(obj["fitReport"]) if obj["fitReport"] else None,
        train_scores=np.asarray(obj["trainScores"]) if obj["trainScores"] is not None else None,
        caller_counts=tuple(tuple(ck) for ck in obj["callerCounts"]),
        rows=obj["rows"],
        reason=obj["reason"],
    )


def _dump(obj):
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def save_network(network, directory):
    """Write one document per node, a manifest, and a separate timing file.

    The manifest holds no wall-clock data, so identical seeds give
    byte-identical manifests.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, timing = [], {}
    for sym in sorted(network.nodes):
        node = network.nodes[sym]
        blob = _dump(_node_json(node))
        fname = f"node_{sym}.json"
        (directory / fname).write_bytes(blob)
        entries.append({"node": sym, "name": node.name, "file": fname,
                        "sha256": hashlib.sha256(blob).hexdigest(), "state": node.state.value})
        if node.fit_report is not None:
            timing[str(sym)] = node.fit_report.wall_time
    manifest = {
        "formatVersion": FORMAT_VERSION,
        "toolVersion": __version__,
        "topologyDigest": network.topology_source,
        "config": network.config,
        "nodes": entries,
        "fitTable": fit_table(network),
        "links": [asdict(lk) for lk in network.links],
    }
    (directory / "manifest.json").write_bytes(_dump(manifest))
    (directory / "timing.json").write_bytes(_dump(timing))
    return directory / "manifest.json"


def load_network(directory, expected_digest=None, force=False):
    """Read a saved network, verifying per-node checksums and the topology digest."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistenceError(f"cannot read manifest in {directory}: {exc}") from exc
    if manifest.get("formatVersion") != FORMAT_VERSION:
        raise PersistenceError(f"unsupported format version {manifest.get('formatVersion')}")
    digest = manifest.get("topologyDigest", "")
    if expected_digest is not None and expected_digest != digest and not force:
        raise DigestMismatchError(
            f"network was built from structure {digest[:12]}, not {expected_digest[:12]}; use force to override")
    timing = {}
    if (directory / "timing.json").exists():
        timing = json.loads((directory / "timing.json").read_text(encoding="utf-8"))
    nodes = {}
    for entry in manifest["nodes"]:
        path = directory / entry["file"]
        try:
            blob = path.read_bytes()
        except OSError as exc:
            raise PersistenceError(f"missing node document {path}") from exc
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise PersistenceError(f"checksum mismatch in {path.name}")
        node = _node_from_json(json.loads(blob))
        if node.fit_report is not None and str(node.symbol) in timing:
            node = replace(node, fit_report=replace(node.fit_report, wall_time=timing[str(node.symbol)]))
        nodes[node.symbol] = node
    links = tuple(DataflowLink(**lk) for lk in manifest.get("links", []))
    return ModelNetwork(nodes, links, digest, manifest.get("config", {}))
