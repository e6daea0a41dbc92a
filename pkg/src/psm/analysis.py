"""Criticism tools over fitted networks: anomaly checks, compatibility tests, round trips, NLL tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from scipy.special import kolmogorov
from scipy.stats import ks_2samp

from .dataset import Mode
from .errors import NetworkError
from .network import (
    Condition,
    _check_path,
    _fitted,
    _rng,
    node_log_likelihood,
    propagate,
    sample_node,
)

MIN_KS_SAMPLE = 5
EXACT_KS_LIMIT = 10000  # use the exact null distribution when |a|*|b| is at most this


# -- anomaly checks ------------------------------------------------------------


@dataclass(frozen=True)
class AnomalyVerdict:
    node: int
    row: dict
    log_likelihood: float
    training_quantile: float
    flagged: bool
    threshold: float


def anomaly_check(network, node, rows, threshold=0.1, callers=None):
    """Flag rows whose log-likelihood falls below the ``threshold`` quantile of training scores."""
    n = _fitted(network, node)
    if n.train_scores is None or len(n.train_scores) == 0:
        raise NetworkError(f"node {n.name} has no retained training scores")
    rows = list(rows) if not isinstance(rows, dict) else [
        dict(zip(rows, vals)) for vals in zip(*rows.values())]
    ll = node_log_likelihood(network, n.symbol, rows, callers)
    scores = np.sort(n.train_scores)
    q = np.searchsorted(scores, ll, side="left") / len(scores)
    return [AnomalyVerdict(n.symbol, r, float(l), float(p), bool(p < threshold), threshold)
            for r, l, p in zip(rows, ll, q)]


# -- two-sample tests ----------------------------------------------------------


@dataclass(frozen=True)
class KsResult:
    column_id: str
    statistic: float
    p_value: float
    reject: bool
    alpha: float = 0.01


def ks_statistic(a, b):
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / len(a)
    fb = np.searchsorted(b, grid, side="right") / len(b)
    return float(np.max(np.abs(fa - fb)))


def ks_two_sample(a, b, alpha=0.01, column_id=""):
    """Two-sample Kolmogorov-Smirnov test.

    D is the largest ECDF gap. Small samples (``|a| |b| <= 10000``) get the exact
    null distribution of D; larger ones the asymptotic Kolmogorov law at
    effective size ``|a| |b| / (|a| + |b|)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < MIN_KS_SAMPLE or len(b) < MIN_KS_SAMPLE:
        raise ValueError(f"KS test needs at least {MIN_KS_SAMPLE} values per sample, got {len(a)} and {len(b)}")
    d = ks_statistic(a, b)
    if len(a) * len(b) <= EXACT_KS_LIMIT:
        p = float(ks_2samp(a, b, method="exact").pvalue)
    else:
        ne = len(a) * len(b) / (len(a) + len(b))
        p = float(kolmogorov(np.sqrt(ne) * d))
    p = min(max(p, 0.0), 1.0)
    return KsResult(column_id, d, p, p < alpha, alpha)


class Verdict(str, Enum):
    COMPATIBLE = "Compatible"
    INCOMPATIBLE = "Incompatible"


@dataclass(frozen=True)
class CompatibilityReport:
    node: int
    results: tuple
    verdict: Verdict
    alpha: float

    def result(self, column_id):
        return next(r for r in self.results if r.column_id == column_id)

    def to_text(self):
        lines = [f"node {self.node}: {self.verdict.value} (alpha={self.alpha}, Bonferroni over {len(self.results)})"]
        for r in self.results:
            mark = "REJECT" if r.reject else "ok"
            lines.append(f"  {r.column_id:<16} D={r.statistic:.4f} p={r.p_value:.3g} {mark}")
        return "\n".join(lines)


def _as_numbers(node, cid, values):
    enc = node.encodings[cid]
    if enc.mode is Mode.CONTINUOUS:
        return np.asarray(values, dtype=np.float64)
    return enc.index_of(values).astype(np.float64)


def _comparable(a, b):
    """Numeric views of two value arrays; text goes through a shared sorted category index."""
    a, b = np.asarray(a), np.asarray(b)
    if a.dtype.kind in "fiu" and b.dtype.kind in "fiu":
        return a.astype(np.float64), b.astype(np.float64)
    a, b = a.astype(str), b.astype(str)
    index = {v: i for i, v in enumerate(sorted(set(a.tolist()) | set(b.tolist())))}
    return (np.asarray([index[v] for v in a], dtype=np.float64),
            np.asarray([index[v] for v in b], dtype=np.float64))


def semantic_compare(network_null, network_alt, node, n=1000, alpha=0.01, seed=0, seed_alt=None):
    """Per-column KS tests between samples of the same node in two networks.

    Columns that were constant in one network's training data are compared
    as point masses. Text columns are compared through a category index
    shared by both samples. A column rejects when its p-value is below
    ``alpha / columns``.
    """
    if n < MIN_KS_SAMPLE:
        raise ValueError(f"n must be at least {MIN_KS_SAMPLE}")
    a_node = _fitted(network_null, node)
    b_node = _fitted(network_alt, network_alt.resolve(a_node.symbol))
    seq = np.random.SeedSequence(seed)
    sa, sb = seq.spawn(2)
    if seed_alt is not None:
        sb = np.random.SeedSequence(seed_alt)
    xa = sample_node(network_null, a_node.symbol, None, n, np.random.default_rng(sa))
    xb = sample_node(network_alt, b_node.symbol, None, n, np.random.default_rng(sb))
    cols = [c for c in a_node.spec.column_ids if c in xa.columns or c in xb.columns]
    missing = [c for c in cols if c not in xa.columns or c not in xb.columns]
    if missing:
        raise NetworkError(f"columns {missing} of {a_node.name} are modeled in only one network")
    level = alpha / len(cols)
    results = []
    for cid in cols:
        results.append(ks_two_sample(*_comparable(xa[cid], xb[cid]), level, cid))
    verdict = Verdict.INCOMPATIBLE if any(r.reject for r in results) else Verdict.COMPATIBLE
    return CompatibilityReport(a_node.symbol, tuple(results), verdict, alpha)


# -- round trips ---------------------------------------------------------------


@dataclass(frozen=True)
class RoundResult:
    index: int
    ks: dict  # column -> KsResult against the reference
    mean_drift: dict
    std_drift: dict


@dataclass
class RoundTripReport:
    path: tuple
    reference: object  # Samples at the terminal node after the first forward pass
    rounds: list = field(default_factory=list)
    terminal: object = None

    @property
    def hops(self):
        return 2 * (len(self.path) - 1) * len(self.rounds)

    def to_text(self):
        lines = [f"path {' -> '.join(map(str, self.path))}, {len(self.rounds)} round trips ({self.hops} hops)"]
        for r in self.rounds:
            parts = [f"{c}: D={k.statistic:.3f} dmean={r.mean_drift[c]:+.3g} dstd={r.std_drift[c]:+.3g}"
                     for c, k in r.ks.items()]
            lines.append(f"  round {r.index:>2}  " + "; ".join(parts))
        return "\n".join(lines)


def _terminal_numbers(node, samples):
    return {cid: _as_numbers(node, cid, samples[cid]) for cid in node.encodings.column_ids}


def simulate_roundtrips(network, path, root_condition=None, k=10, n=1000, seed=0, method="knn"):
    """Forward pass, then ``k`` rounds of (backward to the root, forward to the terminal).

    Each round is compared per terminal column with the first forward pass:
    KS distance plus drift of mean and standard deviation.
    """
    forward_nodes = _check_path(network, path, "forward")
    backward_nodes = list(reversed(forward_nodes))
    rng = _rng(seed)
    root = sample_node(network, forward_nodes[0].symbol, root_condition, n, rng)
    reference = propagate(network, forward_nodes, root, rng, method)[forward_nodes[-1].symbol]
    terminal = forward_nodes[-1]
    ref = _terminal_numbers(terminal, reference)
    report = RoundTripReport(tuple(nd.symbol for nd in forward_nodes), reference, [], reference)
    current = reference
    for i in range(1, k + 1):
        try:
            back = propagate(network, backward_nodes, current, rng, method)[forward_nodes[0].symbol]
            current = propagate(network, forward_nodes, back, rng, method)[terminal.symbol]
        except Exception as exc:
            raise NetworkError(f"round trip {i}: {exc}") from exc
        now = _terminal_numbers(terminal, current)
        ks = {c: ks_two_sample(now[c], ref[c], column_id=c) for c in ref}
        mean = {c: float(now[c].mean() - ref[c].mean()) for c in ref}
        std = {c: float(now[c].std() - ref[c].std()) for c in ref}
        report.rounds.append(RoundResult(i, ks, mean, std))
    report.terminal = current
    return report


# -- NLL report ----------------------------------------------------------------


REPORT_FIELDS = ("dataPoints", "dimensions", "parameters", "trainNLL", "testNLL")


@dataclass(frozen=True)
class NllReport:
    rows: tuple  # per-node dicts
    summary: dict  # field -> {"Mdn", "Q1", "Q3", "Total"}

    @property
    def models(self):
        return len(self.rows)

    def to_csv(self, path=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "name", *REPORT_FIELDS])
        for r in self.rows:
            w.writerow([r["node"], r["name"], *(r[f] for f in REPORT_FIELDS)])
        for stat in ("Mdn", "Q1", "Q3", "Total"):
            w.writerow(["", stat, *(self.summary[f][stat] for f in REPORT_FIELDS)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text

    def to_text(self):
        head = f"{'node':<28}{'points':>8}{'dims':>6}{'params':>9}{'train':>10}{'test':>10}"
        lines = [f"models: {self.models}", head, "-" * len(head)]
        for r in self.rows:
            lines.append(f"{r['name'][:27]:<28}{r['dataPoints']:>8}{r['dimensions']:>6}{r['parameters']:>9}"
                         f"{r['trainNLL']:>10.3f}{r['testNLL']:>10.3f}")
        lines.append("-" * len(head))
        for stat in ("Mdn", "Q1", "Q3", "Total"):
            s = self.summary
            lines.append(f"{stat:<28}{s['dataPoints'][stat]:>8g}{s['dimensions'][stat]:>6g}"
                         f"{s['parameters'][stat]:>9g}{s['trainNLL'][stat]:>10.3f}{s['testNLL'][stat]:>10.3f}")
        return "\n".join(lines)


def nll_report(network):
    """Per-node fit summary with median, quartiles and totals per column."""
    from .network import fit_table

    rows = tuple(fit_table(network))
    if not rows:
        raise NetworkError("no fitted nodes to report")
    summary = {}
    for f in REPORT_FIELDS:
        v = np.asarray([r[f] for r in rows], dtype=np.float64)
        q1, mdn, q3 = np.percentile(v, [25, 50, 75])
        total = float(v.sum())
        if f in ("dataPoints", "dimensions", "parameters"):
            total = int(total)
        summary[f] = {"Mdn": float(mdn), "Q1": float(q1), "Q3": float(q3), "Total": total}
    return NllReport(rows, summary)


# -- optional plots ------------------------------------------------------------


def plot_columns(samples_by_label, node, out_dir, background=None):
    """One SVG density/histogram per column; needs matplotlib. Returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for cid in node.encodings.column_ids:
        fig, ax = plt.subplots(figsize=(4, 3))
        if background is not None:
            ax.hist(_as_numbers(node, cid, background[cid]), bins=40, density=True, color="0.85", label="background")
        for label, s in samples_by_label.items():
            ax.hist(_as_numbers(node, cid, s[cid]), bins=40, density=True, histtype="step", label=label)
        ax.set_title(f"{node.name}: {cid}")
        ax.legend(fontsize=7)
        p = out / f"{node.symbol}_{cid}.svg"
        fig.savefig(p, format="svg")
        plt.close(fig)
        paths.append(p)
    return paths


__all__ = [
    "AnomalyVerdict", "CompatibilityReport", "Condition", "KsResult", "NllReport", "RoundTripReport",
    "Verdict", "anomaly_check", "ks_statistic", "ks_two_sample", "nll_report", "plot_columns",
    "semantic_compare", "simulate_roundtrips",
]
