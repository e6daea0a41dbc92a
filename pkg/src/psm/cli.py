"""Command-line entry point: ``psm demo|fit|infer|check|compare|simulate|report``.

Exit codes: 0 success, 1 usage, 2 data or validation failure (including an
Incompatible verdict from ``compare``), 3 numerical failure.
Verbosity comes from ``PSM_LOG_LEVEL``; everything else from flags or an
optional ``--config`` TOML/JSON file whose keys are the flag names.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from ._runtime import tune_allocator
from .errors import DivergenceError, FlowError, PipelineError, PSMError

log = logging.getLogger("psm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return v


def _path_list(text):
    return [p.strip() for p in text.split(",") if p.strip()]


# -- config files ---------------------------------------------------------------


def _read_config(path):
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(raw)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        data = tomllib.loads(raw.decode("utf-8"))
    if not isinstance(data, dict):
        raise UsageError(f"{path}: config must be a table of flag names")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


# -- commands -----------------------------------------------------------------------


def cmd_demo(args):
    from .demo import AdvisorVariant, generate_population, run_advisor

    variant = {"metric": AdvisorVariant.METRIC, "imperial-bug": AdvisorVariant.IMPERIAL_BUG}[args.variant]
    pop = generate_population(args.n, args.seed)
    structure, trace = run_advisor(pop, variant, args.out)
    for p in (structure, trace, Path(args.out) / "ground_truth.csv"):
        print(p)
    return EXIT_OK


def _train_config(args):
    from .flow import TrainConfig

    names = {f.name for f in fields(TrainConfig)}
    kwargs = {k: getattr(args, k) for k in names if getattr(args, k, None) is not None}
    try:
        return TrainConfig(**kwargs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_fit(args):
    from .analysis import nll_report
    from .dataset import dump_dataset, infer_encodings
    from .network import save_network
    from .pipeline import fit_from_files, phase

    config = _train_config(args)
    selector = args.selector
    if selector and selector.lstrip().startswith("{"):
        selector = json.loads(selector)
    network, prep = fit_from_files(args.structure, args.trace, config, selector,
                                   args.include_invocations, args.workers)
    with phase("persist"):
        save_network(network, args.out)
        if args.dump_datasets:
            for sym, ds in sorted(prep.datasets.items()):
                node = network.nodes.get(sym)
                enc = node.encodings if node is not None and node.encodings is not None else None
                if enc is None and ds.row_count:
                    try:
                        enc = infer_encodings(ds)
                    except PSMError:
                        enc = None
                dump_dataset(ds, enc, args.dump_datasets)
    fitted = network.fitted_nodes()
    for node in network.nodes.values():
        if not node.fitted:
            log.info("node %s not fitted: %s", node.name, node.reason or node.state.value)
    if not fitted:
        print("no node could be fitted", file=sys.stderr)
        return EXIT_DATA
    with phase("report"):
        report = nll_report(network)
        report.to_csv(Path(args.out) / "report.csv")
    print(report.to_text())
    return EXIT_OK


def _load(args, directory=None):
    from .network import load_network
    from .structure import load_structure

    expected = None
    if getattr(args, "structure", None):
        expected = load_structure(args.structure).digest()
    return load_network(directory or args.network, expected, getattr(args, "force", False))


def _output(args):
    if args.out in (None, "-"):
        return sys.stdout, False
    return open(args.out, "w", newline="", encoding="utf-8"), True


def _read_rows(path, node_symbol, split=None):
    """Rows for one node from a wide CSV (``caller`` plus columns) or a long ground-truth CSV."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        records = list(reader)
    if {"node", "inv", "column", "value"} <= set(header):
        rows = {}
        for rec in records:
            if int(rec["node"]) != node_symbol:
                continue
            row = rows.setdefault(int(rec["inv"]), {"caller": rec["caller"]})
            row[rec["column"]] = rec["value"]
        return [rows[k] for k in sorted(rows)]
    if split is not None and "split" in header:
        records = [r for r in records if r["split"] == split]
    return records


def _typed_rows(node, rows):
    from .structure import DataType

    out = []
    for r in rows:
        typed = {}
        for cid in node.encodings.column_ids:
            if cid not in r:
                continue
            v = r[cid]
            typed[cid] = v if node.encodings[cid].data_type is DataType.TEXT else float(v)
        if "caller" in r and r["caller"] not in ("", None):
            typed["caller"] = int(r["caller"])
        out.append(typed)
    return out


def cmd_infer(args):
    from .network import (
        Condition,
        propagate_forward,
        reason_backward,
        sample_node,
        node_log_likelihood,
    )

    modes = [m for m in ("sample", "logp", "propagate", "backward") if getattr(args, m) not in (None, False)]
    if len(modes) != 1:
        raise UsageError("choose exactly one of --sample, --logp, --propagate, --backward")
    if not args.node and not args.propagate:
        raise UsageError(f"--{modes[0]} needs --node")
    network = _load(args)
    try:
        condition = Condition.parse(args.condition)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    samples_by_label = {}
    fh, close = _output(args)
    try:
        if args.logp:
            node = network[network.resolve(args.node)]
            rows = _typed_rows(node, _read_rows(args.logp, node.symbol, args.split))
            ll = node_log_likelihood(network, node.symbol, rows)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["row", "logp"])
            for i, v in enumerate(ll):
                w.writerow([i, repr(float(v))])
            print(f"mean NLL {-float(np.mean(ll)):.6f} over {len(ll)} rows", file=sys.stderr)
            return EXIT_OK
        if args.sample is not None:
            out = sample_node(network, args.node, condition, args.sample, args.seed)
            samples_by_label["sample"] = out
        elif args.propagate:
            path = _path_list(args.propagate)
            result = propagate_forward(network, path, condition, args.n, args.seed, args.method)
            out = result[network.resolve(path[-1])]
            samples_by_label = {"propagated": out}
        else:
            if not condition.assignments:
                raise UsageError("--backward needs the observation as --condition col=value")
            out = reason_backward(network, args.node, condition, args.n, args.seed, args.upstream)
            samples_by_label = {"backward": out}
        out.to_csv(fh)
    finally:
        if close:
            fh.close()
    if args.plots:
        from .analysis import plot_columns

        node = network[out.node]
        background = sample_node(network, node.symbol, None, len(out) or 1000, args.seed + 1)
        for p in plot_columns(samples_by_label, node, args.plots, background):
            print(p, file=sys.stderr)
    return EXIT_OK


def cmd_check(args):
    from .analysis import anomaly_check

    network = _load(args)
    node = network[network.resolve(args.node)]
    rows = _typed_rows(node, _read_rows(args.rows, node.symbol, args.split))
    verdicts = anomaly_check(network, node.symbol, rows, args.threshold)
    fh, close = _output(args)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "logp", "trainingQuantile", "flagged"])
        for i, v in enumerate(verdicts):
            w.writerow([i, repr(v.log_likelihood), repr(v.training_quantile), int(v.flagged)])
    finally:
        if close:
            fh.close()
    flagged = sum(v.flagged for v in verdicts)
    print(f"{flagged} of {len(verdicts)} rows below the {args.threshold:g} training quantile", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args):
    from .analysis import Verdict, semantic_compare

    null = _load(args, args.null)
    alt = _load(args, args.alt)
    if args.node:
        targets = [null.resolve(n) for n in args.node]
    else:
        alt_fitted = {n.symbol for n in alt.fitted_nodes()}
        targets = [n.symbol for n in null.fitted_nodes() if n.symbol in alt_fitted]
    if not targets:
        raise UsageError("no node is fitted in both networks")
    incompatible = False
    fh, close = _output(args)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["node", "column", "D", "p", "reject", "verdict"])
        for sym in targets:
            rep = semantic_compare(null, alt, sym, args.n, args.alpha, args.seed, args.seed_alt)
            incompatible |= rep.verdict is Verdict.INCOMPATIBLE
            for r in rep.results:
                w.writerow([sym, r.column_id, repr(r.statistic), repr(r.p_value), int(r.reject), rep.verdict.value])
            print(rep.to_text(), file=sys.stderr)
    finally:
        if close:
            fh.close()
    return EXIT_DATA if incompatible else EXIT_OK


def cmd_simulate(args):
    from .analysis import simulate_roundtrips
    from .network import Condition

    network = _load(args)
    report = simulate_roundtrips(network, _path_list(args.path), Condition.parse(args.condition),
                                 args.k, args.n, args.seed, args.method)
    fh, close = _output(args)
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "hops", "column", "D", "p", "meanDrift", "stdDrift"])
        hops_per_round = 2 * (len(report.path) - 1)
        for r in report.rounds:
            for cid, ks in r.ks.items():
                w.writerow([r.index, r.index * hops_per_round, cid, repr(ks.statistic), repr(ks.p_value),
                            repr(r.mean_drift[cid]), repr(r.std_drift[cid])])
    finally:
        if close:
            fh.close()
    print(report.to_text(), file=sys.stderr)
    if args.plots:
        from .analysis import plot_columns

        node = network[report.path[-1]]
        for p in plot_columns({"after": report.terminal}, node, args.plots, report.reference):
            print(p, file=sys.stderr)
    return EXIT_OK


def cmd_report(args):
    from .analysis import nll_report

    report = nll_report(_load(args))
    if args.out not in (None, "-"):
        report.to_csv(args.out)
    print(report.to_text())
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser():
    from .flow import TrainConfig

    defaults = TrainConfig()
    p = _Parser(prog="psm", description="Probabilistic models of program behavior from execution traces.")
    p.add_argument("--config", help="TOML or JSON file with default flag values")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    d = sub.add_parser("demo", help="generate the Nutrition Advisor demo inputs")
    d.add_argument("--n", type=_positive_int, default=1000, help="requests to run")
    d.add_argument("--variant", choices=("metric", "imperial-bug"), default="metric")
    d.add_argument("--out", default="demo")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_demo)

    f = sub.add_parser("fit", help="fit one flow per executable and save the network")
    f.add_argument("--structure")
    f.add_argument("--trace")
    f.add_argument("--out", help="network directory")
    f.add_argument("--selector", help="namespace prefix or JSON selector")
    f.add_argument("--include-invocations", action="store_true")
    f.add_argument("--capacity", choices=("low", "high"), default=defaults.capacity)
    f.add_argument("--seed", type=int, default=defaults.seed)
    f.add_argument("--learning-rate", type=float, default=defaults.learning_rate)
    f.add_argument("--weight-decay", type=float, default=defaults.weight_decay)
    f.add_argument("--max-epoch", type=_positive_int, default=defaults.max_epoch)
    f.add_argument("--patience", type=_positive_int, default=defaults.patience)
    f.add_argument("--dequantization", type=float, default=defaults.dequantization)
    f.add_argument("--workers", type=_positive_int, default=1)
    f.add_argument("--dump-datasets", metavar="DIR", help="also write raw per-node datasets here")
    f.set_defaults(func=cmd_fit)

    def network_args(sp, positional=True):
        if positional:
            sp.add_argument("network", help="network directory")
        sp.add_argument("--structure", help="refuse the network unless it was built from this structure")
        sp.add_argument("--force", action="store_true", help="load despite a structure digest mismatch")
        sp.add_argument("--out", help="output CSV (default stdout)")

    i = sub.add_parser("infer", help="sample, score, condition or propagate")
    network_args(i)
    i.add_argument("--node", help="node name or symbol")
    i.add_argument("--sample", type=_nonneg_int, metavar="N")
    i.add_argument("--logp", metavar="CSV")
    i.add_argument("--propagate", metavar="PATH", help="comma-separated node path")
    i.add_argument("--backward", action="store_true", help="explain --condition at --node from upstream")
    i.add_argument("--upstream", help="upstream node for --backward")
    i.add_argument("--condition", action="append", default=[], metavar="COL=VALUE")
    i.add_argument("--split", choices=("train", "test"), help="row filter for dumped datasets")
    i.add_argument("--n", type=_positive_int, default=1000)
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--method", choices=("knn", "band"), default="knn")
    i.add_argument("--plots", metavar="DIR", help="write SVG histograms (needs matplotlib)")
    i.set_defaults(func=cmd_infer)

    c = sub.add_parser("check", help="flag rows that are unlikely under a node")
    network_args(c)
    c.add_argument("--node")
    c.add_argument("--rows", metavar="CSV")
    c.add_argument("--split", choices=("train", "test"))
    c.add_argument("--threshold", type=float, default=0.1)
    c.set_defaults(func=cmd_check)

    m = sub.add_parser("compare", help="two-sample tests between networks; non-zero exit if incompatible")
    m.add_argument("null")
    m.add_argument("alt")
    network_args(m, positional=False)
    m.add_argument("--node", action="append", help="node to compare (default: all shared fitted nodes)")
    m.add_argument("--n", type=_positive_int, default=1000)
    m.add_argument("--alpha", type=float, default=0.01)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--seed-alt", type=int)
    m.set_defaults(func=cmd_compare)

    s = sub.add_parser("simulate", help="round trips along a path")
    network_args(s)
    s.add_argument("--path")
    s.add_argument("--k", type=_positive_int, default=10)
    s.add_argument("--n", type=_positive_int, default=1000)
    s.add_argument("--condition", action="append", default=[], metavar="COL=VALUE")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--method", choices=("knn", "band"), default="knn")
    s.add_argument("--plots", metavar="DIR")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("report", help="NLL summary of a saved network")
    network_args(r)
    r.set_defaults(func=cmd_report)
    return p


REQUIRED = {"fit": ("structure", "trace", "out"), "check": ("node", "rows"), "simulate": ("path",)}


def parse_args(argv):
    """Parse flags; values from ``--config`` act as defaults that flags override."""
    argv = list(argv)
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        try:
            values = _read_config(known.config)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from exc
        subparsers = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        command = next((t for t in argv if t in subparsers.choices), None)
        if command is None:
            raise UsageError("a subcommand is required")
        sub = subparsers.choices[command]
        allowed = {a.dest for a in sub._actions} - {"help"}
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise UsageError(f"unknown config keys {unknown}")
        sub.set_defaults(**values)
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        raise UsageError("a subcommand is required (demo, fit, infer, check, compare, simulate, report)")
    missing = [f"--{k.replace('_', '-')}" for k in REQUIRED.get(args.command, ()) if getattr(args, k) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing {', '.join(missing)}")
    return args


def _exit_code(exc):
    if isinstance(exc, (DivergenceError, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, FlowError) and "non-finite" in str(exc):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None):
    logging.basicConfig(level=os.environ.get("PSM_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    tune_allocator()
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except PipelineError as exc:
        print(f"error [{exc.phase}]: {exc.cause}", file=sys.stderr)
        return _exit_code(exc.cause)
    except (PSMError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
