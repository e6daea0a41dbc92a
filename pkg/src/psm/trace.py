"""Runtime trace ingestion: JSON-lines events, invocation correlation, activity metrics.

One event per line::

    {"seq": 12, "kind": "enter", "elem": 7, "caller": 3, "inv": 41,
     "values": {"height": 168.59, "weight": 69.54}}

``enter`` values are keyed by parameter simple name, ``exit`` carries the
return value under ``ret``, ``read``/``write`` carry exactly one value (key is
free-form, conventionally the property's simple name).
"""

from __future__ import annotations

import itertools
import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .errors import TraceError, TraceWarning
from .structure import Kind, executable_columns

KINDS = ("enter", "exit", "read", "write")


@dataclass(frozen=True, slots=True)
class TraceEvent:
    seq: int
    kind: str
    elem: int
    caller: int
    inv: int
    values: dict = field(default_factory=dict)


def _scalar_ok(v):
    if isinstance(v, bool):
        return False
    if isinstance(v, (int, float, str)):
        return True
    if isinstance(v, list):
        return all(_scalar_ok(x) and not isinstance(x, list) for x in v)
    return False


def parse_event(line, lineno=0):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TraceError(f"line {lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise TraceError(f"line {lineno}: event must be an object")
    try:
        seq, kind, elem = obj["seq"], obj["kind"], obj["elem"]
        caller, inv = obj.get("caller", -1), obj.get("inv", -1)
        values = obj.get("values", {}) or {}
    except KeyError as exc:
        raise TraceError(f"line {lineno}: missing field {exc}") from None
    if kind not in KINDS:
        raise TraceError(f"line {lineno}: unknown event kind {kind!r}")
    for name, v in (("seq", seq), ("elem", elem), ("caller", caller), ("inv", inv)):
        if not isinstance(v, int) or isinstance(v, bool):
            raise TraceError(f"line {lineno}: field {name} must be an integer")
    if seq < 0:
        raise TraceError(f"line {lineno}: negative seq {seq}")
    if not isinstance(values, dict) or not all(_scalar_ok(v) for v in values.values()):
        raise TraceError(f"line {lineno}: values must map names to numbers, text, or lists of them")
    if kind in ("read", "write") and len(values) != 1:
        raise TraceError(f"line {lineno}: {kind} event must carry exactly one value")
    return TraceEvent(seq, kind, elem, caller, inv, values)


def read_trace(path):
    """Yield events in file order; raises on a seq that does not increase."""
    prev = None
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            ev = parse_event(line, lineno)
            if prev is not None and ev.seq <= prev:
                raise TraceError(f"line {lineno}: seq {ev.seq} does not follow {prev}")
            prev = ev.seq
            yield ev


def write_trace(events, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(
                json.dumps(
                    {
                        "seq": ev.seq,
                        "kind": ev.kind,
                        "elem": ev.elem,
                        "caller": ev.caller,
                        "inv": ev.inv,
                        "values": ev.values,
                    },
                    separators=(",", ":"),
                )
            )
            fh.write("\n")


# -- correlation -------------------------------------------------------------


@dataclass(frozen=True)
class InvocationRecord:
    node: int
    inv: int
    caller: int
    row: dict


@dataclass(frozen=True)
class _Columns:
    params: dict
    pa: dict
    access: dict
    ret: str | None
    modes: set
    has_inv: bool


class _ColumnIndex:
    """Maps trace value keys to feature column ids, per executable."""

    def __init__(self, graph, include_invocations):
        self.graph = graph
        self.include_invocations = include_invocations
        self._cache = {}

    def __call__(self, exe):
        hit = self._cache.get(exe)
        if hit is None:
            cols = executable_columns(self.graph, exe, self.include_invocations)
            params = {p.simple_name: p for p in self.graph.params_of(exe)}
            pa = {c.source_symbol: c.id for c in cols if c.role.value == "Pa"}
            access = {(c.role.value, c.source_symbol): c.id for c in cols if c.role.value in ("R", "W")}
            ret = next((c.id for c in cols if c.role.value == "Ret"), None)
            modes = {(p, m) for e, p, m in self.graph.access_edges if e == exe}
            has_inv = any(c.role.value == "Inv" for c in cols)
            hit = self._cache[exe] = _Columns(params, pa, access, ret, modes, has_inv)
        return hit


@dataclass
class _Frame:
    node: int
    inv: int
    caller: int
    cells: dict


def _flatten(v):
    return list(v) if isinstance(v, list) else [v]


def _explode(frame):
    keys = sorted(frame.cells)
    lists = [frame.cells[k] for k in keys]
    for combo in itertools.product(*lists):
        yield InvocationRecord(frame.node, frame.inv, frame.caller, dict(zip(keys, combo)))


def correlate_invocations(events, graph, include_invocations=False):
    """Fold an event stream into one record per completed invocation.

    Accesses go to the innermost open invocation whose executable has a
    matching access edge. Multi-valued cells (lists, or repeated accesses) are
    exploded: the row is duplicated once per combination of values.
    """
    index = _ColumnIndex(graph, include_invocations)
    stack: list[_Frame] = []
    records = []
    for ev in events:
        if ev.kind == "enter":
            elem = graph.elements.get(ev.elem)
            if elem is None or elem.kind is not Kind.EXECUTABLE:
                warnings.warn(f"seq {ev.seq}: enter of unknown executable {ev.elem}", TraceWarning, stacklevel=2)
                continue
            cols = index(ev.elem)
            params, pa = cols.params, cols.pa
            frame = _Frame(ev.elem, ev.inv, ev.caller, defaultdict(list))
            for key, v in ev.values.items():
                p = params.get(key)
                if p is None:
                    warnings.warn(f"seq {ev.seq}: {elem.name} has no parameter {key!r}; value dropped", TraceWarning, stacklevel=2)
                elif p.symbol in pa:
                    frame.cells[pa[p.symbol]].extend(_num(v, p.data_type.value) for v in _flatten(v))
            if include_invocations and stack and index(stack[-1].node).has_inv:
                stack[-1].cells["inv"].append(str(ev.elem))
            stack.append(frame)
        elif ev.kind == "exit":
            pos = next((i for i in range(len(stack) - 1, -1, -1) if stack[i].inv == ev.inv), None)
            if pos is None:
                warnings.warn(f"seq {ev.seq}: exit of inv {ev.inv} without matching enter", TraceWarning, stacklevel=2)
                continue
            for dangling in stack[pos + 1 :]:
                warnings.warn(f"dangling invocation {dangling.inv} of {dangling.node} dropped", TraceWarning, stacklevel=2)
            frame = stack[pos]
            del stack[pos:]
            if frame.node != ev.elem:
                warnings.warn(f"seq {ev.seq}: exit elem {ev.elem} does not match enter elem {frame.node}", TraceWarning, stacklevel=2)
            ret = index(frame.node).ret
            for key, v in ev.values.items():
                if key != "ret":
                    warnings.warn(f"seq {ev.seq}: exit value {key!r} is not 'ret'; dropped", TraceWarning, stacklevel=2)
                elif ret is not None:
                    frame.cells[ret].extend(_num(x, graph[frame.node].data_type.value) for x in _flatten(v))
            records.extend(_explode(frame))
        else:
            mode = "R" if ev.kind == "read" else "W"
            prop = graph.elements.get(ev.elem)
            if prop is None or prop.kind is not Kind.PROPERTY:
                warnings.warn(f"seq {ev.seq}: access of unknown property {ev.elem}", TraceWarning, stacklevel=2)
                continue
            for frame in reversed(stack):
                cols = index(frame.node)
                if (ev.elem, mode) in cols.modes:
                    cid = cols.access.get((mode, ev.elem))
                    if cid is not None:
                        (v,) = ev.values.values()
                        frame.cells[cid].extend(_num(x, prop.data_type.value) for x in _flatten(v))
                    break
            else:
                warnings.warn(f"seq {ev.seq}: {ev.kind} of {prop.name} outside any accessing invocation", TraceWarning, stacklevel=2)
    for dangling in stack:
        warnings.warn(f"dangling invocation {dangling.inv} of {dangling.node} dropped", TraceWarning, stacklevel=2)
    return records


def _num(v, dtype):
    if dtype == "Number" and not isinstance(v, str):
        return float(v)
    if dtype == "Text":
        return str(v)
    return v


# -- activity metrics --------------------------------------------------------


@dataclass(frozen=True)
class ActivityMetrics:
    per_element: dict  # symbol -> (event_count, distinct_value_count)
    ece1: int
    ece10: int
    dce1: int
    dce10: int

    @property
    def total_events(self):
        return sum(c for c, _ in self.per_element.values())

    def restricted(self, symbols):
        """Metrics recomputed over a subset of elements (e.g. data-typed ones)."""
        return _summarize({s: v for s, v in self.per_element.items() if s in symbols})


def _summarize(per):
    return ActivityMetrics(
        dict(per),
        sum(1 for c, _ in per.values() if c >= 1),
        sum(1 for c, _ in per.values() if c >= 10),
        sum(1 for _, d in per.values() if d >= 1),
        sum(1 for _, d in per.values() if d >= 10),
    )


def _distinct_key(v):
    return ("t", v) if isinstance(v, str) else ("n", float(v))


def attribute_values(ev, graph):
    """(element symbol, scalar) pairs emitted by one event.

    Parameters own their enter values, executables their return value,
    properties their accessed value. Unresolvable keys are skipped.
    """
    out = []
    if ev.kind == "enter":
        params = {p.simple_name: p.symbol for p in graph.params_of(ev.elem)}
        for key, v in ev.values.items():
            if key in params:
                out.extend((params[key], x) for x in _flatten(v))
    elif ev.kind == "exit":
        if "ret" in ev.values:
            out.extend((ev.elem, x) for x in _flatten(ev.values["ret"]))
    else:
        for v in ev.values.values():
            out.extend((ev.elem, x) for x in _flatten(v))
    return out


def compute_activity_metrics(events, universe, graph):
    """Events and distinct values per code element, with the >=1 / >=10 tallies."""
    counts = defaultdict(int)
    distinct = defaultdict(set)
    param_cache = {}
    for ev in events:
        if ev.kind == "enter":
            params = param_cache.get(ev.elem)
            if params is None:
                params = param_cache[ev.elem] = {p.simple_name: p.symbol for p in graph.params_of(ev.elem)}
            pairs = ((params[k], v) for k, v in ev.values.items() if k in params)
        elif ev.kind == "exit":
            pairs = ((ev.elem, v) for k, v in ev.values.items() if k == "ret")
        else:
            pairs = ((ev.elem, v) for v in ev.values.values())
        for sym, v in pairs:
            if sym not in universe:
                continue
            for x in _flatten(v):
                counts[sym] += 1
                distinct[sym].add(_distinct_key(x))
    return _summarize({s: (counts[s], len(distinct[s])) for s in counts})
