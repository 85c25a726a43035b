"""Datapath/controller design model (Glushkov decomposition).

A design is a datapath graph of functional units, registers, multiplexers and
constants wired by named nets, plus a controller FSM that issues one control
word per state.  Designs are immutable; every transformation pass returns a
new instance.

The on-disk format is JSON (``ir_version`` 1); see ``design.schema.json``
next to this module for the formal schema.
"""

from __future__ import annotations

import graphlib
import itertools
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from typing import Any, Iterable, Mapping, Sequence

import jsonschema

IR_VERSION = 1
MAX_WIDTH = 64

FU_OPS = {
    "add": 2, "sub": 2, "mul": 2, "and": 2, "or": 2, "xor": 2, "xnor": 2,
    "not": 1, "pass": 1,
}
COMB_KINDS = {"fu", "mux", "const", "key", "mask", "checker"}
DEFAULT_MUX_DELAY_NS = 0.5
DEFAULT_CHECKER_DELAY_NS = 0.5

# dp_comp encoding driven by the checker FSM
DP_OK, DP_PARTIAL, DP_FULL = 0, 1, 2


class DesignError(ValueError):
    """Semantic problem with a design; carries the violation list."""

    def __init__(self, message: str, violations: Sequence["Violation"] = ()):
        super().__init__(message)
        self.violations = list(violations)


class DesignSyntaxError(DesignError):
    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(message + where)
        self.line = line
        self.column = column


@dataclass(frozen=True)
class Port:
    name: str
    width: int
    net: str


@dataclass(frozen=True)
class Net:
    id: str
    width: int


@dataclass(frozen=True)
class Node:
    id: str
    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    @property
    def out(self) -> str | None:
        return self.params.get("out")

    @property
    def role(self) -> str | None:
        return self.params.get("role")

    @property
    def inputs(self) -> list[str]:
        """Nets read by this node (data inputs first, then select)."""
        p = self.params
        if self.kind == "fu":
            return list(p["in"])
        if self.kind == "mux":
            ins = list(p["in"])
            if p.get("sel"):
                ins.append(p["sel"])
            return ins
        if self.kind == "reg":
            return [p["in"]]
        if self.kind == "checker":
            return list(p["comparators"]) + list(p["edu"])
        return []

    @property
    def delay(self) -> float:
        if self.kind == "fu":
            return float(self.params["delay_ns"])
        if self.kind == "mux":
            return float(self.params.get("delay_ns", DEFAULT_MUX_DELAY_NS))
        if self.kind == "checker":
            return float(self.params.get("delay_ns", DEFAULT_CHECKER_DELAY_NS))
        return 0.0

    def with_params(self, **changes: Any) -> "Node":
        params = dict(self.params)
        params.update(changes)
        return Node(self.id, self.kind, params)


@dataclass(frozen=True)
class Transition:
    src: str
    dst: str
    when: tuple[tuple[str, int], ...] = ()

    def matches(self, values: Mapping[str, int]) -> bool:
        return all(values[name] == v for name, v in self.when)


@dataclass(frozen=True)
class ControllerFsm:
    states: tuple[str, ...]
    reset: str
    transitions: tuple[Transition, ...]
    control_words: Mapping[str, Mapping[str, int]]

    def successors(self, state: str) -> list[Transition]:
        return [t for t in self.transitions if t.src == state]


@dataclass(frozen=True)
class DatapathGraph:
    nodes: tuple[Node, ...]
    nets: tuple[Net, ...]


@dataclass(frozen=True)
class Design:
    name: str
    clock_period_ns: float
    inputs: tuple[Port, ...]
    outputs: tuple[Port, ...]
    datapath: DatapathGraph
    controller: ControllerFsm
    key_width: int = 0
    dlockout: Mapping[str, Any] | None = None

    @cached_property
    def node_map(self) -> dict[str, Node]:
        return {n.id: n for n in self.datapath.nodes}

    @cached_property
    def net_map(self) -> dict[str, Net]:
        return {n.id: n for n in self.datapath.nets}

    @cached_property
    def drivers(self) -> dict[str, list[str]]:
        """net id -> list of drivers (node ids, or ``port:<name>``)."""
        drv: dict[str, list[str]] = {}
        for p in self.inputs:
            drv.setdefault(p.net, []).append(f"port:{p.name}")
        for n in self.datapath.nodes:
            if n.out is not None:
                drv.setdefault(n.out, []).append(n.id)
        return drv

    @cached_property
    def sinks(self) -> dict[str, list[str]]:
        snk: dict[str, list[str]] = {}
        for n in self.datapath.nodes:
            for net in n.inputs:
                snk.setdefault(net, []).append(n.id)
        return snk

    def driver_node(self, net: str) -> Node | None:
        drv = self.drivers.get(net, [])
        if len(drv) == 1 and not drv[0].startswith("port:"):
            return self.node_map[drv[0]]
        return None

    def nodes_by_role(self, role: str) -> list[Node]:
        return [n for n in self.datapath.nodes if n.role == role]

    @property
    def hardened(self) -> bool:
        return self.dlockout is not None


@dataclass(frozen=True)
class Violation:
    kind: str
    message: str
    subjects: tuple[str, ...] = ()


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    def __bool__(self) -> bool:  # truthy when there is something to report
        return bool(self.violations)

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def of_kind(self, kind: str) -> list[Violation]:
        return [v for v in self.violations if v.kind == kind]


@dataclass(frozen=True)
class SlackMap:
    clock_period_ns: float
    arrival: Mapping[str, float]
    tail: Mapping[str, float]

    def __getitem__(self, net: str) -> float:
        return self.clock_period_ns - self.path_through(net)

    def path_through(self, net: str) -> float:
        return self.arrival[net] + self.tail[net]

    @property
    def critical_path_ns(self) -> float:
        return max((self.path_through(n) for n in self.arrival), default=0.0)

    def items(self):
        return ((n, self[n]) for n in self.arrival)


# ---------------------------------------------------------------------------
# (de)serialization


def _schema() -> dict:
    text = resources.files("dlockout").joinpath("design.schema.json").read_text()
    return json.loads(text)


_SCHEMA_VALIDATOR = None


def _validator():
    global _SCHEMA_VALIDATOR
    if _SCHEMA_VALIDATOR is None:
        _SCHEMA_VALIDATOR = jsonschema.Draft202012Validator(_schema())
    return _SCHEMA_VALIDATOR


def design_to_dict(d: Design) -> dict:
    cw = {s: dict(sorted(words.items())) for s, words in d.controller.control_words.items()}
    out: dict[str, Any] = {
        "ir_version": IR_VERSION,
        "name": d.name,
        "clock_period_ns": d.clock_period_ns,
        "key_width": d.key_width,
        "inputs": [{"name": p.name, "width": p.width, "net": p.net} for p in d.inputs],
        "outputs": [{"name": p.name, "width": p.width, "net": p.net} for p in d.outputs],
        "nodes": [{"id": n.id, "kind": n.kind, "params": _plain(n.params)} for n in d.datapath.nodes],
        "nets": [{"id": n.id, "width": n.width} for n in d.datapath.nets],
        "controller": {
            "states": list(d.controller.states),
            "reset": d.controller.reset,
            "transitions": [
                {"from": t.src, "to": t.dst, "when": dict(t.when)} for t in d.controller.transitions
            ],
            "control_words": {s: cw[s] for s in d.controller.states if s in cw},
        },
    }
    if d.dlockout is not None:
        out["dlockout"] = dict(d.dlockout)
    return out


def _plain(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {k: _plain(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def design_from_dict(data: Mapping[str, Any]) -> Design:
    """Build a Design from an already-decoded document (no semantic checks)."""
    errors = sorted(_validator().iter_errors(data), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise DesignSyntaxError(f"schema error at {path}: {e.message}")
    ctrl = data["controller"]
    controller = ControllerFsm(
        states=tuple(ctrl["states"]),
        reset=ctrl["reset"],
        transitions=tuple(
            Transition(t["from"], t["to"], tuple(sorted(t.get("when", {}).items())))
            for t in ctrl["transitions"]
        ),
        control_words={s: dict(w) for s, w in ctrl["control_words"].items()},
    )
    return Design(
        name=data["name"],
        clock_period_ns=float(data["clock_period_ns"]),
        inputs=tuple(Port(**p) for p in data["inputs"]),
        outputs=tuple(Port(**p) for p in data["outputs"]),
        datapath=DatapathGraph(
            nodes=tuple(Node(n["id"], n["kind"], dict(n["params"])) for n in data["nodes"]),
            nets=tuple(Net(n["id"], n["width"]) for n in data["nets"]),
        ),
        controller=controller,
        key_width=int(data.get("key_width", 0)),
        dlockout=dict(data["dlockout"]) if data.get("dlockout") is not None else None,
    )


def serialize_design(d: Design) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(design_to_dict(d), indent=2, sort_keys=True) + "\n"


def parse_design(text: str) -> Design:
    """Parse and validate a serialized design.

    Raises DesignSyntaxError for malformed JSON or schema mismatches and
    DesignError (with the violation list) when an invariant is broken.
    """
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DesignSyntaxError(f"invalid JSON: {exc.msg}", exc.lineno, exc.colno) from None
    if not isinstance(data, dict):
        raise DesignSyntaxError("top-level value must be an object")
    d = design_from_dict(data)
    report = validate_design(d)
    if report:
        first = report.violations[0]
        raise DesignError(f"{first.kind}: {first.message}", report.violations)
    return d


# ---------------------------------------------------------------------------
# validation


def _comb_order(d: Design) -> list[str]:
    """Topological order of combinational nodes; raises graphlib.CycleError."""
    ts: graphlib.TopologicalSorter = graphlib.TopologicalSorter()
    for n in d.datapath.nodes:
        if n.kind not in COMB_KINDS:
            continue
        preds = []
        for net in n.inputs:
            drv = d.driver_node(net)
            if drv is not None and drv.kind in COMB_KINDS:
                preds.append(drv.id)
        ts.add(n.id, *preds)
    return list(ts.static_order())


def comb_order(d: Design) -> list[Node]:
    try:
        return [d.node_map[i] for i in _comb_order(d)]
    except graphlib.CycleError as exc:
        raise DesignError("combinational cycle", [_cycle_violation(d, exc)]) from None


def _cycle_violation(d: Design, exc: graphlib.CycleError) -> Violation:
    cycle_nodes = exc.args[1]
    nets = []
    for nid in cycle_nodes[:-1]:
        out = d.node_map[nid].out
        if out is not None and out not in nets:
            nets.append(out)
    return Violation("cycle", "combinational cycle through nets " + " -> ".join(nets), tuple(nets))


def validate_design(d: Design) -> ValidationReport:
    v: list[Violation] = []
    v += _check_ids(d)
    v += _check_drivers(d)
    v += _check_ports(d)
    v += _check_widths(d)
    cyclic = False
    try:
        _comb_order(d)
    except graphlib.CycleError as exc:
        cyclic = True
        v.append(_cycle_violation(d, exc))
    if not cyclic and not any(x.kind in ("undeclared-net", "dangling-net") for x in v):
        v += _check_timing(d)
    v += _check_controller(d)
    v += _check_key(d)
    v += _check_dlockout(d)
    return ValidationReport(tuple(v))


def _dupes(items: Iterable[str]) -> list[str]:
    seen, dup = set(), []
    for i in items:
        if i in seen and i not in dup:
            dup.append(i)
        seen.add(i)
    return dup


def _check_ids(d: Design) -> list[Violation]:
    v = []
    for i in _dupes(n.id for n in d.datapath.nodes):
        v.append(Violation("duplicate-id", f"node id {i!r} declared more than once", (i,)))
    for i in _dupes(n.id for n in d.datapath.nets):
        v.append(Violation("duplicate-id", f"net id {i!r} declared more than once", (i,)))
    for i in _dupes([p.name for p in d.inputs] + [p.name for p in d.outputs]):
        v.append(Violation("duplicate-id", f"port {i!r} declared more than once", (i,)))
    return v


def _check_drivers(d: Design) -> list[Violation]:
    v = []
    declared = d.net_map
    referenced = set(d.drivers) | set(d.sinks) | {p.net for p in d.outputs}
    for net in sorted(referenced - set(declared)):
        v.append(Violation("undeclared-net", f"net {net!r} is used but not declared", (net,)))
    for net in declared:
        drv = d.drivers.get(net, [])
        if len(drv) > 1:
            v.append(Violation("multiple-drivers", f"net {net!r} has multiple drivers: {', '.join(drv)}", (net, *drv)))
        elif not drv:
            v.append(Violation("dangling-net", f"net {net!r} has no driver", (net,)))
    return v


def _check_ports(d: Design) -> list[Violation]:
    v = []
    for p in d.inputs + d.outputs:
        net = d.net_map.get(p.net)
        if net is not None and net.width != p.width:
            v.append(Violation("width", f"port {p.name!r} width {p.width} != net {p.net!r} width {net.width}", (p.name, p.net)))
    return v


def _w(d: Design, net: str) -> int | None:
    n = d.net_map.get(net)
    return n.width if n else None


def _check_widths(d: Design) -> list[Violation]:
    v = []

    def bad(node: Node, msg: str):
        v.append(Violation("width", f"node {node.id!r}: {msg}", (node.id,)))

    for n in d.datapath.nodes:
        p = n.params
        out_w = _w(d, n.out) if n.out else None
        if n.kind == "fu":
            arity = FU_OPS[p["op"]]
            if len(p["in"]) != arity:
                bad(n, f"op {p['op']} takes {arity} operand(s), got {len(p['in'])}")
            for net in p["in"]:
                if _w(d, net) is not None and out_w is not None and _w(d, net) != out_w:
                    bad(n, f"operand {net!r} width {_w(d, net)} != output width {out_w}")
        elif n.kind == "mux":
            for net in p["in"]:
                if _w(d, net) is not None and out_w is not None and _w(d, net) != out_w:
                    bad(n, f"input {net!r} width {_w(d, net)} != output width {out_w}")
            sel = p.get("sel")
            if sel and _w(d, sel) is not None and (1 << _w(d, sel)) < len(p["in"]):
                bad(n, f"select {sel!r} too narrow for {len(p['in'])} inputs")
        elif n.kind == "reg":
            if _w(d, p["in"]) is not None and out_w is not None and _w(d, p["in"]) != out_w:
                bad(n, "register input/output widths differ")
        elif n.kind == "const":
            if out_w is not None and p["value"] >= (1 << out_w):
                bad(n, f"constant {p['value']} does not fit in {out_w} bits")
        elif n.kind in ("key", "mask"):
            if out_w is not None and out_w != 1:
                bad(n, "key/mask cells drive 1-bit nets")
        elif n.kind == "checker":
            for net in list(p["comparators"]) + list(p["edu"]):
                if _w(d, net) not in (None, 1):
                    bad(n, f"comparator/EDU net {net!r} must be 1 bit")
            if out_w is not None and out_w != 2:
                bad(n, "dp_comp must be 2 bits wide")
    return v


def _timing(d: Design) -> tuple[dict[str, float], dict[str, float], dict[str, str], dict[str, str]]:
    """Longest arrival and longest remaining path per net, plus backpointers."""
    order = [d.node_map[i] for i in _comb_order(d)]
    arrival = {n.id: 0.0 for n in d.datapath.nets}
    back: dict[str, str] = {}
    for node in order:
        if node.out is None:
            continue
        best, arg = 0.0, None
        for net in node.inputs:
            if arrival.get(net, 0.0) >= best:
                best, arg = arrival.get(net, 0.0), net
        arrival[node.out] = best + node.delay
        if arg is not None and node.inputs:
            back[node.out] = arg
    tail = {n.id: 0.0 for n in d.datapath.nets}
    fwd: dict[str, str] = {}
    for node in reversed(order):
        if node.out is None:
            continue
        through = node.delay + tail.get(node.out, 0.0)
        for net in node.inputs:
            if through > tail.get(net, 0.0):
                tail[net] = through
                fwd[net] = node.out
    return arrival, tail, back, fwd


def longest_path(d: Design, slack: SlackMap | None = None) -> list[str]:
    """Nets along one longest register-to-register combinational path."""
    arrival, tail, back, fwd = _timing(d)
    if not arrival:
        return []
    start = max(arrival, key=lambda n: (arrival[n] + tail[n], n))
    path = [start]
    while path[0] in back:
        path.insert(0, back[path[0]])
    while path[-1] in fwd:
        path.append(fwd[path[-1]])
    return path


def _check_timing(d: Design) -> list[Violation]:
    s = compute_slack(d)
    crit = s.critical_path_ns
    if crit > d.clock_period_ns + 1e-9:
        path = longest_path(d)
        return [Violation(
            "timing",
            f"longest combinational path {crit:g} ns exceeds clock period {d.clock_period_ns:g} ns: {' -> '.join(path)}",
            tuple(path),
        )]
    return []


def condition_domain(d: Design, net: str) -> list[int]:
    w = _w(d, net)
    if w is None or w > 2:
        return []
    return list(range(1 << w))


def _check_controller(d: Design) -> list[Violation]:
    v = []
    c = d.controller
    states = set(c.states)
    for s in _dupes(c.states):
        v.append(Violation("controller", f"state {s!r} declared twice", (s,)))
    if c.reset not in states:
        v.append(Violation("controller", f"reset state {c.reset!r} is not a declared state", (c.reset,)))
        return v
    for t in c.transitions:
        for s in (t.src, t.dst):
            if s not in states:
                v.append(Violation("controller", f"transition references unknown state {s!r}", (s,)))
        for net, value in t.when:
            dom = condition_domain(d, net)
            if not dom:
                v.append(Violation("controller", f"condition signal {net!r} must be an existing net of width <= 2", (net,)))
            elif value not in dom:
                v.append(Violation("controller", f"condition value {value} out of range for {net!r}", (net,)))
    if any(x.kind == "controller" for x in v):
        return v
    for s in c.states:
        outs = c.successors(s)
        if not outs:
            v.append(Violation("controller", f"state {s!r} has no outgoing transition", (s,)))
            continue
        signals = sorted({net for t in outs for net, _ in t.when})
        domains = [condition_domain(d, net) for net in signals]
        for combo in itertools.product(*domains):
            values = dict(zip(signals, combo))
            hits = [t for t in outs if t.matches(values)]
            if len(hits) != 1:
                what = "no transition" if not hits else f"{len(hits)} transitions"
                v.append(Violation(
                    "controller",
                    f"state {s!r} is nondeterministic: {what} for {values}",
                    (s,),
                ))
                break
    seen, frontier = {c.reset}, [c.reset]
    while frontier:
        s = frontier.pop()
        for t in c.successors(s):
            if t.dst not in seen:
                seen.add(t.dst)
                frontier.append(t.dst)
    for s in c.states:
        if s not in seen:
            v.append(Violation("controller", f"state {s!r} unreachable from reset", (s,)))
    fields = {}
    for n in d.datapath.nodes:
        if n.kind == "mux" and not n.params.get("sel"):
            fields[n.id] = len(n.params["in"])
        elif n.kind == "reg" and n.params.get("enable"):
            fields[n.id] = 2
    for s, words in c.control_words.items():
        if s not in states:
            v.append(Violation("controller", f"control word for unknown state {s!r}", (s,)))
        for f, value in words.items():
            if f not in fields:
                v.append(Violation("control-word", f"state {s!r} drives unknown field {f!r}", (s, f)))
            elif value >= fields[f]:
                v.append(Violation("control-word", f"state {s!r} drives {f!r} out of range ({value})", (s, f)))
    return v


def _check_key(d: Design) -> list[Violation]:
    idx = sorted(n.params["index"] for n in d.datapath.nodes if n.kind == "key")
    if idx != list(range(d.key_width)):
        return [Violation("key", f"key cells {idx} do not cover key width {d.key_width}", ())]
    return []


def _check_dlockout(d: Design) -> list[Violation]:
    if d.dlockout is None:
        return []
    v = []
    dl = d.dlockout
    chk = d.node_map.get(dl["checker"])
    if chk is None or chk.kind != "checker":
        v.append(Violation("dlockout", f"checker {dl['checker']!r} missing", (dl["checker"],)))
    cnt = d.node_map.get(dl["counter"])
    if cnt is None or cnt.kind != "counter":
        v.append(Violation("dlockout", f"counter {dl['counter']!r} missing", (dl["counter"],)))
    elif cnt.params["threshold"] != dl["threshold"]:
        v.append(Violation("dlockout", "counter threshold disagrees with dlockout block", (dl["counter"],)))
    bh = dl.get("blackhole_state")
    if bh is not None and bh not in d.controller.states:
        v.append(Violation("dlockout", f"blackhole state {bh!r} not in controller", (bh,)))
    if chk is not None and chk.kind == "checker" and chk.params["check_state"] not in d.controller.states:
        v.append(Violation("dlockout", "checker check_state not in controller", (chk.id,)))
    return v


# ---------------------------------------------------------------------------
# timing


def compute_slack(d: Design) -> SlackMap:
    """Per-net slack against the clock period (raises DesignError if cyclic)."""
    try:
        arrival, tail, _, _ = _timing(d)
    except graphlib.CycleError as exc:
        raise DesignError("combinational cycle", [_cycle_violation(d, exc)]) from None
    return SlackMap(d.clock_period_ns, arrival, tail)


# ---------------------------------------------------------------------------
# small helpers used by the passes


def with_datapath(d: Design, nodes: Iterable[Node], nets: Iterable[Net], **changes: Any) -> Design:
    return replace(d, datapath=DatapathGraph(tuple(nodes), tuple(nets)), **changes)


def fresh_name(taken: Iterable[str] | set[str], base: str) -> str:
    taken = set(taken)
    if base not in taken:
        return base
    for i in itertools.count(1):
        cand = f"{base}_{i}"
        if cand not in taken:
            return cand
    raise AssertionError  # unreachable


def structural_counts(d: Design) -> dict[str, int]:
    """Node/net/state counts used by overhead reports."""
    counts = {
        "nodes": len(d.datapath.nodes),
        "nets": len(d.datapath.nets),
        "states": len(d.controller.states),
        "key_width": d.key_width,
    }
    for role in ("key_mux", "comparator", "shadow_comparator", "edu", "mask_xor"):
        counts[role] = len(d.nodes_by_role(role))
    counts["mask_cell"] = sum(1 for n in d.datapath.nodes if n.kind == "mask")
    counts["counter"] = sum(1 for n in d.datapath.nodes if n.kind == "counter")
    counts["checker"] = sum(1 for n in d.datapath.nodes if n.kind == "checker")
    counts["mux"] = sum(1 for n in d.datapath.nodes if n.kind == "mux")
    counts["xor"] = sum(1 for n in d.datapath.nodes if n.kind == "fu" and n.params["op"] == "xor")
    counts["registers"] = sum(1 for n in d.datapath.nodes if n.kind == "reg")
    return counts
