"""Synthetic dataflow benchmarks and a small design builder.

The generators produce scheduled datapaths shaped like the classic HLS
benchmarks (FIR filter, elliptic wave filter, lattice filter, FFT
butterflies).  Input values are latched into registers in the reset state
S0, operations execute over control steps S1..S(N-1), and every operation
result is held in its own register so that the MUX-insertable nets have
plenty of slack.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from .ir import (
    ControllerFsm,
    DatapathGraph,
    Design,
    DesignError,
    Net,
    Node,
    Port,
    Transition,
    validate_design,
)

KINDS = ("fir", "elliptic", "lattice", "fft-like")
BENCH_WIDTHS = (8, 16, 32, 64)
OP_DELAYS = {"add": 2.0, "sub": 2.0, "mul": 3.0, "xor": 1.0, "and": 1.0, "or": 1.0}


class DesignBuilder:
    """Imperative helper for assembling a Design."""

    def __init__(self, name: str, clock_period_ns: float = 10.0):
        self.name = name
        self.clock_period_ns = clock_period_ns
        self.nodes: list[Node] = []
        self.nets: list[Net] = []
        self.inputs: list[Port] = []
        self.outputs: list[Port] = []
        self._net_ids: set[str] = set()

    def net(self, net_id: str, width: int) -> str:
        if net_id in self._net_ids:
            raise ValueError(f"net {net_id!r} already exists")
        self._net_ids.add(net_id)
        self.nets.append(Net(net_id, width))
        return net_id

    def input(self, name: str, width: int) -> str:
        self.net(name, width)
        self.inputs.append(Port(name, width, name))
        return name

    def output(self, name: str, net: str, width: int) -> None:
        self.outputs.append(Port(name, width, net))

    def fu(self, node_id: str, op: str, ins: list[str], width: int, delay: float | None = None, out: str | None = None) -> str:
        out = self.net(out or f"{node_id}_o", width)
        delay = OP_DELAYS.get(op, 1.0) if delay is None else delay
        self.nodes.append(Node(node_id, "fu", {"op": op, "delay_ns": delay, "in": list(ins), "out": out}))
        return out

    def reg(self, node_id: str, d: str, width: int, enable: bool = True, out: str | None = None) -> str:
        out = self.net(out or f"{node_id}_q", width)
        self.nodes.append(Node(node_id, "reg", {"in": d, "out": out, "enable": enable}))
        return out

    def mux(self, node_id: str, ins: list[str], width: int, sel: str | None = None, out: str | None = None) -> str:
        out = self.net(out or f"{node_id}_o", width)
        self.nodes.append(Node(node_id, "mux", {"in": list(ins), "out": out, "sel": sel}))
        return out

    def const(self, node_id: str, value: int, width: int, out: str | None = None) -> str:
        out = self.net(out or f"{node_id}_o", width)
        self.nodes.append(Node(node_id, "const", {"value": value, "out": out}))
        return out

    def build(self, states, transitions, control_words, reset: str | None = None) -> Design:
        ctrl = ControllerFsm(
            states=tuple(states),
            reset=reset or states[0],
            transitions=tuple(transitions),
            control_words={s: dict(w) for s, w in control_words.items()},
        )
        return Design(
            name=self.name,
            clock_period_ns=self.clock_period_ns,
            inputs=tuple(self.inputs),
            outputs=tuple(self.outputs),
            datapath=DatapathGraph(tuple(self.nodes), tuple(self.nets)),
            controller=ctrl,
        )


def linear_controller(n_states: int) -> tuple[list[str], list[Transition]]:
    states = [f"S{i}" for i in range(n_states)]
    trans = [Transition(states[i], states[(i + 1) % n_states]) for i in range(n_states)]
    return states, trans


@dataclass
class _Op:
    op: str
    args: list  # ("in", i) | ("op", j) | ("const", value)


def _fir(size: int, rng: random.Random, width: int) -> tuple[int, list[_Op]]:
    taps = max(2, math.ceil((size + 1) / 2))
    n_in = min(taps, 4)
    ops = [_Op("mul", [("in", i % n_in), ("const", rng.randrange(1, 1 << min(width, 8)))]) for i in range(taps)]
    pool = list(range(taps))
    while len(pool) > 1:
        rng.shuffle(pool)
        nxt = []
        while len(pool) >= 2:
            a, b = pool.pop(), pool.pop()
            ops.append(_Op("add", [("op", a), ("op", b)]))
            nxt.append(len(ops) - 1)
        pool = nxt + pool
    return n_in, ops


def _elliptic(size: int, rng: random.Random, width: int) -> tuple[int, list[_Op]]:
    n_in = 3
    ops: list[_Op] = []
    recent: list[tuple] = [("in", i) for i in range(n_in)]
    while len(ops) < size:
        a, b = rng.sample(recent[-4:], 2)
        kind = rng.choice(("add", "add", "sub", "mul"))
        if kind == "mul":
            ops.append(_Op("mul", [a, ("const", rng.randrange(1, 1 << min(width, 8)))]))
        else:
            ops.append(_Op(kind, [a, b]))
        recent.append(("op", len(ops) - 1))
    return n_in, ops


def _lattice(size: int, rng: random.Random, width: int) -> tuple[int, list[_Op]]:
    n_in = 2
    f, g = ("in", 0), ("in", 1)
    ops: list[_Op] = []
    while len(ops) < size:
        k = ("const", rng.randrange(1, 1 << min(width, 8)))
        ops.append(_Op("mul", [g, k]))
        kg = ("op", len(ops) - 1)
        ops.append(_Op("mul", [f, k]))
        kf = ("op", len(ops) - 1)
        ops.append(_Op(rng.choice(("add", "sub")), [f, kg]))
        f_new = ("op", len(ops) - 1)
        ops.append(_Op("add", [g, kf]))
        g = ("op", len(ops) - 1)
        f = f_new
    return n_in, ops


def _fft(size: int, rng: random.Random, width: int) -> tuple[int, list[_Op]]:
    n_in = 4
    lanes = [("in", i) for i in range(n_in)]
    ops: list[_Op] = []
    span = 1
    while len(ops) < size:
        order = list(range(n_in))
        new = list(lanes)
        for i in order:
            j = i ^ span
            if j < i:
                continue
            a, b = lanes[i], lanes[j]
            ops.append(_Op("add", [a, b]))
            new[i] = ("op", len(ops) - 1)
            ops.append(_Op("sub", [a, b]))
            diff = ("op", len(ops) - 1)
            ops.append(_Op("mul", [diff, ("const", rng.randrange(1, 1 << min(width, 8)))]))
            new[j] = ("op", len(ops) - 1)
        lanes = new
        span = 1 if span == n_in // 2 else span * 2
        rng.shuffle(lanes)
    return n_in, ops


_BUILDERS = {"fir": _fir, "elliptic": _elliptic, "lattice": _lattice, "fft-like": _fft}


def _schedule_and_build(name: str, n_in: int, ops: list[_Op], width: int, n_states: int | None,
                        rng: random.Random, clock: float = 10.0) -> Design:
    level: list[int] = []
    for o in ops:
        lv = 1
        for kind, ref in o.args:
            if kind == "op":
                lv = max(lv, level[ref] + 1)
        level.append(lv)
    depth = max(level)
    n_states = n_states if n_states is not None else max(4, depth + 1)
    if n_states < 4:
        raise ValueError("schedules need at least 4 controller states")
    steps = n_states - 1
    step = [1 + ((lv - 1) * steps) // depth for lv in level]

    consumed = {ref for o in ops for kind, ref in o.args if kind == "op"}
    # the tag keeps net names seed-dependent, so regenerated designs differ textually
    tag = format(rng.getrandbits(16), "04x")
    b = DesignBuilder(name, clock)
    in_q = []
    for i in range(n_in):
        x = b.input(f"x{i}", width)
        in_q.append(b.reg(f"rin{i}", x, width, out=f"xin{i}_{tag}"))
    comb: list[str] = []
    q: list[str] = []
    const_nets: dict[int, str] = {}
    words: dict[str, dict[str, int]] = {f"S{k}": {} for k in range(n_states)}
    for i in range(n_in):
        words["S0"][f"rin{i}"] = 1
    for j, o in enumerate(ops):
        args = []
        for kind, ref in o.args:
            if kind == "in":
                args.append(in_q[ref])
            elif kind == "const":
                if ref not in const_nets:
                    const_nets[ref] = b.const(f"c{len(const_nets)}", ref, width, out=f"k{len(const_nets)}_{tag}")
                args.append(const_nets[ref])
            else:
                args.append(comb[ref] if step[ref] == step[j] else q[ref])
        comb.append(b.fu(f"op{j}", o.op, args, width, out=f"t{j}_{tag}"))
        q.append(b.reg(f"r{j}", comb[j], width, out=f"v{j}_{tag}"))
        words[f"S{step[j]}"][f"r{j}"] = 1
    outs = [j for j in range(len(ops)) if j not in consumed]
    for k, j in enumerate(outs):
        b.output(f"y{k}", q[j], width)
    states, trans = linear_controller(n_states)
    d = b.build(states, trans, words)
    report = validate_design(d)
    if report:
        raise DesignError(f"generated design invalid: {report.violations[0].message}", report.violations)
    return d


def generate_benchmark(kind: str, size: int, seed: int, n_states: int | None = None,
                       width: int = 8) -> Design:
    """Deterministic synthetic benchmark.

    ``size`` is the number of datapath operations (each yields at least one
    MUX-insertable net); ``n_states`` defaults to one control step per DAG
    level plus the input-latching reset state.
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown benchmark kind {kind!r}; choose from {', '.join(KINDS)}")
    if size < 4:
        raise ValueError(f"size must be >= 4, got {size}")
    if width not in BENCH_WIDTHS:
        raise ValueError(f"width must be one of {BENCH_WIDTHS}")
    rng = random.Random(f"{kind}:{size}:{seed}:{width}")
    n_in, ops = _BUILDERS[kind](size, rng, width)
    return _schedule_and_build(f"{kind.replace('-', '_')}_{size}_{seed}", n_in, ops, width, n_states, rng)


def toy_design(n_inputs: int = 2, width: int = 4, n_ops: int = 4, seed: int = 0, name: str = "toy",
               op_set: tuple[str, ...] = ("add", "sub", "xor")) -> Design:
    """Small design whose total input width allows exhaustive simulation."""
    rng = random.Random(f"toy:{n_inputs}:{width}:{n_ops}:{seed}:{','.join(op_set)}")
    ops: list[_Op] = []
    recent: list[tuple] = [("in", i) for i in range(n_inputs)]
    while len(ops) < n_ops:
        a, b = rng.sample(recent[-3:], 2) if len(recent) >= 2 else (recent[0], recent[0])
        ops.append(_Op(rng.choice(op_set), [a, b]))
        recent.append(("op", len(ops) - 1))
    return _schedule_and_build(name, n_inputs, ops, width, None, rng)
