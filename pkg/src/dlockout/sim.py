"""Cycle-accurate simulation of datapath/controller designs.

The engine is vectorised over *lanes*: every net holds a ``uint64`` array
with one entry per independent execution, so thousands of input vectors (or
power traces) run in a single pass.  Scalar entry points wrap a one-lane
batch.

Cycle model: in cycle ``c`` the controller sits in some state, the datapath
settles combinationally under that state's control word, and at the clock
edge registers latch, the lockout counter updates and the controller moves
on.  Snapshot ``c`` records the state executed in cycle ``c``, the
combinational MUX/comparator/dp_comp values of that cycle, and the register
and primary-output values visible after its clock edge.  Snapshot 0 is the
reset snapshot (everything zero).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .ir import DP_FULL, DP_OK, DP_PARTIAL, Design, Node, comb_order
from .lockout import LockoutState

U64 = np.uint64


class SimulationError(ValueError):
    pass


_ARITH = {"add": np.add, "sub": np.subtract, "mul": np.multiply}
_BITWISE = {"and": np.bitwise_and, "or": np.bitwise_or, "xor": np.bitwise_xor}


def _mask(width: int) -> np.uint64:
    return U64((1 << width) - 1)


def key_to_bits(key: int | Sequence[int], width: int) -> list[int]:
    if isinstance(key, (int, np.integer)):
        key = int(key)
        if key < 0 or key >> width:
            raise SimulationError(f"key {key:#x} does not fit in key width {width}")
        return [(key >> i) & 1 for i in range(width)]
    bits = [int(b) for b in key]
    if len(bits) != width:
        raise SimulationError(f"key has {len(bits)} bits, design key width is {width}")
    if any(b not in (0, 1) for b in bits):
        raise SimulationError("key bits must be 0 or 1")
    return bits


def bits_to_int(bits: Sequence[int]) -> int:
    return sum(int(b) << i for i, b in enumerate(bits))


def key_hex(key: int, width: int) -> str:
    return format(key, f"0{max(1, (width + 3) // 4)}x")


class CompiledDesign:
    """Pre-computed evaluation plan for one Design."""

    def __init__(self, d: Design):
        self.design = d
        self.order: list[Node] = comb_order(d)
        self.width = {n.id: n.width for n in d.datapath.nets}
        self.regs = [n for n in d.datapath.nodes if n.kind == "reg"]
        self.muxes = [n for n in d.datapath.nodes if n.kind == "mux"]
        self.comparators = sorted(d.nodes_by_role("comparator"), key=lambda n: n.params["point"])
        self.states = list(d.controller.states)
        self.sidx = {s: i for i, s in enumerate(self.states)}
        self.reset = self.sidx[d.controller.reset]
        n_states = len(self.states)
        fields: dict[str, np.ndarray] = {}
        for n in d.datapath.nodes:
            if (n.kind == "mux" and not n.params.get("sel")) or (n.kind == "reg" and n.params.get("enable")):
                fields[n.id] = np.zeros(n_states, dtype=np.int64)
        for s, words in d.controller.control_words.items():
            for f, value in words.items():
                fields[f][self.sidx[s]] = value
        self.fields = fields
        self.transitions = [
            (self.sidx[t.src], tuple(t.when), self.sidx[t.dst]) for t in d.controller.transitions
        ]
        self.checker: Node | None = None
        self.threshold = 0
        self.check_state = -1
        self.blackhole = -1
        if d.dlockout is not None:
            self.checker = d.node_map[d.dlockout["checker"]]
            self.threshold = int(d.dlockout["threshold"])
            self.check_state = self.sidx[self.checker.params["check_state"]]
            bh = d.dlockout.get("blackhole_state")
            self.blackhole = self.sidx[bh] if bh else -1
        # nodes feeding primary outputs, for post-edge output evaluation
        needed = {p.net for p in d.outputs}
        cone = []
        for node in reversed(self.order):
            if node.out in needed:
                cone.append(node)
                needed.update(node.inputs)
        self.output_cone = list(reversed(cone))


def compile_design(d: Design) -> CompiledDesign:
    cache = d.__dict__.get("_compiled")
    if cache is None:
        cache = CompiledDesign(d)
        d.__dict__["_compiled"] = cache
    return cache


@dataclass
class BatchRecord:
    """Per-cycle arrays from a recorded batch run (shape ``(cycles+1, lanes)``)."""

    states: np.ndarray
    registers: dict[str, np.ndarray]
    muxes: dict[str, np.ndarray]
    comparators: dict[str, np.ndarray]
    dp_comp: np.ndarray | None
    alarm: np.ndarray
    outputs: dict[str, np.ndarray]
    toggles: dict[str, np.ndarray]
    probes: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def total_toggles(self) -> np.ndarray:
        tot = np.zeros_like(self.states, dtype=np.float64)
        for arr in self.toggles.values():
            tot += arr
        return tot


@dataclass
class BatchResult:
    outputs: dict[str, np.ndarray]
    counter: np.ndarray
    final_state: np.ndarray
    cycles_run: np.ndarray
    alarm: np.ndarray
    record: BatchRecord | None = None


def _as_lanes(value, lanes: int) -> np.ndarray:
    arr = np.asarray(value)
    if arr.ndim == 0:
        return np.full(lanes, int(arr), dtype=U64)
    return arr.astype(U64, copy=False)


def run_batch(
    d: Design,
    key_bits: Sequence[int | np.ndarray],
    inputs: Mapping[str, Any] | Sequence[Mapping[str, Any]],
    cycles: int | None = None,
    counter: int | np.ndarray = 0,
    *,
    lanes: int | None = None,
    lockout_enabled: bool = True,
    faults: Mapping[str, int] | None = None,
    overrides: Mapping[str, Any] | None = None,
    record: bool = False,
    probe: Sequence[str] = (),
) -> BatchResult:
    """Vectorised simulation.

    ``inputs`` is either one port->value map held for every cycle or a
    per-cycle list of maps (the last map is held once the list runs out).
    With ``cycles=None`` each lane runs exactly one schedule pass: it stops
    once the controller returns to reset or falls into the blackhole state.
    ``faults`` forces nets to fixed values (scalar or per lane); ``overrides`` replaces
    the value of key/mask cells (node id -> per-lane values).
    ``probe`` lists extra nets whose per-cycle values go into the record.
    ``lockout_enabled=False`` is the measurement mode: the checker always
    reports OK and the counter is frozen.
    """
    cd = compile_design(d)
    if len(key_bits) != d.key_width:
        raise SimulationError(f"key has {len(key_bits)} bits, design key width is {d.key_width}")
    per_cycle = list(inputs) if isinstance(inputs, (list, tuple)) else [inputs]
    if not per_cycle:
        per_cycle = [{}]
    port_names = {p.name: p for p in d.inputs}
    for vec in per_cycle:
        for name in vec:
            if name not in port_names:
                raise SimulationError(f"undefined input port {name!r}")
    if lanes is None:
        lanes = 1
        for vec in per_cycle:
            for v in vec.values():
                if np.ndim(v):
                    lanes = max(lanes, len(v))
        for v in list(key_bits) + list((overrides or {}).values()):
            if np.ndim(v):
                lanes = max(lanes, len(v))
        if np.ndim(counter):
            lanes = max(lanes, len(counter))
    faults = dict(faults or {})
    overrides = dict(overrides or {})

    key_arr = [_as_lanes(b, lanes) for b in key_bits]
    counter = np.array(np.broadcast_to(np.asarray(counter, dtype=np.int64), (lanes,)))
    hardened = cd.checker is not None
    state = np.full(lanes, cd.reset, dtype=np.int64)
    if hardened and cd.blackhole >= 0:
        state[counter >= cd.threshold] = cd.blackhole
    regs = {r.params["out"]: np.zeros(lanes, dtype=U64) for r in cd.regs}
    port_vals = {p.net: np.zeros(lanes, dtype=U64) for p in d.inputs}
    alarm_any = np.zeros(lanes, dtype=bool)
    single_pass = cycles is None
    max_cycles = cycles if cycles is not None else 2 * len(cd.states) + 2
    active = np.ones(lanes, dtype=bool)
    if single_pass and cd.blackhole >= 0:
        active &= state != cd.blackhole
    cycles_run = np.zeros(lanes, dtype=np.int64)

    rec = None
    if record:
        rec = _Recorder(cd, lanes, max_cycles, state, probe)

    def apply_inputs(c: int):
        vec = per_cycle[min(c, len(per_cycle) - 1)]
        for name, value in vec.items():
            port_vals[port_names[name].net] = _as_lanes(value, lanes) & _mask(port_names[name].width)

    # key, mask and constant cells do not change within a run
    static: dict[str, np.ndarray] = {}
    for node in cd.order:
        p = node.params
        if node.kind == "const":
            r = np.full(lanes, p["value"], dtype=U64)
        elif node.kind == "key":
            r = _as_lanes(overrides[node.id] if node.id in overrides else key_arr[p["index"]], lanes)
        elif node.kind == "mask":
            if node.id in overrides:
                r = _as_lanes(overrides[node.id], lanes)
            elif p["bit"] is None:
                raise SimulationError(f"mask cell {node.id!r} has no value (attacker view)")
            else:
                r = np.full(lanes, p["bit"], dtype=U64)
        else:
            continue
        static[node.out] = r
    forced = {net: _as_lanes(v, lanes) & _mask(cd.width[net]) for net, v in faults.items() if net in cd.width}
    static.update({net: v for net, v in forced.items() if net in static})
    all_lanes = np.arange(lanes)

    def step(node: Node) -> Callable[[dict, np.ndarray], np.ndarray] | None:
        out, p = node.out, node.params
        if out in forced:
            fv = forced[out]
            return lambda v, st: fv
        if node.kind == "fu":
            m = _mask(cd.width[out])
            a = p["in"][0]
            b = p["in"][1] if len(p["in"]) > 1 else None
            op = p["op"]
            if op in ("add", "sub", "mul"):
                f = _ARITH[op]
                return lambda v, st: f(v[a], v[b]) & m
            if op in _BITWISE:
                f = _BITWISE[op]
                return lambda v, st: f(v[a], v[b])
            if op == "xnor":
                return lambda v, st: ~(v[a] ^ v[b]) & m
            if op == "not":
                return lambda v, st: ~v[a] & m
            return lambda v, st: v[a]
        if node.kind == "mux":
            ins = list(p["in"])
            sel_net = p.get("sel")
            field_arr = None if sel_net else cd.fields[node.id]
            if len(ins) == 2:
                i0, i1 = ins
                if sel_net:
                    return lambda v, st: np.where(v[sel_net] == 1, v[i1], v[i0])
                return lambda v, st: np.where(field_arr[st] == 1, v[i1], v[i0])
            top = len(ins) - 1

            def wide(v, st):
                sel = v[sel_net].astype(np.int64) if sel_net else field_arr[st]
                return np.stack([v[n] for n in ins])[np.minimum(sel, top), all_lanes]
            return wide
        return None

    def plan(nodes: list[Node]) -> list[tuple[str, Any]]:
        out = []
        for node in nodes:
            if node.kind in ("const", "key", "mask", "reg"):
                continue
            fn = node if node.kind == "checker" else step(node)
            if fn is not None:
                out.append((node.out, fn))
        return out

    plan_all, plan_cone = plan(cd.order), plan(cd.output_cone)

    def run_checker(node: Node, vals: dict, st: np.ndarray, extra: dict) -> np.ndarray:
        p = node.params
        in_check = st == cd.check_state
        mism = np.zeros(lanes, dtype=bool)
        for net in p["comparators"]:
            mism |= vals[net] != 0
        mism &= in_check
        edu = np.zeros(lanes, dtype=bool)
        for net in p["edu"]:
            edu |= vals[net] != 0
        extra["alarm"] = edu & in_check
        extra["mismatch"] = mism
        if node.out in forced:
            return forced[node.out]
        if not lockout_enabled:
            return np.full(lanes, DP_OK, dtype=U64)
        dp = np.where(
            counter >= cd.threshold, DP_FULL,
            np.where(mism, np.where(counter + 1 >= cd.threshold, DP_FULL, DP_PARTIAL), DP_OK),
        )
        return dp.astype(U64)

    def evaluate(steps: list[tuple[str, Any]], st: np.ndarray) -> tuple[dict[str, np.ndarray], dict]:
        vals: dict[str, np.ndarray] = dict(port_vals)
        vals.update(regs)
        vals.update(static)
        extra: dict[str, Any] = {}
        for out, fn in steps:
            if fn.__class__ is Node:
                vals[out] = run_checker(fn, vals, st, extra)
            else:
                vals[out] = fn(vals, st)
        return vals, extra

    def read_outputs(st: np.ndarray) -> dict[str, np.ndarray]:
        vals, _ = evaluate(plan_cone, st)
        outs = {}
        for port in d.outputs:
            v = vals[port.net]
            if cd.blackhole >= 0:
                v = np.where(st == cd.blackhole, U64(0), v)
            outs[port.name] = v
        return outs

    c = 0
    while c < max_cycles and active.any():
        apply_inputs(c)
        vals, extra = evaluate(plan_all, state)
        # next state
        nxt = np.full(lanes, -1, dtype=np.int64)
        for src, when, dst in cd.transitions:
            hit = state == src
            for net, value in when:
                hit = hit & (vals[net] == value)
            nxt[hit] = dst
        if (nxt[active] < 0).any():
            raise SimulationError("controller has no enabled transition")
        # lockout counter
        if hardened and lockout_enabled:
            inc = extra["mismatch"] & (counter < cd.threshold) & active
            counter = counter + inc
        if hardened:
            alarm_any |= extra["alarm"] & active
        # register latch
        for r in cd.regs:
            q = r.params["out"]
            if r.params.get("enable"):
                en = cd.fields[r.id][state] == 1
            else:
                en = np.ones(lanes, dtype=bool)
            regs[q] = np.where(en & active, vals[r.params["in"]], regs[q])
        executed = state
        state = np.where(active, nxt, state)
        cycles_run += active
        if rec is not None:
            rec.capture(c + 1, executed, vals, extra, regs, read_outputs(state), active)
        if single_pass:
            ended = state == cd.reset
            if cd.blackhole >= 0:
                ended |= state == cd.blackhole
            active &= ~ended
        c += 1

    outputs = read_outputs(state)
    return BatchResult(
        outputs=outputs,
        counter=counter,
        final_state=state,
        cycles_run=cycles_run,
        alarm=alarm_any,
        record=rec.finish(c) if rec is not None else None,
    )


class _Recorder:
    def __init__(self, cd: CompiledDesign, lanes: int, max_cycles: int, state0: np.ndarray,
                 probe: Sequence[str] = ()):
        self.cd = cd
        n = max_cycles + 1
        self.states = np.zeros((n, lanes), dtype=np.int64)
        self.states[0] = state0
        self.regs = {r.id: np.zeros((n, lanes), dtype=U64) for r in cd.regs}
        self.muxes = {m.id: np.zeros((n, lanes), dtype=U64) for m in cd.muxes}
        self.comps = {c.id: np.zeros((n, lanes), dtype=U64) for c in cd.comparators}
        self.dp = np.zeros((n, lanes), dtype=np.int64) if cd.checker is not None else None
        self.alarm = np.zeros((n, lanes), dtype=bool)
        self.outputs = {p.name: np.zeros((n, lanes), dtype=U64) for p in cd.design.outputs}
        for net in probe:
            if net not in cd.width:
                raise SimulationError(f"cannot probe unknown net {net!r}")
        self.probes = {net: np.zeros((n, lanes), dtype=U64) for net in probe}

    def capture(self, c, executed, vals, extra, regs, outs, active):
        self.states[c] = executed
        for r in self.cd.regs:
            self.regs[r.id][c] = regs[r.params["out"]]
        for m in self.cd.muxes:
            self.muxes[m.id][c] = np.where(active, vals[m.out], self.muxes[m.id][c - 1])
        for cmp_node in self.cd.comparators:
            self.comps[cmp_node.id][c] = vals[cmp_node.out]
        if self.dp is not None:
            self.dp[c] = vals[self.cd.checker.out].astype(np.int64)
            self.alarm[c] = extra["alarm"]
        for name, v in outs.items():
            self.outputs[name][c] = v
        for net, arr in self.probes.items():
            arr[c] = vals[net]

    def finish(self, cycles: int) -> BatchRecord:
        n = cycles + 1
        toggles = {}
        for group in (self.regs, self.muxes):
            for name, arr in group.items():
                t = np.zeros(arr[:n].shape, dtype=np.int64)
                t[1:] = np.bitwise_count(arr[1:n] ^ arr[: n - 1])
                toggles[name] = t
        return BatchRecord(
            states=self.states[:n],
            registers={k: v[:n] for k, v in self.regs.items()},
            muxes={k: v[:n] for k, v in self.muxes.items()},
            comparators={k: v[:n] for k, v in self.comps.items()},
            dp_comp=self.dp[:n] if self.dp is not None else None,
            alarm=self.alarm[:n],
            outputs={k: v[:n] for k, v in self.outputs.items()},
            toggles=toggles,
            probes={k: v[:n] for k, v in self.probes.items()},
        )


# ---------------------------------------------------------------------------
# scalar API


@dataclass(frozen=True)
class Snapshot:
    cycle: int
    state: str
    registers: Mapping[str, int]
    muxes: Mapping[str, int]
    comparators: Mapping[str, int]
    dp_comp: int | None
    alarm: bool
    outputs: Mapping[str, int]
    toggles: Mapping[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "cycle": self.cycle, "state": self.state, "registers": dict(self.registers),
            "muxes": dict(self.muxes), "comparators": dict(self.comparators),
            "dp_comp": self.dp_comp, "alarm": self.alarm, "outputs": dict(self.outputs),
            "toggles": dict(self.toggles),
        }


@dataclass(frozen=True)
class ExecutionTrace:
    design: str
    snapshots: tuple[Snapshot, ...]

    @property
    def cycles(self) -> int:
        return len(self.snapshots) - 1

    def toggle_totals(self) -> list[int]:
        return [sum(s.toggles.values()) for s in self.snapshots]

    def to_json(self) -> str:
        return json.dumps({"design": self.design, "cycles": self.cycles,
                           "snapshots": [s.to_dict() for s in self.snapshots]}, indent=2)


def _trace_from_record(d: Design, rec: BatchRecord, lane: int = 0) -> ExecutionTrace:
    cd = compile_design(d)
    snaps = []
    for c in range(rec.states.shape[0]):
        snaps.append(Snapshot(
            cycle=c,
            state=cd.states[int(rec.states[c, lane])],
            registers={k: int(v[c, lane]) for k, v in rec.registers.items()},
            muxes={k: int(v[c, lane]) for k, v in rec.muxes.items()},
            comparators={k: int(v[c, lane]) for k, v in rec.comparators.items()},
            dp_comp=int(rec.dp_comp[c, lane]) if rec.dp_comp is not None else None,
            alarm=bool(rec.alarm[c, lane]),
            outputs={k: int(v[c, lane]) for k, v in rec.outputs.items()},
            toggles={k: int(v[c, lane]) for k, v in rec.toggles.items()},
        ))
    return ExecutionTrace(d.name, tuple(snaps))


def _lockout_after(d: Design, lockout: LockoutState, counter: int) -> LockoutState:
    if d.dlockout is None:
        return lockout
    return LockoutState(int(counter), lockout.threshold)


def _check_lockout(d: Design, lockout: LockoutState) -> None:
    if d.dlockout is not None and lockout.threshold != d.dlockout["threshold"]:
        raise SimulationError(
            f"lockout state threshold {lockout.threshold} != design threshold {d.dlockout['threshold']}"
        )


def simulate(
    d: Design,
    key: int | Sequence[int],
    inputs: Sequence[Mapping[str, int]] | Mapping[str, int],
    cycles: int,
    lockout: LockoutState | None = None,
    *,
    faults: Mapping[str, int] | None = None,
) -> tuple[ExecutionTrace, LockoutState]:
    """Run ``cycles`` clock cycles from reset; returns the trace and new lockout state."""
    if cycles < 1:
        raise SimulationError("cycles must be >= 1")
    lockout = lockout or LockoutState(0, d.dlockout["threshold"] if d.dlockout else 5)
    _check_lockout(d, lockout)
    bits = key_to_bits(key, d.key_width)
    res = run_batch(d, bits, inputs, cycles, lockout.counter, lanes=1, faults=faults, record=True)
    return _trace_from_record(d, res.record), _lockout_after(d, lockout, res.counter[0])


@dataclass(frozen=True)
class PassResult:
    outputs: dict[str, int]
    lockout: LockoutState
    blackhole: bool
    alarm: bool
    cycles: int


def run_pass(
    d: Design,
    key: int | Sequence[int],
    input_vector: Mapping[str, int],
    lockout: LockoutState | None = None,
    *,
    faults: Mapping[str, int] | None = None,
) -> PassResult:
    """One schedule pass from reset with the input vector held constant."""
    lockout = lockout or LockoutState(0, d.dlockout["threshold"] if d.dlockout else 5)
    _check_lockout(d, lockout)
    bits = key_to_bits(key, d.key_width)
    res = run_batch(d, bits, input_vector, None, lockout.counter, lanes=1, faults=faults)
    cd = compile_design(d)
    return PassResult(
        outputs={k: int(v[0]) for k, v in res.outputs.items()},
        lockout=_lockout_after(d, lockout, res.counter[0]),
        blackhole=cd.blackhole >= 0 and int(res.final_state[0]) == cd.blackhole,
        alarm=bool(res.alarm[0]),
        cycles=int(res.cycles_run[0]),
    )


def functional_output(
    d: Design,
    key: int | Sequence[int],
    input_vector: Mapping[str, int],
    lockout: LockoutState | None = None,
) -> dict[str, int]:
    """Black-box view: primary outputs after one schedule pass, nothing else."""
    return dict(run_pass(d, key, input_vector, lockout).outputs)


def batch_outputs(
    d: Design,
    key: int | Sequence[int],
    input_arrays: Mapping[str, np.ndarray],
    lockout: LockoutState | None = None,
) -> dict[str, np.ndarray]:
    """One schedule pass per lane; ``input_arrays`` maps port -> per-lane values."""
    counter = lockout.counter if lockout is not None else 0
    bits = key_to_bits(key, d.key_width)
    return run_batch(d, bits, input_arrays, None, counter).outputs


# ---------------------------------------------------------------------------
# power


@dataclass(frozen=True)
class PowerTrace:
    """One sample per simulated cycle (cycle numbers start at 1)."""

    samples: np.ndarray
    noise_sigma: float
    seed: int

    def __len__(self) -> int:
        return len(self.samples)

    def at(self, cycle: int) -> float:
        if not 1 <= cycle <= len(self.samples):
            raise IndexError(f"cycle {cycle} outside 1..{len(self.samples)}")
        return float(self.samples[cycle - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cycle", "sample"])
        for c, s in enumerate(self.samples, start=1):
            w.writerow([c, repr(float(s))])
        return buf.getvalue()


def noise(sigma: float, seed: int, cycles: int, lanes: int) -> np.ndarray:
    """Gaussian noise, shape (lanes, cycles); column ``c`` depends only on (seed, c)."""
    out = np.zeros((lanes, cycles))
    if sigma == 0:
        return out
    for c in range(1, cycles + 1):
        out[:, c - 1] = np.random.default_rng([seed, c]).normal(0.0, sigma, size=lanes)
    return out


def extract_power_trace(t: ExecutionTrace, noise_sigma: float, seed: int) -> PowerTrace:
    """Hamming-distance switching power of registers and MUX outputs plus noise."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    totals = np.array(t.toggle_totals()[1:], dtype=np.float64)
    samples = totals + noise(noise_sigma, seed, len(totals), 1)[0]
    return PowerTrace(samples, float(noise_sigma), int(seed))


def batch_power(rec: BatchRecord, noise_sigma: float, seed: int) -> np.ndarray:
    """Per-lane power traces, shape (lanes, cycles)."""
    totals = rec.total_toggles[1:].T
    return totals + noise(noise_sigma, seed, totals.shape[1], totals.shape[0])
