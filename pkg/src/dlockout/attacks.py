"""Attack harnesses: oracle brute force, simulated DPA and fault injection.

The attacker never touches a KeySpec.  Harnesses that need ground truth for
evaluation (the empirical MTD of a DPA run) take it as a separate argument
and only use it after the attack has produced its guess.
"""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .ir import Design
from .lockout import LockoutState
from .metrics import fault_trials
from .obfuscate import attacker_view, bits_to_hex
from .sim import batch_power, key_to_bits, run_batch, run_pass

N_RANDOM_PROBES = 8
STABILITY_WINDOW = 10


class AttackError(ValueError):
    pass


# ---------------------------------------------------------------------------
# oracle


class Oracle:
    """A working chip: primary inputs in, primary outputs out.

    Besides outputs the attacker can observe whether the device is dead
    (full lockout) and whether it raised its fault alarm.  The counter value,
    comparator outputs and every other internal net stay hidden.
    """

    def __init__(self, design: Design, lockout: LockoutState | None = None):
        self._design = design
        threshold = design.dlockout["threshold"] if design.dlockout else 5
        self._lockout = lockout or LockoutState(0, threshold)
        self._faults: dict[str, int] = {}
        self._alarm = False
        self.queries = 0

    @property
    def key_width(self) -> int:
        return self._design.key_width

    @property
    def input_ports(self) -> list[tuple[str, int]]:
        return [(p.name, p.width) for p in self._design.inputs]

    @property
    def locked_out(self) -> bool:
        return self._lockout.phase.value == "FULL"

    @property
    def alarm(self) -> bool:
        return self._alarm

    def inject(self, faults: Mapping[str, int] | None) -> None:
        """Physical fault injection on internal nets (attacker capability in the fault model)."""
        self._faults = dict(faults or {})

    def query(self, key: int | Sequence[int], vector: Mapping[str, int]) -> dict[str, int]:
        r = run_pass(self._design, key, vector, self._lockout, faults=self._faults or None)
        self._lockout = r.lockout
        self._alarm = self._alarm or r.alarm
        self.queries += 1
        return dict(r.outputs)

    # evaluator-only hooks, never used by attack logic
    def _counter(self) -> int:
        return self._lockout.counter


# ---------------------------------------------------------------------------
# reports


@dataclass
class AttackReport:
    strategy: str
    attempts_used: int
    keys_tried: list[str]
    recovered_key: str | None
    locked_out: bool
    seed: int | None = None
    alarm: bool = False
    details: dict[str, Any] = field(default_factory=dict)
    wall_clock_s: float = 0.0

    @property
    def success(self) -> bool:
        return self.recovered_key is not None

    def to_dict(self, timing: bool = True) -> dict[str, Any]:
        d = {
            "strategy": self.strategy,
            "attempts_used": self.attempts_used,
            "keys_tried": list(self.keys_tried),
            "recovered_key": self.recovered_key,
            "success": self.success,
            "locked_out": self.locked_out,
            "alarm": self.alarm,
            "seed": self.seed,
            "details": self.details,
        }
        if timing:
            d["wall_clock_s"] = self.wall_clock_s
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# golden pairs and key streams


def probe_vectors(d: Design, seed: int = 0, n_random: int = N_RANDOM_PROBES) -> list[dict[str, int]]:
    """Fixed probe set: ``n_random`` random vectors followed by all-zeros."""
    rng = random.Random(f"probes:{seed}")
    vecs = [{p.name: rng.getrandbits(p.width) for p in d.inputs} for _ in range(n_random)]
    vecs.append({p.name: 0 for p in d.inputs})
    return vecs


def golden_pairs(reference: Design, vectors: Iterable[Mapping[str, int]],
                 key: int | Sequence[int] = 0) -> list[tuple[dict[str, int], dict[str, int]]]:
    """Input/output pairs from a working reference (e.g. the unlocked design)."""
    out = []
    for v in vectors:
        out.append((dict(v), dict(run_pass(reference, key, v).outputs)))
    return out


def exhaustive_stream(m: int, start: int = 0) -> Iterator[int]:
    for i in range(1 << m):
        yield (start + i) % (1 << m)


def random_stream(m: int, seed: int) -> Iterator[int]:
    rng = random.Random(f"stream:{seed}")
    while True:
        yield rng.getrandbits(m)


def _as_int(key: int | Sequence[int]) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key)
    return sum(int(b) << i for i, b in enumerate(key))


def _hex(key: int, m: int) -> str:
    return format(key, f"0{max(1, (m + 3) // 4)}x")


# ---------------------------------------------------------------------------
# brute force


def _check_key(o: Oracle, key: int, golden) -> bool:
    """Apply probes in order, stopping at the first mismatch (one attempt per wrong key)."""
    for vec, expected in golden:
        if o.query(key, vec) != expected:
            return False
    return True


def brute_force(o: Oracle, key_stream: Iterable[int | Sequence[int]], budget: int,
                golden: Sequence[tuple[Mapping[str, int], Mapping[str, int]]], seed: int | None = None) -> AttackReport:
    """Try keys in order until success, lockout or budget exhaustion."""
    if budget < 1:
        raise AttackError("budget must be >= 1")
    if not golden:
        raise AttackError("at least one golden input/output pair is required")
    t0 = time.perf_counter()
    m = o.key_width
    tried: list[str] = []
    recovered = None
    for key in key_stream:
        if len(tried) >= budget or o.locked_out:
            break
        k = _as_int(key)
        tried.append(_hex(k, m))
        if _check_key(o, k, golden):
            recovered = _hex(k, m)
            break
        if o.locked_out:
            break
    return AttackReport(
        strategy="brute", attempts_used=len(tried), keys_tried=tried, recovered_key=recovered,
        locked_out=o.locked_out, seed=seed, alarm=o.alarm,
        details={"budget": budget, "probes": len(golden)},
        wall_clock_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# fault injection


@dataclass(frozen=True)
class FaultSpec:
    """Stuck-at faults on primary comparator outputs, replayed over device copies."""

    targets: tuple[int, ...]
    polarity: int
    n_dev: int = 1
    X: int | None = None
    fault_from_attempt: int = 1

    def __post_init__(self):
        if self.polarity not in (0, 1):
            raise AttackError("polarity must be 0 (SAF-0) or 1 (SAF-1)")
        if self.n_dev < 1:
            raise AttackError("n_dev must be >= 1")
        if len(set(self.targets)) != len(self.targets):
            raise AttackError("one fault site per point: targets must be distinct")
        if self.fault_from_attempt < 1:
            raise AttackError("fault_from_attempt must be >= 1")


def _fault_map(d: Design, f: FaultSpec) -> dict[str, int]:
    comps = {n.params["point"]: n for n in d.nodes_by_role("comparator")}
    faults = {}
    for pid in f.targets:
        if pid not in comps:
            raise AttackError(f"fault site {pid!r} is not a comparator output")
        faults[comps[pid].out] = f.polarity
    return faults


def fault_attack(d: Design, f: FaultSpec, key_stream: Iterable[int | Sequence[int]],
                 golden: Sequence[tuple[Mapping[str, int], Mapping[str, int]]],
                 budget: int | None = None, seed: int | None = None) -> AttackReport:
    """Brute force with comparator stuck-at faults across ``n_dev`` device copies.

    Copies are consumed one after another; attempt ``a`` on a copy runs with
    the fault applied when ``a >= fault_from_attempt``.  Any EDU alarm aborts
    the campaign.
    """
    if d.dlockout is None:
        raise AttackError("fault attack targets a lockout-hardened design")
    X = d.dlockout["threshold"]
    if f.X is not None and f.X != X:
        raise AttackError(f"FaultSpec X={f.X} disagrees with the design threshold {X}")
    if not golden:
        raise AttackError("at least one golden input/output pair is required")
    faults = _fault_map(d, f)
    t0 = time.perf_counter()
    m = d.key_width
    tried: list[str] = []
    recovered = None
    alarm = False
    copies_used = 0
    locked_copies = 0
    lockout_events = 0
    stream = iter(key_stream)
    exhausted = False
    for _ in range(f.n_dev):
        if recovered or alarm or exhausted:
            break
        o = Oracle(d)
        copies_used += 1
        attempt = 0
        while not o.locked_out:
            if budget is not None and len(tried) >= budget:
                exhausted = True
                break
            try:
                key = next(stream)
            except StopIteration:
                exhausted = True
                break
            attempt += 1
            o.inject(faults if attempt >= f.fault_from_attempt else None)
            k = _as_int(key)
            tried.append(_hex(k, m))
            before = o._counter()
            ok = _check_key(o, k, golden)
            lockout_events += int(o._counter() > before)
            if o.alarm:
                alarm = True
                break
            if ok:
                recovered = _hex(k, m)
                break
        locked_copies += int(o.locked_out)
    return AttackReport(
        strategy="fault", attempts_used=len(tried), keys_tried=tried, recovered_key=recovered,
        locked_out=locked_copies > 0, seed=seed, alarm=alarm,
        details={
            "polarity": f"SAF{f.polarity}",
            "targets": list(f.targets),
            "n_dev": f.n_dev,
            "X": X,
            "fault_from_attempt": f.fault_from_attempt,
            "copies_used": copies_used,
            "copies_locked": locked_copies,
            "lockout_events": lockout_events,
            "aborted": alarm,
            "edu": bool(d.dlockout.get("edu")),
            "theoretical_trials": fault_trials(m, f.n_dev, X) if X >= 2 else None,
        },
        wall_clock_s=time.perf_counter() - t0,
    )


# ---------------------------------------------------------------------------
# differential power analysis


def _trace_cycles(d: Design) -> int:
    """One schedule pass plus the first cycle of the next.

    The extra cycle shows the switching caused by values latched at the
    last clock edge of the pass (e.g. MUXes in front of output ports).
    """
    bh = d.dlockout.get("blackhole_state") if d.dlockout else None
    return sum(1 for s in d.controller.states if s != bh) + 1


def _cumulative_corr(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Pearson correlation of the first n rows, for every n; shape (N, cycles)."""
    n = np.arange(1, x.shape[0] + 1, dtype=np.float64)[:, None]
    sx, sy = np.cumsum(x, 0), np.cumsum(y, 0)
    sxx, syy, sxy = np.cumsum(x * x, 0), np.cumsum(y * y, 0), np.cumsum(x * y, 0)
    cov = sxy - sx * sy / n
    vx = sxx - sx * sx / n
    vy = syy - sy * sy / n
    den = np.sqrt(np.clip(vx, 0, None) * np.clip(vy, 0, None))
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(den > 1e-9 * np.maximum(1.0, n), cov / den, 0.0)
    return r


def _leading_sign(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per trace count: the sign and |r| at the cycle with the largest |r|."""
    idx = np.argmax(np.abs(r), axis=1)
    best = r[np.arange(r.shape[0]), idx]
    return np.sign(best), np.abs(best)


def _mtd_from_leads(correct: np.ndarray, window: int = STABILITY_WINDOW) -> int | None:
    """Smallest n from which the correct hypothesis leads at every later count (>= window of them)."""
    n_total = len(correct)
    wrong = np.nonzero(~correct)[0]
    start = 0 if len(wrong) == 0 else int(wrong[-1]) + 1
    if n_total - start < window:
        return None
    return start + 1


def collect_traces(d: Design, key_bits: Sequence[int], traces: int, p: int | None,
                   noise_sigma: float, seed: int) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Random plaintexts (low ``p`` bits vary) and noisy power traces of the device."""
    rng = np.random.default_rng([seed, 1])
    inputs = {}
    for port in d.inputs:
        bits = port.width if p is None else min(p, port.width)
        inputs[port.name] = rng.integers(0, 1 << bits, size=traces, dtype=np.uint64)
    res = run_batch(d, list(key_bits), inputs, _trace_cycles(d), 0, lanes=traces,
                    lockout_enabled=False, record=True)
    return inputs, batch_power(res.record, noise_sigma, seed)


def _predict(view: Design, key_arrays: list, inputs, cycles: int, overrides) -> np.ndarray:
    res = run_batch(view, key_arrays, inputs, cycles, 0, lanes=len(next(iter(inputs.values()))),
                    lockout_enabled=False, overrides=overrides, record=True)
    return res.record.total_toggles[1:].T


def dpa_attack(d: Design, device_key: Sequence[int] | int, traces: int, noise_sigma: float, seed: int,
               p: int | None = None, rounds: int = 3, true_key: Sequence[int] | int | None = None,
               verify: bool = True) -> AttackReport:
    """Differential power analysis on a design operated in measurement mode.

    The device runs ``device_key`` (the provisioned key, hidden from the
    attack logic) on random plaintexts.  The attacker sees the design with
    mask bits stripped.  For each key bit it simulates both hypotheses with
    the other bits at their current estimates, forms the predicted
    difference ``D = P1 - P0`` and correlates it, per cycle, with the
    residual ``power - (P0 + P1) / 2``.  Unknown mask bits are guessed at
    random per trace.  A few Gauss-Seidel sweeps refine the estimates.

    ``true_key`` is used only afterwards, to compute the empirical MTD.
    """
    if traces < 1:
        raise AttackError("traces must be >= 1")
    if noise_sigma < 0:
        raise AttackError("noise_sigma must be >= 0")
    t0 = time.perf_counter()
    m = d.key_width
    key_bits = key_to_bits(_as_int(device_key), m)
    inputs, power = collect_traces(d, key_bits, traces, p, noise_sigma, seed)
    cycles = power.shape[1]

    view = attacker_view(d)
    guess_rng = np.random.default_rng([seed, 2])
    overrides = {n.id: guess_rng.integers(0, 2, size=traces, dtype=np.uint64)
                 for n in view.datapath.nodes if n.kind == "mask"}
    estimate = [0] * m
    corr_final: list[np.ndarray] = [np.zeros((traces, cycles))] * m
    for _ in range(max(1, rounds)):
        for j in range(m):
            preds = []
            for h in (0, 1):
                ka = list(estimate)
                ka[j] = h
                preds.append(_predict(view, ka, inputs, cycles, overrides))
            diff = preds[1] - preds[0]
            resid = power - (preds[0] + preds[1]) / 2
            r = _cumulative_corr(diff, resid)
            sign, _ = _leading_sign(r[-1:])
            estimate[j] = 1 if sign[0] > 0 else 0
            corr_final[j] = r

    threshold = 4.0 / math.sqrt(traces)
    window = max(STABILITY_WINDOW, traces // 10)
    bits_stats = []
    all_stable = True
    for j in range(m):
        sign, mag = _leading_sign(corr_final[j])
        guess_sign = 1 if estimate[j] else -1
        tail = sign[-window:] if traces >= window else sign
        stable = bool(traces >= window and np.all(tail == guess_sign) and mag[-1] > threshold)
        all_stable &= stable
        bits_stats.append({"bit": j, "guess": estimate[j], "corr": float(mag[-1]) * (1 if sign[-1] >= 0 else -1),
                           "abs_corr": float(mag[-1]), "stable": stable})

    mtd_bits = None
    correct_bits = None
    if true_key is not None:
        tk = key_to_bits(_as_int(true_key), m)
        mtd_bits = []
        for j in range(m):
            sign, _ = _leading_sign(corr_final[j])
            want = 1 if tk[j] else -1
            mtd_bits.append(_mtd_from_leads(sign == want))
            bits_stats[j]["mtd"] = mtd_bits[-1]
        correct_bits = sum(int(a == b) for a, b in zip(estimate, tk))

    guess_hex = bits_to_hex(estimate)
    recovered = None
    attempts = 0
    verified = None
    if all_stable and verify:
        # one functional check of the candidate against a fresh device
        o = Oracle(d)
        golden = golden_pairs(d, probe_vectors(d, seed), key_bits)
        attempts = 1
        verified = _check_key(o, _as_int(estimate), golden)
        if verified:
            recovered = guess_hex
    elif all_stable:
        recovered = guess_hex

    mtd = None
    if mtd_bits is not None and all(v is not None for v in mtd_bits):
        mtd = max(mtd_bits)
    details = {
        "traces": traces,
        "noise_sigma": noise_sigma,
        "p": p,
        "cycles": cycles,
        "rounds": rounds,
        "masked": any(n.kind == "mask" for n in d.datapath.nodes),
        "key_guess": guess_hex,
        "stable": all_stable,
        "verified": verified,
        "corr_threshold": threshold,
        "max_abs_corr": max((b["abs_corr"] for b in bits_stats), default=0.0),
        "bits": bits_stats,
        "mtd": mtd,
        "correct_bits": correct_bits,
    }
    return AttackReport(
        strategy="dpa", attempts_used=attempts, keys_tried=[guess_hex] if attempts else [],
        recovered_key=recovered, locked_out=False, seed=seed, details=details,
        wall_clock_s=time.perf_counter() - t0,
    )
