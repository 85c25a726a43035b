"""Key-MUX obfuscation and the masking countermeasure.

Every obfuscation point cuts a datapath net and routes it through a
2-input MUX whose other input is a decoy (an existing net of the same
width).  One key bit drives each MUX, so the key width equals the number of
points.  Masking rewires each selector to ``key_bit XOR mask_bit``; the mask
bits are baked in at transform time, which makes the correct key equal to
the mask vector.
"""

from __future__ import annotations

import graphlib
import json
import random
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

import numpy as np

from .ir import (
    DEFAULT_MUX_DELAY_NS,
    Design,
    DesignError,
    Net,
    Node,
    _comb_order,
    compute_slack,
    validate_design,
    with_datapath,
)
from .lockout import XOR_DELAY_NS

MUX_DELAY_NS = DEFAULT_MUX_DELAY_NS
MAX_EFFECT_CHECKS = 32  # per point, before falling back to the first on-time decoy
INSERTION_BUDGET_NS = MUX_DELAY_NS + XOR_DELAY_NS
_EPS = 1e-9


class ObfuscationError(DesignError):
    pass


@dataclass(frozen=True)
class ObfuscationPoint:
    point_id: int
    host_net: str
    mux_node_id: str
    key_bit_index: int
    reference_bit: int
    decoy_net: str
    masked: bool = False
    mask_bit: int | None = None

    def __post_init__(self):
        if self.reference_bit not in (0, 1):
            raise ValueError("reference_bit must be 0 or 1")
        if self.masked != (self.mask_bit is not None):
            raise ValueError("mask_bit is present iff the point is masked")

    def to_dict(self) -> dict[str, Any]:
        return {
            "point_id": self.point_id, "host_net": self.host_net, "mux_node_id": self.mux_node_id,
            "key_bit_index": self.key_bit_index, "reference_bit": self.reference_bit,
            "decoy_net": self.decoy_net, "masked": self.masked, "mask_bit": self.mask_bit,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ObfuscationPoint":
        return cls(**{k: data[k] for k in (
            "point_id", "host_net", "mux_node_id", "key_bit_index", "reference_bit",
            "decoy_net", "masked", "mask_bit")})


def bits_to_hex(bits: Sequence[int]) -> str:
    value = sum(int(b) << i for i, b in enumerate(bits))
    return format(value, f"0{max(1, (len(bits) + 3) // 4)}x")


def hex_to_bits(text: str, width: int) -> list[int]:
    text = text.strip().lower()
    if text.startswith("0x"):
        text = text[2:]
    try:
        value = int(text, 16) if text else 0
    except ValueError:
        raise ValueError(f"not a hex key: {text!r}") from None
    if value >> width:
        raise ValueError(f"key 0x{text} does not fit in {width} bits")
    return [(value >> i) & 1 for i in range(width)]


@dataclass(frozen=True)
class KeySpec:
    """The designer's secret: bit ``i`` belongs to key cell ``i``."""

    correct_key: tuple[int, ...]
    mask_vector: tuple[int, ...]
    points: tuple[ObfuscationPoint, ...] = ()

    def __post_init__(self):
        if len(self.correct_key) != len(self.mask_vector):
            raise ValueError("correct_key and mask_vector lengths differ")

    @property
    def width(self) -> int:
        return len(self.correct_key)

    @property
    def key_int(self) -> int:
        return sum(b << i for i, b in enumerate(self.correct_key))

    @property
    def key_hex(self) -> str:
        return bits_to_hex(self.correct_key)

    def to_json(self) -> str:
        return json.dumps({
            "key_width": self.width,
            "correct_key": bits_to_hex(self.correct_key),
            "mask_vector": bits_to_hex(self.mask_vector),
            "points": [p.to_dict() for p in self.points],
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "KeySpec":
        data = json.loads(text)
        w = int(data["key_width"])
        return cls(
            tuple(hex_to_bits(data["correct_key"], w)),
            tuple(hex_to_bits(data["mask_vector"], w)),
            tuple(ObfuscationPoint.from_dict(p) for p in data["points"]),
        )


# ---------------------------------------------------------------------------
# point selection


def _eligible_nets(d: Design) -> list[str]:
    """Datapath nets driven by an unannotated functional unit or register."""
    out = []
    sinks = d.sinks
    observed = {p.net for p in d.outputs}
    for node in d.datapath.nodes:
        if node.kind not in ("fu", "reg") or node.role is not None:
            continue
        net = node.out
        if sinks.get(net) or net in observed:
            out.append(net)
    return out


def _arrivals_with_extra(d: Design, order: list[Node], extra: Mapping[str, float]) -> float:
    """Critical path if ``extra[net]`` ns were inserted right after each net's driver."""
    arrival = {net: extra.get(net, 0.0) for net in d.net_map}
    for node in order:
        if node.out is None:
            continue
        base = max((arrival[i] for i in node.inputs), default=0.0)
        arrival[node.out] = base + node.delay + extra.get(node.out, 0.0)
    return max(arrival.values(), default=0.0)


def qualifying_nets(d: Design) -> dict[str, float]:
    """Eligible nets whose slack admits a MUX plus an XOR, with that slack."""
    s = compute_slack(d)
    crit = s.critical_path_ns
    q = {}
    for net in _eligible_nets(d):
        if s[net] + _EPS >= INSERTION_BUDGET_NS and s.path_through(net) + INSERTION_BUDGET_NS <= crit + _EPS:
            q[net] = s[net]
    return q


def select_points(d: Design, m: int, policy: str = "max-slack", seed: int | None = None) -> list[str]:
    """Pick ``m`` non-critical nets.

    A net qualifies when a MUX plus an XOR fits in its slack without
    stretching the critical path.  Candidates are then accepted in policy
    order (largest slack first, ties by net id; or a seeded shuffle) as long
    as the accepted set jointly leaves the critical path unchanged.
    """
    if m < 0:
        raise ValueError("m must be >= 0")
    if m == 0:
        return []
    q = qualifying_nets(d)
    if len(q) < m:
        raise ObfuscationError(f"only {len(q)} nets qualify for key-MUX insertion, {m} requested")
    if policy == "max-slack":
        ranked = sorted(q, key=lambda n: (-q[n], n))
    elif policy == "random":
        ranked = sorted(q)
        random.Random(f"points:{seed}").shuffle(ranked)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    order = [d.node_map[i] for i in _comb_order(d)]
    crit = compute_slack(d).critical_path_ns
    chosen: list[str] = []
    extra: dict[str, float] = {}
    for net in ranked:
        extra[net] = INSERTION_BUDGET_NS
        if _arrivals_with_extra(d, order, extra) <= crit + _EPS:
            chosen.append(net)
            if len(chosen) == m:
                return chosen
        else:
            del extra[net]
    raise ObfuscationError(
        f"{len(q)} nets qualify individually but only {len(chosen)} fit jointly without lengthening "
        f"the critical path; {m} requested"
    )


# ---------------------------------------------------------------------------
# insertion


def _rename_driver_output(nodes: list[Node], net: str, new: str) -> list[Node]:
    out = []
    for n in nodes:
        if n.out == net and n.kind in ("fu", "reg"):
            n = n.with_params(out=new)
        out.append(n)
    return out


def _acyclic_and_on_time(d: Design, crit: float, pending: Mapping[str, float]) -> bool:
    """No loop, and the critical path still fits once pending points are inserted."""
    try:
        order = [d.node_map[i] for i in _comb_order(d)]
    except graphlib.CycleError:
        return False
    return _arrivals_with_extra(d, order, pending) <= crit + _EPS


def _host_observable(d: Design, key_bits: list[int], host: str, vectors: Mapping[str, np.ndarray]) -> bool:
    """Stuck-at probe: can the host net's value reach an output at all?

    Some generated datapaths mask a net functionally (a chain of wrapping
    multiplies can zero it out).  No decoy can be effective there, so the
    per-decoy effect check is skipped for such hosts.
    """
    from .sim import run_batch

    n = len(next(iter(vectors.values())))
    stuck = np.concatenate([np.zeros(n, dtype=np.uint64),
                            np.full(n, (1 << d.net_map[host].width) - 1, dtype=np.uint64)])
    out = run_batch(d, key_bits, _doubled(vectors), faults={host: stuck}).outputs
    return any(bool((v[:n] != v[n:]).any()) for v in out.values())


def _decoy_effective(d: Design, key_bits: list[int], bit: int, vectors: Mapping[str, np.ndarray]) -> bool:
    """Does flipping one key bit change some primary output on the probe vectors?"""
    from .sim import run_batch

    n = len(next(iter(vectors.values())))
    keys: list = list(key_bits)
    keys[bit] = np.concatenate([np.full(n, key_bits[bit]), np.full(n, key_bits[bit] ^ 1)]).astype(np.uint64)
    out = run_batch(d, keys, _doubled(vectors)).outputs
    return any(bool((v[:n] != v[n:]).any()) for v in out.values())


def _doubled(vectors: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: np.concatenate([v, v]) for k, v in vectors.items()}


def _probe_vectors(d: Design, rng: random.Random, n: int = 64) -> dict[str, np.ndarray]:
    return {
        p.name: np.array([rng.getrandbits(p.width) for _ in range(n)], dtype=np.uint64)
        for p in d.inputs
    }


def insert_key_muxes(d: Design, nets: Sequence[str], key_seed: int,
                     check_effect: bool = True) -> tuple[Design, KeySpec, list[ObfuscationPoint]]:
    """Cut each net, route it through a key MUX and draw the correct key.

    Decoys are drawn from equal-width nets, re-drawn when they would create a
    combinational loop, lengthen the critical path, or (``check_effect``)
    leave the outputs unchanged on random probe vectors when their key bit
    is flipped.
    """
    if d.key_width:
        raise ObfuscationError("design is already key-obfuscated")
    if len(set(nets)) != len(nets):
        raise ObfuscationError("obfuscation nets must be distinct")
    for net in nets:
        if net not in d.net_map:
            raise ObfuscationError(f"unknown net {net!r}")
    m = len(nets)
    rng = random.Random(f"key:{key_seed}")
    key_index = list(range(m))
    rng.shuffle(key_index)
    ref_bits = [rng.getrandbits(1) for _ in range(m)]
    crit = compute_slack(d).critical_path_ns
    probes = _probe_vectors(d, random.Random(f"probe:{key_seed}")) if check_effect and d.inputs else None

    nodes, all_nets = list(d.datapath.nodes), list(d.datapath.nets)
    for j in range(m):
        all_nets.append(Net(f"key_{j}", 1))
        nodes.append(Node(f"kbit_{j}", "key", {"index": j, "out": f"key_{j}"}))
    cur = with_datapath(d, nodes, all_nets, key_width=m)
    key_bits = [0] * m
    points: list[ObfuscationPoint] = []
    taken = {n.id for n in all_nets}
    for pid, host in enumerate(nets):
        width = cur.net_map[host].width
        pre = f"{host}_pre"
        if pre in taken:
            raise ObfuscationError(f"net name {pre!r} already in use")
        kidx, ref = key_index[pid], ref_bits[pid]
        key_bits[kidx] = ref
        candidates = sorted(n.id for n in cur.datapath.nets
                            if n.width == width and n.id not in (host, pre) and not n.id.startswith("key_"))
        rng.shuffle(candidates)
        placed = None
        fallback = None
        effect_budget = MAX_EFFECT_CHECKS if probes is not None else 0
        observable = None
        for decoy in candidates:
            ins = [pre, decoy] if ref == 0 else [decoy, pre]
            nodes2 = _rename_driver_output(list(cur.datapath.nodes), host, pre)
            nodes2.append(Node(f"kmux_{pid}", "mux", {
                "in": ins, "out": host, "sel": f"key_{kidx}", "delay_ns": MUX_DELAY_NS,
                "role": "key_mux", "point": pid,
            }))
            trial = with_datapath(cur, nodes2, list(cur.datapath.nets) + [Net(pre, width)])
            pending = {n: INSERTION_BUDGET_NS for n in nets[pid + 1:]}
            if not _acyclic_and_on_time(trial, crit, pending):
                continue
            if observable is None and effect_budget:
                # the trial's MUX drives the host, so stuck-at faults land on it
                observable = _host_observable(trial, key_bits, host, probes)
                if not observable:
                    effect_budget = 0
            if effect_budget > 0:
                effect_budget -= 1
                if not _decoy_effective(trial, key_bits, kidx, probes):
                    fallback = fallback or (trial, decoy)
                    continue
            elif probes is not None and fallback is not None:
                placed = fallback
                break
            placed = (trial, decoy)
            break
        if placed is None:
            placed = fallback
        if placed is None:
            raise ObfuscationError(f"no width-{width} decoy available for net {host!r}")
        cur, decoy = placed
        taken.add(pre)
        points.append(ObfuscationPoint(pid, host, f"kmux_{pid}", kidx, ref, decoy))
    report = validate_design(cur)
    if report:
        raise ObfuscationError(f"obfuscated design invalid: {report.violations[0].message}", report.violations)
    spec = KeySpec(tuple(key_bits), tuple([0] * m), tuple(points))
    return cur, spec, points


def apply_masking(d: Design, points: Sequence[ObfuscationPoint], mask_seed: int) -> tuple[Design, KeySpec]:
    """Rewire each selector to ``key XOR mask`` with the correct operand on input 0."""
    if any(p.masked for p in points) or d.nodes_by_role("mask_xor"):
        raise ObfuscationError("design is already masked")
    if d.nodes_by_role("comparator"):
        raise ObfuscationError("apply masking before attaching comparators")
    rng = random.Random(f"mask:{mask_seed}")
    nodes, nets = list(d.datapath.nodes), list(d.datapath.nets)
    new_points = []
    m = d.key_width
    correct = [0] * m
    masks = [0] * m
    by_id = {n.id: i for i, n in enumerate(nodes)}
    for p in sorted(points, key=lambda p: p.point_id):
        bit = rng.getrandbits(1)
        mask_net, sel_net = f"mask_{p.point_id}", f"ksel_{p.point_id}"
        nets += [Net(mask_net, 1), Net(sel_net, 1)]
        nodes.append(Node(f"kmask_{p.point_id}", "mask", {"bit": bit, "out": mask_net}))
        nodes.append(Node(f"kmx_{p.point_id}", "fu", {
            "op": "xor", "delay_ns": XOR_DELAY_NS, "in": [f"key_{p.key_bit_index}", mask_net],
            "out": sel_net, "role": "mask_xor", "point": p.point_id,
        }))
        mux = nodes[by_id[p.mux_node_id]]
        ins = list(mux.params["in"])
        if p.reference_bit == 1:
            ins.reverse()
        nodes[by_id[p.mux_node_id]] = mux.with_params(**{"in": ins, "sel": sel_net})
        correct[p.key_bit_index] = bit
        masks[p.key_bit_index] = bit
        new_points.append(replace(p, reference_bit=bit, masked=True, mask_bit=bit))
    out = with_datapath(d, nodes, nets)
    report = validate_design(out)
    if report:
        raise ObfuscationError(f"masked design invalid: {report.violations[0].message}", report.violations)
    return out, KeySpec(tuple(correct), tuple(masks), tuple(new_points))


def obfuscate(d: Design, m: int, key_seed: int = 0, policy: str = "max-slack",
              mask: bool = False, mask_seed: int | None = None) -> tuple[Design, KeySpec]:
    """select_points + insert_key_muxes (+ apply_masking) in one call."""
    nets = select_points(d, m, policy, key_seed)
    od, spec, points = insert_key_muxes(d, nets, key_seed)
    if mask:
        od, spec = apply_masking(od, points, key_seed if mask_seed is None else mask_seed)
    return od, spec


def attacker_view(d: Design) -> Design:
    """Strip provisioned secrets (mask bits) from a design, as an attacker would see it."""
    nodes = [n.with_params(bit=None) if n.kind == "mask" else n for n in d.datapath.nodes]
    return with_datapath(d, nodes, d.datapath.nets)


def points_from_design(d: Design) -> list[ObfuscationPoint]:
    """Reconstruct point records from the design's annotations (mask bits included)."""
    pts = []
    for mux in sorted(d.nodes_by_role("key_mux"), key=lambda n: n.params["point"]):
        pid = mux.params["point"]
        sel = mux.params["sel"]
        ins = mux.params["in"]
        mask_node = d.node_map.get(f"kmask_{pid}")
        if mask_node is not None:
            kidx = d.node_map[f"kmx_{pid}"].params["in"][0]
            kidx = int(kidx.split("_")[1])
            bit = mask_node.params["bit"]
            pts.append(ObfuscationPoint(pid, mux.out, mux.id, kidx, bit if bit is not None else 0,
                                        ins[1], True, bit if bit is not None else 0))
        else:
            kidx = int(sel.split("_")[1])
            ref = 0 if ins[0] == f"{mux.out}_pre" else 1
            pts.append(ObfuscationPoint(pid, mux.out, mux.id, kidx, ref, ins[1 - ref]))
    return pts


def provisioned_key(d: Design) -> list[int]:
    """The key a working device is provisioned with, read from its structure.

    Models the chip's own key storage when a harness needs to operate the
    device; attack logic itself never calls this.
    """
    bits = [0] * d.key_width
    for p in points_from_design(d):
        if p.masked and d.node_map[f"kmask_{p.point_id}"].params["bit"] is None:
            raise ObfuscationError("mask bits stripped; the provisioned key is unknown")
        bits[p.key_bit_index] = p.reference_bit
    return bits
