"""Design-lockout hardening passes and the persistent attempt counter.

Hardening pipeline on a key-obfuscated design::

    attach_comparators -> attach_checker(X) -> harden_controller [-> attach_edu]

Comparators are 1-bit XORs whose output is 1 exactly when a key MUX steers
its decoy operand.  The checker samples them once per schedule pass in the
first control step and drives ``dp_comp`` (OK / PARTIAL / FULL) into the
controller, which reverts to the reset state on PARTIAL and falls into an
absorbing blackhole state on FULL.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Any, Mapping, Sequence

from .ir import (
    DP_FULL,
    DP_OK,
    DP_PARTIAL,
    ControllerFsm,
    Design,
    DesignError,
    Net,
    Node,
    Transition,
    fresh_name,
    with_datapath,
)

DEFAULT_THRESHOLD = 5
XOR_DELAY_NS = 0.3
BLACKHOLE = "BLACKHOLE"


class Phase(str, enum.Enum):
    FREE = "FREE"
    PARTIAL = "PARTIAL"
    FULL = "FULL"


@dataclass(frozen=True)
class LockoutState:
    """Persisted attempt counter (models non-volatile storage)."""

    counter: int = 0
    threshold: int = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.threshold < 1:
            raise ValueError(f"threshold must be >= 1, got {self.threshold}")
        if not 0 <= self.counter <= self.threshold:
            raise ValueError(f"counter {self.counter} outside [0, {self.threshold}]")

    @property
    def phase(self) -> Phase:
        if self.counter == 0:
            return Phase.FREE
        if self.counter >= self.threshold:
            return Phase.FULL
        return Phase.PARTIAL

    def to_dict(self) -> dict[str, Any]:
        return {"counter": self.counter, "threshold": self.threshold, "phase": self.phase.value}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "LockoutState":
        """Strict decode; any inconsistency raises ValueError."""
        if not isinstance(data, Mapping):
            raise ValueError("lockout state must be an object")
        counter, threshold = data.get("counter"), data.get("threshold")
        if type(counter) is not int or type(threshold) is not int:
            raise ValueError("counter and threshold must be integers")
        state = cls(counter, threshold)
        if data.get("phase") != state.phase.value:
            raise ValueError(f"phase {data.get('phase')!r} inconsistent with counter {counter}/{threshold}")
        return state


def lockout_step(s: LockoutState, any_mismatch: bool) -> LockoutState:
    """One key check: a mismatch bumps the counter unless already FULL."""
    if any_mismatch and s.phase is not Phase.FULL:
        return replace(s, counter=s.counter + 1)
    return s


def counter_width(threshold: int) -> int:
    return max(1, math.ceil(math.log2(threshold + 1)))


# ---------------------------------------------------------------------------
# helpers


def key_muxes(d: Design) -> list[Node]:
    return sorted(d.nodes_by_role("key_mux"), key=lambda n: n.params["point"])


def _tie(d: Design, nodes: list[Node], nets: list[Net], bit: int) -> str:
    """Shared constant net for a 0/1 tie, created on first use."""
    net_id = f"tie{bit}"
    if net_id in {n.id for n in nets}:
        return net_id
    nets.append(Net(net_id, 1))
    nodes.append(Node(f"tie{bit}_cell", "const", {"value": bit, "out": net_id, "role": "tie"}))
    return net_id


def _point_table(points) -> dict[int, Any]:
    return {p.point_id: p for p in points}


def first_schedule_state(d: Design) -> str:
    c = d.controller
    outs = c.successors(c.reset)
    if len(outs) != 1 or outs[0].when or outs[0].dst == c.reset:
        raise DesignError("controller lacks a distinguishable first schedule state after reset")
    return outs[0].dst


# ---------------------------------------------------------------------------
# passes


def attach_comparators(d: Design, points: Sequence) -> Design:
    """Annotate every obfuscation point with a key-check XOR.

    The comparator reads the point's key bit and its reference: a tie cell
    for unmasked points, the point's mask cell for masked ones.
    """
    if d.key_width == 0 or not key_muxes(d):
        raise DesignError("design is not key-obfuscated")
    if d.nodes_by_role("comparator"):
        raise DesignError("obfuscation points already annotated with comparators")
    nodes, nets = list(d.datapath.nodes), list(d.datapath.nets)
    table = _point_table(points)
    for mux in key_muxes(d):
        pid = mux.params["point"]
        if pid not in table:
            raise DesignError(f"no point record for key MUX {mux.id!r}")
        p = table[pid]
        key_net = f"key_{p.key_bit_index}"
        ref = f"mask_{pid}" if p.masked else _tie(d, nodes, nets, p.reference_bit)
        out = fresh_name({n.id for n in nets}, f"cmp_{pid}")
        nets.append(Net(out, 1))
        nodes.append(Node(f"kcmp_{pid}", "fu", {
            "op": "xor", "delay_ns": XOR_DELAY_NS, "in": [key_net, ref], "out": out,
            "role": "comparator", "point": pid,
        }))
    return with_datapath(d, nodes, nets)


def attach_checker(d: Design, threshold: int = DEFAULT_THRESHOLD) -> Design:
    """Add the attempt counter and the checker FSM driving ``dp_comp``."""
    if threshold < 1:
        raise ValueError(f"threshold X must be >= 1, got {threshold}")
    comps = sorted(d.nodes_by_role("comparator"), key=lambda n: n.params["point"])
    if not comps:
        raise DesignError("attach comparators before the checker")
    if d.dlockout is not None:
        raise DesignError("design already hardened")
    check_state = first_schedule_state(d)
    nodes, nets = list(d.datapath.nodes), list(d.datapath.nets)
    nodes.append(Node("lockout_counter", "counter", {
        "threshold": threshold, "width": counter_width(threshold),
    }))
    nets.append(Net("dp_comp", 2))
    nodes.append(Node("checker", "checker", {
        "comparators": [c.out for c in comps], "edu": [], "check_state": check_state,
        "counter": "lockout_counter", "out": "dp_comp",
    }))
    block = {"threshold": threshold, "checker": "checker", "counter": "lockout_counter",
             "edu": False, "blackhole_state": None}
    return with_datapath(d, nodes, nets, dlockout=block)


def harden_controller(d: Design) -> Design:
    """Branch the first schedule step on ``dp_comp`` and add the blackhole state."""
    if d.dlockout is None:
        raise DesignError("attach the checker before hardening the controller")
    if d.dlockout.get("blackhole_state"):
        raise DesignError("controller already hardened")
    c = d.controller
    s1 = first_schedule_state(d)
    outs = c.successors(s1)
    if len(outs) != 1 or outs[0].when:
        raise DesignError(f"first schedule state {s1!r} must have a single unconditional successor")
    s2 = outs[0].dst
    bh = fresh_name(c.states, BLACKHOLE)
    trans = [t for t in c.transitions if t.src != s1]
    trans += [
        Transition(s1, s2, (("dp_comp", DP_OK),)),
        Transition(s1, c.reset, (("dp_comp", DP_PARTIAL),)),
        Transition(s1, bh, (("dp_comp", DP_FULL),)),
        Transition(s1, bh, (("dp_comp", 3),)),
        Transition(bh, bh),
    ]
    words = dict(c.control_words)
    words[bh] = {}
    ctrl = ControllerFsm(c.states + (bh,), c.reset, tuple(trans), words)
    block = dict(d.dlockout, blackhole_state=bh)
    return replace(d, controller=ctrl, dlockout=block)


def attach_edu(d: Design, points: Sequence | None = None) -> Design:
    """Duplicate each comparator and cross-check the pair.

    ``edu_i = c_i (as observed) XOR shadow_i``; any 1 raises the checker's
    fault alarm.  The shadow reads the same key and reference nets as the
    primary comparator, so ``points`` is accepted only for symmetry.
    """
    if not d.nodes_by_role("comparator"):
        raise DesignError("attach comparators before the EDU")
    if d.nodes_by_role("shadow_comparator") or (d.dlockout and d.dlockout.get("edu")):
        raise DesignError("EDU already attached")
    nodes, nets = list(d.datapath.nodes), list(d.datapath.nets)
    edu_nets = []
    for cmp_node in sorted(d.nodes_by_role("comparator"), key=lambda n: n.params["point"]):
        pid = cmp_node.params["point"]
        shadow = fresh_name({n.id for n in nets}, f"shd_{pid}")
        nets.append(Net(shadow, 1))
        nodes.append(Node(f"kshd_{pid}", "fu", {
            "op": "xor", "delay_ns": XOR_DELAY_NS, "in": list(cmp_node.params["in"]), "out": shadow,
            "role": "shadow_comparator", "point": pid,
        }))
        edu = fresh_name({n.id for n in nets}, f"edu_{pid}")
        nets.append(Net(edu, 1))
        nodes.append(Node(f"kedu_{pid}", "fu", {
            "op": "xor", "delay_ns": XOR_DELAY_NS, "in": [cmp_node.out, shadow], "out": edu,
            "role": "edu", "point": pid,
        }))
        edu_nets.append(edu)
    if d.dlockout is not None:
        chk = d.node_map[d.dlockout["checker"]]
        nodes = [n.with_params(edu=edu_nets) if n.id == chk.id else n for n in nodes]
        return with_datapath(d, nodes, nets, dlockout=dict(d.dlockout, edu=True))
    return with_datapath(d, nodes, nets)


def harden(d: Design, points: Sequence, threshold: int = DEFAULT_THRESHOLD, edu: bool = False) -> Design:
    """Full hardening pipeline on an (optionally masked) obfuscated design."""
    h = attach_comparators(d, points)
    h = attach_checker(h, threshold)
    h = harden_controller(h)
    if edu:
        h = attach_edu(h)
    return h
