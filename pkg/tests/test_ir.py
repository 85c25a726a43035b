from __future__ import annotations

import json
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dlockout.bench import KINDS, DesignBuilder, generate_benchmark, linear_controller
from dlockout.ir import (
    DesignError,
    DesignSyntaxError,
    Net,
    Node,
    compute_slack,
    design_to_dict,
    fresh_name,
    parse_design,
    serialize_design,
    structural_counts,
    validate_design,
    with_datapath,
)
from dlockout.lockout import harden
from dlockout.obfuscate import obfuscate
from oracles import enumerate_paths, random_dag


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 10))
def test_slack_matches_path_enumeration(seed, n_fu):
    d = random_dag(seed, n_fu)
    assert not validate_design(d)
    s = compute_slack(d)
    paths = enumerate_paths(d)
    for net in d.net_map:
        longest = max((length for nets, length in paths if net in nets), default=0.0)
        assert s.path_through(net) == pytest.approx(longest)
        assert s[net] == pytest.approx(d.clock_period_ns - longest)
    assert s.critical_path_ns == pytest.approx(max(length for _, length in paths))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(KINDS), st.integers(0, 50), st.sampled_from([8, 16]))
def test_round_trip(kind, seed, width):
    d = generate_benchmark(kind, 12, seed, width=width)
    text = serialize_design(d)
    assert parse_design(text) == d
    assert serialize_design(parse_design(text)) == text


def test_round_trip_hardened(masked16):
    h, _ = masked16
    text = serialize_design(h)
    back = parse_design(text)
    assert back == h
    assert back.dlockout["edu"] is True


def test_serialization_header(fir16):
    data = design_to_dict(fir16)
    assert data["ir_version"] == 1
    assert data["key_width"] == 0


def test_malformed_json_reports_position():
    with pytest.raises(DesignSyntaxError) as e:
        parse_design('{"name": "x",\n  oops}')
    assert e.value.line == 2


def test_schema_mismatch(fir16):
    data = design_to_dict(fir16)
    del data["controller"]
    with pytest.raises(DesignSyntaxError, match="schema"):
        parse_design(json.dumps(data))


def _broken(d, fn):
    nodes, nets = fn(list(d.datapath.nodes), list(d.datapath.nets))
    return with_datapath(d, nodes, nets)


def test_multiple_drivers(fir16):
    def fn(nodes, nets):
        first = next(n for n in nodes if n.kind == "fu")
        return nodes + [Node("dup", "fu", dict(first.params))], nets
    rep = validate_design(_broken(fir16, fn))
    assert rep.of_kind("multiple-drivers")


def test_undeclared_net(fir16):
    def fn(nodes, nets):
        first = next(n for n in nodes if n.kind == "fu")
        return [first.with_params(**{"in": ["ghost", first.params["in"][1]]}) if n is first else n
                for n in nodes], nets
    assert validate_design(_broken(fir16, fn)).of_kind("undeclared-net")


def test_combinational_cycle_detected(fir16):
    def fn(nodes, nets):
        a, b = [n for n in nodes if n.kind == "fu"][:2]
        nets = nets + [Net("loop_a", 8), Net("loop_b", 8)]
        nodes = nodes + [
            Node("la", "fu", {"op": "add", "delay_ns": 1.0, "in": ["loop_b", a.out], "out": "loop_a"}),
            Node("lb", "fu", {"op": "add", "delay_ns": 1.0, "in": ["loop_a", b.out], "out": "loop_b"}),
        ]
        return nodes, nets
    rep = validate_design(_broken(fir16, fn))
    cyc = rep.of_kind("cycle")
    assert cyc and {"loop_a", "loop_b"} <= set(cyc[0].subjects)
    with pytest.raises(DesignError):
        compute_slack(_broken(fir16, fn))


def test_width_mismatch(fir16):
    def fn(nodes, nets):
        first = next(n for n in nodes if n.kind == "fu")
        return nodes, [Net(n.id, 4) if n.id == first.out else n for n in nets]
    assert validate_design(_broken(fir16, fn)).of_kind("width")


def test_timing_violation(fir16):
    from dataclasses import replace

    rep = validate_design(replace(fir16, clock_period_ns=0.5))
    assert rep.of_kind("timing")


def test_fresh_name():
    assert fresh_name({"a", "a_1"}, "a") == "a_2"
    assert fresh_name(set(), "b") == "b"


def test_structural_counts_after_hardening(hard16, fir16):
    h, spec = hard16
    c, b = structural_counts(h), structural_counts(fir16)
    assert c["key_mux"] == c["comparator"] == 8
    assert c["mux"] - b["mux"] == 8
    assert c["states"] == b["states"] + 1
    assert c["key_width"] == 8


def test_obfuscated_design_still_valid(obf16):
    od, _ = obf16
    assert not validate_design(od)
    assert not validate_design(harden(od, obf16[1].points, 3))


def test_parse_rejects_invalid_semantics(fir16):
    data = design_to_dict(fir16)
    data["controller"]["reset"] = "NOPE"
    with pytest.raises(DesignError):
        parse_design(json.dumps(data))


def test_obfuscation_keeps_round_trip(fir16):
    od, _ = obfuscate(fir16, 4, key_seed=7)
    assert parse_design(serialize_design(od)) == od


def _chain(delays_by_branch, clock=10.0):
    b = DesignBuilder("hand", clock)
    q = b.reg("ri", b.input("x", 8), 8, enable=False)
    ends = []
    for bi, delays in enumerate(delays_by_branch):
        net = q
        for k, dl in enumerate(delays):
            net = b.fu(f"b{bi}_{k}", "add", [net, q], 8, delay=dl)
        ends.append(net)
    if len(ends) > 1:
        ends = [b.fu("join", "xor", ends, 8, delay=0.0)]
    b.output("y", b.reg("ro", ends[0], 8, enable=False), 8)
    states, trans = linear_controller(4)
    return b.build(states, trans, {s: {} for s in states})


def test_slack_two_unit_chain():
    d = _chain([[3.0, 3.0]])
    s = compute_slack(d)
    assert s["b0_0_o"] == pytest.approx(4.0)
    assert s["b0_1_o"] == pytest.approx(4.0)


def test_slack_unit_filling_the_clock():
    s = compute_slack(_chain([[10.0]]))
    assert s["b0_0_o"] == pytest.approx(0.0)


def test_slack_parallel_branches():
    s = compute_slack(_chain([[2.0], [8.0]]))
    assert s["b0_0_o"] - s["b1_0_o"] == pytest.approx(6.0)
    assert s["b1_0_o"] == pytest.approx(2.0)
