from __future__ import annotations

import json

import pytest

from dlockout.attacks import (
    AttackError,
    FaultSpec,
    Oracle,
    brute_force,
    dpa_attack,
    exhaustive_stream,
    fault_attack,
    golden_pairs,
    probe_vectors,
    random_stream,
)
from dlockout.lockout import LockoutState, harden
from dlockout.metrics import fault_trials
from dlockout.obfuscate import provisioned_key


@pytest.fixture(scope="module")
def golden16(fir16):
    return golden_pairs(fir16, probe_vectors(fir16, 0))


def _start_after(spec, n):
    """Exhaustive stream position that reaches the correct key after ``n`` wrong keys."""
    return (spec.key_int - n) % (1 << spec.width)


def test_streams():
    assert list(exhaustive_stream(2, 3)) == [3, 0, 1, 2]
    a = random_stream(16, 4)
    b = random_stream(16, 4)
    assert [next(a) for _ in range(5)] == [next(b) for _ in range(5)]


def test_probe_vectors_end_with_zero(fir16):
    v = probe_vectors(fir16, 3)
    assert len(v) == 9
    assert set(v[-1].values()) == {0}
    assert v == probe_vectors(fir16, 3)


def test_brute_force_unhardened_finds_key(obf16, golden16):
    od, spec = obf16
    r = brute_force(Oracle(od), exhaustive_stream(spec.width, _start_after(spec, 20)), 100, golden16)
    assert r.recovered_key == spec.key_hex
    assert r.attempts_used == 21
    assert not r.locked_out


def test_brute_force_locks_out_at_x(hard16, golden16):
    h, spec = hard16
    o = Oracle(h)
    r = brute_force(o, exhaustive_stream(spec.width, _start_after(spec, 20)), 100, golden16)
    assert r.locked_out and not r.success
    assert r.attempts_used == 5
    assert o.locked_out
    # the dead chip stays dead, even for the right key
    assert brute_force(o, [spec.key_int], 10, golden16).attempts_used == 0


def test_brute_force_within_budget(hard16, golden16):
    h, spec = hard16
    r = brute_force(Oracle(h), exhaustive_stream(spec.width, _start_after(spec, 3)), 100, golden16)
    assert r.recovered_key == spec.key_hex
    assert r.attempts_used == 4
    assert not r.locked_out


def test_brute_force_respects_budget(obf16, golden16):
    od, spec = obf16
    r = brute_force(Oracle(od), exhaustive_stream(spec.width, _start_after(spec, 20)), 7, golden16)
    assert r.attempts_used == 7 and not r.success


def test_brute_force_errors(obf16, golden16):
    o = Oracle(obf16[0])
    with pytest.raises(AttackError):
        brute_force(o, [0], 0, golden16)
    with pytest.raises(AttackError):
        brute_force(o, [0], 3, [])


def test_report_deterministic(hard16, golden16):
    h, spec = hard16
    runs = [brute_force(Oracle(h), random_stream(spec.width, 9), 50, golden16, seed=9) for _ in range(2)]
    assert runs[0].to_json(timing=False) == runs[1].to_json(timing=False)
    doc = json.loads(runs[0].to_json())
    assert "wall_clock_s" in doc and doc["strategy"] == "brute"
    assert "wall_clock_s" not in json.loads(runs[0].to_json(timing=False))


def test_oracle_hides_internals(hard16):
    h, _ = hard16
    o = Oracle(h)
    public = {n for n in dir(o) if not n.startswith("_")}
    assert public == {"key_width", "input_ports", "locked_out", "alarm", "inject", "query", "queries"}
    out = o.query(0, {p: 1 for p, _ in o.input_ports})
    assert set(out) == {p.name for p in h.outputs}


def test_oracle_starts_from_given_state(hard16):
    h, _ = hard16
    assert Oracle(h, LockoutState(5, 5)).locked_out


def test_fault_spec_validation():
    with pytest.raises(AttackError):
        FaultSpec((0,), 2)
    with pytest.raises(AttackError):
        FaultSpec((0,), 0, n_dev=0)
    with pytest.raises(AttackError):
        FaultSpec((0, 0), 0)
    with pytest.raises(AttackError):
        FaultSpec((0,), 0, fault_from_attempt=0)


def test_fault_attack_errors(obf16, hard16, golden16):
    with pytest.raises(AttackError, match="hardened"):
        fault_attack(obf16[0], FaultSpec((0,), 0), [0], golden16)
    h, _ = hard16
    with pytest.raises(AttackError, match="disagrees"):
        fault_attack(h, FaultSpec((0,), 0, X=3), [0], golden16)
    with pytest.raises(AttackError, match="not a comparator"):
        fault_attack(h, FaultSpec((99,), 0), [0], golden16)


def test_saf0_on_every_comparator_defeats_lockout(hard16, golden16):
    h, spec = hard16
    f = FaultSpec(tuple(p.point_id for p in spec.points), 0)
    r = fault_attack(h, f, exhaustive_stream(spec.width, _start_after(spec, 30)), golden16)
    assert r.recovered_key == spec.key_hex
    assert not r.locked_out and not r.alarm
    assert r.details["lockout_events"] == 0


def test_partial_saf0_still_locks(hard16, golden16):
    h, spec = hard16
    # faults on half the points: wrong keys that differ elsewhere still count
    f = FaultSpec(tuple(p.point_id for p in spec.points[:4]), 0, n_dev=2)
    r = fault_attack(h, f, exhaustive_stream(spec.width, _start_after(spec, 200)), golden16)
    assert not r.success
    assert r.details["copies_used"] == 2
    assert r.details["copies_locked"] == 2


def test_saf1_burns_copies(hard16, golden16):
    h, spec = hard16
    f = FaultSpec((spec.points[0].point_id,), 1, n_dev=3)
    r = fault_attack(h, f, exhaustive_stream(spec.width, _start_after(spec, 2)), golden16)
    # even the correct key is counted as a mismatch once its comparator is stuck at 1
    assert not r.success
    assert r.attempts_used == 15
    assert r.details["copies_locked"] == 3


def test_fault_from_later_attempt(hard16, golden16):
    h, spec = hard16
    f = FaultSpec(tuple(p.point_id for p in spec.points), 0, fault_from_attempt=3)
    r = fault_attack(h, f, exhaustive_stream(spec.width, _start_after(spec, 10)), golden16)
    assert r.success
    assert r.details["lockout_events"] == 2


def test_edu_aborts_fault_campaign(masked16, fir16):
    h, spec = masked16
    golden = golden_pairs(fir16, probe_vectors(fir16, 1))
    f = FaultSpec(tuple(p.point_id for p in spec.points), 0, n_dev=4)
    r = fault_attack(h, f, exhaustive_stream(spec.width, _start_after(spec, 30)), golden)
    assert r.alarm and r.details["aborted"]
    assert not r.success
    assert r.attempts_used == 1


def test_fault_report_carries_theory(hard16, golden16):
    h, spec = hard16
    r = fault_attack(h, FaultSpec((0,), 0, n_dev=2), [0, 1], golden16, budget=1)
    assert r.details["theoretical_trials"] == fault_trials(8, 2, 5)
    assert r.attempts_used == 1


def test_fault_attack_on_threshold_one(obf16, golden16):
    od, spec = obf16
    h = harden(od, spec.points, 1)
    r = fault_attack(h, FaultSpec((0,), 0), [spec.key_int], golden16)
    assert r.details["theoretical_trials"] is None
    assert r.success


def test_dpa_small_run(hard16):
    h, spec = hard16
    r = dpa_attack(h, provisioned_key(h), 1500, 0.5, seed=2, p=8, true_key=spec.key_int)
    assert r.details["key_guess"] == spec.key_hex
    assert r.details["correct_bits"] == 8
    assert r.recovered_key == spec.key_hex
    assert r.attempts_used == 1
    assert not r.locked_out


def test_dpa_errors(hard16):
    h, spec = hard16
    with pytest.raises(AttackError):
        dpa_attack(h, spec.key_int, 0, 1.0, 0)
    with pytest.raises(AttackError):
        dpa_attack(h, spec.key_int, 10, -1.0, 0)
