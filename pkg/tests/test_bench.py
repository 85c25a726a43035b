from __future__ import annotations

import random

import pytest

from dlockout.bench import BENCH_WIDTHS, KINDS, generate_benchmark
from dlockout.ir import compute_slack, serialize_design, validate_design
from dlockout.obfuscate import _eligible_nets


def _triples(n=100):
    rng = random.Random(2024)
    return [(rng.choice(KINDS), rng.randrange(4, 40), rng.randrange(10_000)) for _ in range(n)]


@pytest.mark.parametrize("kind,size,seed", _triples())
def test_generated_designs_are_valid(kind, size, seed):
    d = generate_benchmark(kind, size, seed)
    assert not validate_design(d)
    assert len(d.controller.states) >= 4
    slack = compute_slack(d)
    insertable = [n for n in _eligible_nets(d) if slack[n] > 0]
    assert len(insertable) >= size


def test_deterministic():
    assert serialize_design(generate_benchmark("fir", 8, 1)) == serialize_design(generate_benchmark("fir", 8, 1))


def test_seed_changes_design():
    a, b = generate_benchmark("fir", 8, 1), generate_benchmark("fir", 8, 2)
    assert serialize_design(a) != serialize_design(b)
    assert not validate_design(a) and not validate_design(b)


def test_elliptic_example_valid():
    assert not validate_design(generate_benchmark("elliptic", 16, 7))


@pytest.mark.parametrize("width", BENCH_WIDTHS)
def test_widths(width):
    d = generate_benchmark("lattice", 8, 0, width=width)
    assert {n.width for n in d.datapath.nets} == {width}


def test_state_count_parameter():
    d = generate_benchmark("fft-like", 12, 0, n_states=6)
    assert len(d.controller.states) == 6


@pytest.mark.parametrize("args,match", [
    (("fir", 3, 0), "size"),
    (("nope", 8, 0), "unknown benchmark"),
])
def test_rejects_bad_arguments(args, match):
    with pytest.raises(ValueError, match=match):
        generate_benchmark(*args)


def test_rejects_bad_width():
    with pytest.raises(ValueError, match="width"):
        generate_benchmark("fir", 8, 0, width=12)


def test_rejects_too_few_states():
    with pytest.raises(ValueError):
        generate_benchmark("fir", 8, 0, n_states=3)


def test_toy_design_small_inputs(toy):
    assert sum(p.width for p in toy.inputs) <= 12
    assert not validate_design(toy)
