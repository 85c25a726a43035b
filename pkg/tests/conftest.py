from __future__ import annotations

import pytest

from dlockout.bench import generate_benchmark, toy_design
from dlockout.lockout import harden
from dlockout.obfuscate import obfuscate

# criterion number -> (passed, detail), filled in by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def fir16():
    return generate_benchmark("fir", 16, 0)


@pytest.fixture(scope="session")
def obf16(fir16):
    return obfuscate(fir16, 8, key_seed=1)


@pytest.fixture(scope="session")
def hard16(obf16):
    od, spec = obf16
    return harden(od, spec.points, 5), spec


@pytest.fixture(scope="session")
def masked16(fir16):
    od, spec = obfuscate(fir16, 8, key_seed=1, mask=True, mask_seed=2)
    return harden(od, spec.points, 5, edu=True), spec


@pytest.fixture(scope="session")
def toy():
    # 2 x 4-bit inputs: small enough for exhaustive checks
    return toy_design(2, 4, 6, seed=3)
