"""Analytic security metrics and regeneration of the reference tables.

Probabilities are kept as exact ``Fraction`` values: 1/(128!*2^128) is far
below the smallest double, so nothing here ever goes through float until a
value is rendered.
"""

from __future__ import annotations

import math
import re
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

# ---------------------------------------------------------------------------
# exact scientific numbers


def _floor_log10(v: Fraction) -> int:
    """Exact floor(log10(v)) for v > 0."""
    n, d = v.numerator, v.denominator
    e = len(str(n)) - len(str(d))
    # 10^e <= v < 10^(e+1) after at most one correction either way
    while Fraction(10) ** e > v:
        e -= 1
    while Fraction(10) ** (e + 1) <= v:
        e += 1
    return e


_SCI_RE = re.compile(r"^\s*([+-]?\d+(?:\.\d*)?)[eE]([+-]?\d+)\s*$")


@dataclass(frozen=True)
class SciNumber:
    """An exact nonnegative rational with fixed-exponent rendering.

    ``render(exp, decimals)`` prints the value as ``mantissa e exp`` with a
    fixed exponent, e.g. ``0.08e-44``.
    """

    value: Fraction

    def __post_init__(self):
        if not isinstance(self.value, Fraction):
            object.__setattr__(self, "value", Fraction(self.value))
        if self.value < 0:
            raise ValueError("SciNumber holds nonnegative values only")

    @property
    def log10(self) -> float:
        if self.value == 0:
            return -math.inf
        return math.log10(self.value.numerator) - math.log10(self.value.denominator)

    @property
    def exponent(self) -> int:
        """floor(log10(value))."""
        if self.value == 0:
            return 0
        return _floor_log10(self.value)

    def mantissa(self, exp: int) -> Fraction:
        return self.value / Fraction(10) ** exp

    def render(self, exp: int | None = None, decimals: int = 3, mode: str = "round") -> str:
        if exp is None:
            exp = self.exponent
        scaled = self.mantissa(exp) * 10 ** decimals
        if mode == "round":
            digits = math.floor(scaled + Fraction(1, 2))
        elif mode == "truncate":
            digits = math.floor(scaled)
        else:
            raise ValueError(f"unknown rounding mode {mode!r}")
        whole, frac = divmod(digits, 10 ** decimals)
        body = f"{whole}.{frac:0{decimals}d}" if decimals else f"{whole}"
        return f"{body}e{exp}"

    def __str__(self) -> str:
        return self.render()

    def __float__(self) -> float:
        return float(self.value)

    @classmethod
    def parse(cls, text: str) -> "SciNumber":
        m = _SCI_RE.match(text)
        if not m:
            raise ValueError(f"not a scientific number: {text!r}")
        return cls(Fraction(m.group(1)) * Fraction(10) ** int(m.group(2)))

    def close_to(self, printed: str) -> bool:
        """Within one unit in the last digit of ``printed``."""
        m = _SCI_RE.match(printed)
        if not m:
            raise ValueError(f"not a scientific number: {printed!r}")
        mant, exp = m.group(1), int(m.group(2))
        decimals = len(mant.split(".")[1]) if "." in mant else 0
        unit = Fraction(10) ** (exp - decimals)
        return abs(self.value - SciNumber.parse(printed).value) <= unit


# ---------------------------------------------------------------------------
# power-analysis formulas


def correlation_r0(p: int, q: int) -> float:
    """Correlation between MUX-input switching and MUX power for p of q bits switching."""
    if p < 1 or q < 1:
        raise ValueError("p and q must be >= 1")
    if p > q:
        raise ValueError(f"p ({p}) must not exceed q ({q})")
    return math.sqrt(p / q)


def mtd0(r0: float, C: float = 1.0) -> float:
    if r0 <= 0:
        raise ValueError("r0 must be > 0")
    if C <= 0:
        raise ValueError("C must be > 0")
    return C / r0 ** 2


def mtd1(M: float, N: float, r1_sq: float, mtd0_value: float) -> float:
    for name, v in (("M", M), ("N", N), ("r1_sq", r1_sq), ("mtd0", mtd0_value)):
        if v <= 0:
            raise ValueError(f"{name} must be > 0, got {v}")
    return M * N / r1_sq * mtd0_value


# ---------------------------------------------------------------------------
# key-extraction probability


def key_prob(m: int, n: int) -> SciNumber:
    """P(m, n) = 1 / (n! * 2^m), exactly."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    return SciNumber(Fraction(1, math.factorial(n) * 2 ** m))


def attempt_prob(K: int, X: int, P: SciNumber | Fraction | float, standard: bool = False) -> SciNumber:
    """f(K, X, P).

    The default is the reference form ``C(X,K) * P * (1-P)``.  ``standard``
    switches to the binomial pmf ``C(X,K) * P^K * (1-P)^(X-K)``.
    """
    if X < 1 or K < 1:
        raise ValueError("K and X must be >= 1")
    if K > X:
        raise ValueError(f"K ({K}) must not exceed X ({X})")
    p = P.value if isinstance(P, SciNumber) else Fraction(P)
    if not 0 <= p <= 1:
        raise ValueError("P must lie in [0, 1]")
    if standard:
        return SciNumber(math.comb(X, K) * p ** K * (1 - p) ** (X - K))
    return SciNumber(math.comb(X, K) * p * (1 - p))


def fault_trials(m: int, n_dev: int, X: int) -> int:
    """ceil(2^m / (n_dev * (X - 1)))."""
    if n_dev < 1:
        raise ValueError("n_dev must be >= 1")
    if X < 2:
        raise ValueError("X must be >= 2 (X - 1 attempts per copy are usable)")
    if m < 0:
        raise ValueError("m must be >= 0")
    return -(-(2 ** m) // (n_dev * (X - 1)))


# ---------------------------------------------------------------------------
# table regeneration

# (M, N, q, p, r1_sq, printed MTD1)
TABLE_III = (
    (32, 4, 32, 8, 0.060, 8533),
    (32, 4, 32, 16, 0.028, 9142),
    (32, 4, 32, 32, 0.011, 12800),
    (32, 5, 32, 8, 0.055, 11636),
    (32, 5, 32, 16, 0.022, 14545),
    (32, 5, 32, 32, 0.009, 17777),
    (32, 6, 32, 8, 0.051, 15058),
    (32, 6, 32, 16, 0.020, 19200),
    (32, 6, 32, 32, 0.007, 27428),
)

# (m, n, printed P, X, printed f for K = 1..X)
TABLE_IV = (
    (32, 32, "0.08e-44", 5, ("0.4e-44", "0.8e-44", "0.8e-44", "0.4e-44", "0.08e-44")),
    (64, 64, "0.43e-108", 5, ("2.15e-108", "4.3e-108", "4.3e-108", "2.15e-108", "0.43e-108")),
    (128, 128, "0.07e-253", 5, ("0.35e-253", "0.7e-253", "0.7e-253", "0.35e-253", "0.07e-253")),
)

MTD_TOLERANCE = 1


def _decimals(printed: str) -> tuple[int, int]:
    mant, exp = printed.lower().split("e")
    return (len(mant.split(".")[1]) if "." in mant else 0), int(exp)


@dataclass(frozen=True)
class TableCell:
    table: str
    label: str
    computed: str
    printed: str
    ok: bool
    exact: Any = None

    def to_dict(self) -> dict[str, Any]:
        return {"table": self.table, "label": self.label, "computed": self.computed,
                "printed": self.printed, "ok": self.ok}


@dataclass(frozen=True)
class TablesReport:
    table_iii: tuple[TableCell, ...]
    table_iv: tuple[TableCell, ...]
    seconds: float

    @property
    def flagged(self) -> list[TableCell]:
        return [c for c in self.table_iii + self.table_iv if not c.ok]

    def to_dict(self) -> dict[str, Any]:
        return {
            "table_iii": [c.to_dict() for c in self.table_iii],
            "table_iv": [c.to_dict() for c in self.table_iv],
            "flagged": [c.label for c in self.flagged],
            "seconds": self.seconds,
        }


def table_iii_rows(C: float = 1.0) -> list[TableCell]:
    cells = []
    for M, N, q, p, r1_sq, printed in TABLE_III:
        m0 = mtd0(correlation_r0(p, q), C)
        val = mtd1(M, N, r1_sq, m0)
        got = round(val)
        cells.append(TableCell(
            "III", f"M={M} N={N} q={q} p={p} r1^2={r1_sq:.3f} MTD0={m0:g}",
            str(got), str(printed), abs(got - printed) <= MTD_TOLERANCE, val,
        ))
    return cells


def table_iv_rows(mode: str = "round") -> list[TableCell]:
    """Each cell is rendered at the printed exponent and precision.

    A cell matches when the exact value is within one unit of the printed
    value's last digit.
    """
    cells = []
    for m, n, p_printed, X, f_printed in TABLE_IV:
        P = key_prob(m, n)
        dec, exp = _decimals(p_printed)
        cells.append(TableCell("IV", f"P({m},{n})", P.render(exp, dec, mode), p_printed,
                               P.close_to(p_printed), P))
        for K, printed in enumerate(f_printed, start=1):
            f = attempt_prob(K, X, P)
            dec, exp = _decimals(printed)
            cells.append(TableCell("IV", f"f(K={K},X={X},P({m},{n}))", f.render(exp, dec, mode), printed,
                                   f.close_to(printed), f))
    return cells


def reproduce_tables(C: float = 1.0) -> TablesReport:
    t0 = time.perf_counter()
    iii = tuple(table_iii_rows(C))
    iv = tuple(table_iv_rows())
    return TablesReport(iii, iv, time.perf_counter() - t0)


def format_tables(report: TablesReport, fmt: str = "text") -> str:
    rows = [(c.table, c.label, c.computed, c.printed, "ok" if c.ok else "FLAG")
            for c in report.table_iii + report.table_iv]
    if fmt == "csv":
        import csv
        import io

        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["table", "cell", "computed", "printed", "status"])
        w.writerows(rows)
        return buf.getvalue()
    if fmt == "json":
        import json

        return json.dumps(report.to_dict(), indent=2) + "\n"
    widths = [max(len(r[i]) for r in rows + [("table", "cell", "computed", "printed", "status")])
              for i in range(5)]
    header = ("table", "cell", "computed", "printed", "status")
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(r, widths)) for r in rows]
    lines.append(f"{len(report.flagged)} flagged cell(s)")
    return "\n".join(lines) + "\n"
