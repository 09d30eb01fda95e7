"""First-layer multiplication/weight counts and a NAND-gate area estimate.

Only multipliers are costed; adders, accumulators and memory are left out, and
energy is taken to scale like area. The float multiplier constant is not
published; 3820 gates is the value for which the relative areas round to
0.21 % (FPID, DBI) and 1.86 % (BIL, K=64) on the PAMAP2 first layer. Any value
in roughly [3813, 3834] does the same.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .layers import conv2d_reference

APPROACHES = ("baseline", "fpid", "dbi", "bil")
U64_MAX = 2**64 - 1


@dataclass(frozen=True)
class FirstLayerDims:
    H: int
    W: int
    C: int
    M: int
    F_elems: int
    I: int
    K: int | None = None
    kernel: tuple[int, int] | None = None

    def __post_init__(self):
        for name in ("H", "W", "C", "M", "F_elems", "I"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.K is not None and self.K < 1:
            raise ValueError("K must be positive")
        if self.kernel is not None and self.kernel[0] * self.kernel[1] != self.F_elems:
            raise ValueError("kernel shape does not match F_elems")

    @property
    def kernel_shape(self) -> tuple[int, int]:
        """Explicit kernel, else F x F for square counts and 1 x F_elems otherwise."""
        if self.kernel is not None:
            return tuple(self.kernel)
        f = math.isqrt(self.F_elems)
        return (f, f) if f * f == self.F_elems else (1, self.F_elems)


@dataclass(frozen=True)
class GateCostTable:
    gates_binary_mult: float = 1.0
    gates_fixed_by_binary_mult: float | None = None  # None means M gates
    gates_float_mult: float = 3820.0

    def __post_init__(self):
        vals = [self.gates_binary_mult, self.gates_float_mult]
        if self.gates_fixed_by_binary_mult is not None:
            vals.append(self.gates_fixed_by_binary_mult)
        if min(vals) <= 0:
            raise ValueError("gate costs must be positive")

    def per_mult(self, approach: str, M: int) -> float:
        if approach == "baseline":
            return self.gates_float_mult
        if approach == "fpid":
            return float(M) if self.gates_fixed_by_binary_mult is None else self.gates_fixed_by_binary_mult
        return self.gates_binary_mult


@dataclass(frozen=True)
class CostReport:
    approach: str
    mult_count: int
    weight_count: int
    gate_count: float
    relative_area_pct: float = float("nan")

    @property
    def relative_energy_pct(self) -> float:
        return self.relative_area_pct


def _check_approach(approach: str, d: FirstLayerDims):
    if approach not in APPROACHES:
        raise ValueError(f"unknown approach {approach!r}")
    if approach == "bil" and d.K is None:
        raise ValueError("K required for bil")


def _u64(value: int, what: str) -> int:
    if value > U64_MAX:
        raise OverflowError(f"{what} = {value} does not fit in 64 bits")
    return value


def mult_count(approach: str, d: FirstLayerDims) -> int:
    _check_approach(approach, d)
    base = d.H * d.W * d.C * d.F_elems * d.I
    if approach in ("baseline", "fpid"):
        n = base
    elif approach == "dbi":
        n = base * d.M
    else:
        n = d.H * d.W * d.K * (d.M * d.C + d.F_elems * d.I)
    return _u64(n, "multiplication count")


def weight_count(approach: str, d: FirstLayerDims) -> int:
    _check_approach(approach, d)
    if approach in ("baseline", "fpid"):
        n = d.C * d.F_elems * d.I
    elif approach == "dbi":
        n = d.C * d.F_elems * d.I * d.M
    else:
        n = d.C * d.M * d.K + d.F_elems * d.I * d.K
    return _u64(n, "weight count")


def gate_count(approach: str, d: FirstLayerDims, gates: GateCostTable = GateCostTable()) -> float:
    return mult_count(approach, d) * gates.per_mult(approach, d.M)


def relative_area(reports: list[CostReport]) -> list[CostReport]:
    """Percent of the baseline gate count for every report."""
    base = next((r for r in reports if r.approach == "baseline"), None)
    if base is None:
        raise ValueError("relative area needs a baseline report")
    if base.gate_count <= 0:
        raise ValueError("baseline gate count is zero")
    return [CostReport(r.approach, r.mult_count, r.weight_count, r.gate_count,
                       100.0 * r.gate_count / base.gate_count) for r in reports]


def cost_table(d: FirstLayerDims, gates: GateCostTable = GateCostTable(), approaches=None) -> list[CostReport]:
    if approaches is None:
        approaches = [a for a in APPROACHES if a != "bil" or d.K is not None]
    if "baseline" not in approaches:
        approaches = ["baseline", *approaches]
    reports = [CostReport(a, mult_count(a, d), weight_count(a, d), gate_count(a, d, gates)) for a in approaches]
    return relative_area(reports)


def instrumented_counts(approach: str, d: FirstLayerDims) -> tuple[int, int]:
    """(multiplications, weights) measured by running the reference convolution
    on a zero input shaped like the approach's first layer."""
    _check_approach(approach, d)
    kh, kw = d.kernel_shape
    if approach in ("baseline", "fpid"):
        stages = [(d.C, (kh, kw), d.I)]
    elif approach == "dbi":
        stages = [(d.C * d.M, (kh, kw), d.I)]
    else:
        stages = [(d.C * d.M, (1, 1), d.K), (d.K, (kh, kw), d.I)]
    mults = weights = 0
    for cin, (a, b), n_out in stages:
        w = np.zeros((a, b, cin, n_out))
        _, m = conv2d_reference(np.zeros((d.H, d.W, cin)), w, count=True)
        mults += m
        weights += w.size
    return mults, weights


def format_table(reports: list[CostReport], fmt: str = "text") -> str:
    header = ["approach", "mult_count", "weight_count", "gate_count", "relative_area_pct"]
    rows = [[r.approach, r.mult_count, r.weight_count, f"{r.gate_count:.0f}", f"{r.relative_area_pct:.2f}"]
            for r in reports]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
        return buf.getvalue()
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(n) for x, n in zip(r, widths)) for r in [header, *rows]]
    return "\n".join(lines) + "\n"


def calibration_interval(d: FirstLayerDims, targets: dict[str, float], step: float = 0.5,
                         lo: float = 100.0, hi: float = 10000.0) -> tuple[float, float] | None:
    """Range of float-multiplier gate costs for which every approach's relative
    area rounds (2 decimals) to its target percentage. Scanned on a grid."""
    ok = []
    for g in np.arange(lo, hi + step, step):
        reports = cost_table(d, GateCostTable(gates_float_mult=float(g)))
        pct = {r.approach: r.relative_area_pct for r in reports}
        if all(round(pct[a], 2) == t for a, t in targets.items()):
            ok.append(float(g))
    return (min(ok), max(ok)) if ok else None


def pamap2_dims(M: int = 8, K: int | None = 64) -> FirstLayerDims:
    """First layer of the PAMAP2 model: 7 x 100 x 1 input, 24 filters of 1 x 3."""
    return FirstLayerDims(H=7, W=100, C=1, M=M, F_elems=3, I=24, K=K, kernel=(1, 3))
