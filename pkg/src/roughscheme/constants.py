"""Limit-covariance constants Q(k), P(k), Q, P of the centred Levy-area CLT.

Q(k) and P(k) are 2-D Young integrals of the fBm covariance against its own
rectangular increments over the unit square.  We discretise them by
Riemann-Stieltjes sums on an N x N grid of cells: the integrator is the
rectangular increment of R over each cell (closed form, never touching the
singular density on the diagonal) and the integrand is averaged over the
four cell corners.  That corner-averaged sum is exactly the covariance of the
piecewise-linear lift with N pieces.  It converges like N^{-(4H-1)} for
k = 0 and faster for k != 0; two Richardson stages remove the leading terms.

The double sum only depends on cell offsets through a few one-dimensional
profiles, so each level is evaluated in O(N) with cumulative sums.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fbm_core import rect_increment

RICHARDSON_RTOL = 1e-3
DEFAULT_K_MAX = 64
DEFAULT_QUAD_N = 512
_ABS_FLOOR = 1e-13


class QuadratureError(RuntimeError):
    """The Richardson check on a Q(k)/P(k) quadrature failed."""


def _check_regime(hurst: float) -> None:
    if not 0.25 < hurst < 0.5:
        raise ValueError(f"constants are defined for H in (1/4, 1/2), got {hurst}")


def mu_density(r: float, rp: float, hurst: float) -> float:
    """Off-diagonal density of the covariance measure of fBm increments."""
    if not 0.0 < hurst < 0.5:
        raise ValueError(f"density is defined for H in (0, 1/2), got {hurst}")
    if r == rp:
        raise ZeroDivisionError("mu density is singular on the diagonal r == r'")
    return -hurst * (1.0 - 2.0 * hurst) * abs(r - rp) ** (2.0 * hurst - 2.0)


def _pow_diff2(j: np.ndarray, e: float) -> np.ndarray:
    """Second difference ``(|j+1|^e + |j-1|^e - 2|j|^e) / 2`` without cancellation."""
    j = np.abs(np.asarray(j, dtype=float))
    out = 0.5 * (np.abs(j + 1) ** e + np.abs(j - 1) ** e - 2.0 * j**e)
    big = j >= 8
    if np.any(big):
        jb = j[big]
        x = 1.0 / jb
        out[big] = 0.5 * jb**e * (np.expm1(e * np.log1p(x)) + np.expm1(e * np.log1p(-x)))
    return out


def riemann_stieltjes_sum(k: int, hurst: float, n_cells: int, which: str = "Q") -> float:
    """Corner-averaged Riemann-Stieltjes sum for Q(k) or P(k) on n_cells^2 cells.

    Cell (a, b) covers s' in [a, a+1]/N (first interval) and s in [b, b+1]/N
    (second interval, shifted by k).  Integrator: rect_increment over the cell.
    Integrand: R(0, s'; k, k+s) for Q and R(0, s'; k+s, k+1) for P.
    """
    if which not in ("Q", "P"):
        raise ValueError("which must be 'Q' or 'P'")
    n = int(n_cells)
    e = 2.0 * hurst
    dlt = 1.0 / n
    grid = np.arange(n + 1) * dlt
    d = np.arange(-(n - 1), n)
    integrator = dlt**e * _pow_diff2(k * n + d, e)
    # integrand = (f(s) + g(s') - h(s - s')) / 2
    if which == "Q":
        f = np.abs(k + grid) ** e - abs(k) ** e
        g = np.abs(k - grid) ** e
        sign = 1.0
    else:
        f = abs(k + 1) ** e - np.abs(k + grid) ** e
        g = -np.abs(k + 1 - grid) ** e
        sign = -1.0
    f_bar = 0.5 * (f[:-1] + f[1:])
    g_bar = 0.5 * (g[:-1] + g[1:])

    def h(j):
        return sign * np.abs(k + j * dlt) ** e

    h_bar = 0.25 * (h(d - 1) + 2.0 * h(d) + h(d + 1))
    cf = np.concatenate([[0.0], np.cumsum(f_bar)])
    cg = np.concatenate([[0.0], np.cumsum(g_bar)])
    b_lo, b_hi = np.maximum(0, d), n - 1 + np.minimum(0, d)
    a_lo, a_hi = np.maximum(0, -d), n - 1 - np.maximum(0, d)
    total = (cf[b_hi + 1] - cf[b_lo]) + (cg[a_hi + 1] - cg[a_lo]) - (n - np.abs(d)) * h_bar
    return float(0.5 * np.sum(integrator * total))


def error_exponents(k: int, hurst: float) -> tuple[float, float]:
    """Leading two exponents p in the error expansion ``sum c_p N^{-p}`` of the raw sum.

    The integrand is singular where the two unit intervals touch: on the
    whole square for k = 0, at one corner for |k| = 1.  For |k| >= 2 it is
    smooth and the corner rule is second order.  The exponents were read off
    successive difference ratios of the raw sums.
    """
    k = abs(int(k))
    if k == 0:
        return 4.0 * hurst - 1.0, 4.0 * hurst
    if k == 1:
        return 4.0 * hurst, 1.0 + 2.0 * hurst
    return 2.0, 4.0


def _richardson(raw, exponents) -> float:
    """Eliminate the given error exponents from raw sums at N, 2N, 4N, ..."""
    vals = list(raw)
    for p in exponents:
        f = 2.0**p
        vals = [(f * b - a) / (f - 1.0) for a, b in zip(vals, vals[1:])]
    return vals[-1]


def qp_term(k: int, hurst: float, quad_n: int = DEFAULT_QUAD_N) -> tuple[float, float]:
    """Return ``(Q(k), P(k))``.

    Raw sums at quad_n, 2, 4 and 8 times quad_n cells.  Two Richardson stages
    (see :func:`error_exponents`) applied to the first three give one
    estimate and to the last three another; they must agree to relative 1e-3
    and the finer one is returned.
    """
    _check_regime(hurst)
    if quad_n < 8:
        raise ValueError(f"quad_n must be >= 8, got {quad_n}")
    k = int(k)
    exps = error_exponents(k, hurst)
    out = []
    for which in ("Q", "P"):
        raw = [riemann_stieltjes_sum(k, hurst, quad_n * 2**i, which) for i in range(4)]
        coarse = _richardson(raw[:3], exps)
        fine = _richardson(raw[1:], exps)
        if abs(coarse - fine) > RICHARDSON_RTOL * abs(fine) + _ABS_FLOOR:
            raise QuadratureError(
                f"{which}({k}) at H={hurst}: Richardson estimates {coarse:.10g} (N={quad_n}) "
                f"and {fine:.10g} (N={2 * quad_n}) disagree"
            )
        out.append(fine)
    return out[0], out[1]


@dataclass(frozen=True)
class QPTable:
    hurst: float
    k_max: int
    quad_n: int
    qk: np.ndarray = field(repr=False)  # index k + k_max, k in [-k_max, k_max]
    pk: np.ndarray = field(repr=False)
    q_sum: float = 0.0
    p_sum: float = 0.0
    tail_estimate: float = 0.0

    @property
    def ks(self) -> np.ndarray:
        return np.arange(-self.k_max, self.k_max + 1)

    def term(self, k: int) -> tuple[float, float]:
        return float(self.qk[k + self.k_max]), float(self.pk[k + self.k_max])

    def swapped(self) -> "QPTable":
        """Table with the roles of Q and P exchanged (negative control)."""
        return QPTable(self.hurst, self.k_max, self.quad_n, self.pk, self.qk,
                       self.p_sum, self.q_sum, self.tail_estimate)

    def to_csv(self) -> str:
        lines = ["k,Qk,Pk"]
        for k, q, p in zip(self.ks, self.qk, self.pk):
            lines.append(f"{k},{q:.17g},{p:.17g}")
        lines.append(f"sum,{self.q_sum:.17g},{self.p_sum:.17g}")
        lines.append(f"tail,{self.tail_estimate:.17g},{self.tail_estimate:.17g}")
        return "\n".join(lines) + "\n"


def _power_tail(ks: np.ndarray, vals: np.ndarray, k_max: int) -> float:
    """One-sided tail sum beyond k_max from a power-law fit to the last terms."""
    a = np.abs(vals)
    if np.any(a <= 0):
        return float(np.max(a) * k_max)
    slope, icpt = np.polyfit(np.log(ks), np.log(a), 1)
    if slope >= -1.0:
        return float("inf")
    c = np.exp(icpt)
    return float(c * (k_max + 0.5) ** (slope + 1.0) / (-slope - 1.0))


def qp_sum(hurst: float, k_max: int = DEFAULT_K_MAX, quad_n: int = DEFAULT_QUAD_N) -> QPTable:
    """Tabulate Q(k), P(k) for |k| <= k_max and their truncated sums.

    Terms are computed for k >= 0 and mirrored (Q(-k) = Q(k) by
    stationarity; :func:`qp_term` accepts negative k to check that).  The tail
    estimate bounds the omitted mass of both series from a power-law fit to
    the last four terms on each side.
    """
    _check_regime(hurst)
    if k_max < 4:
        raise ValueError(f"k_max must be >= 4, got {k_max}")
    pos = np.array([qp_term(k, hurst, quad_n) for k in range(k_max + 1)])
    q_half, p_half = pos[:, 0], pos[:, 1]
    qk = np.concatenate([q_half[:0:-1], q_half])
    pk = np.concatenate([p_half[:0:-1], p_half])
    last = np.arange(k_max - 3, k_max + 1)
    tail = 2.0 * max(_power_tail(last, q_half[-4:], k_max), _power_tail(last, p_half[-4:], k_max))
    # pairwise summation order: centre outward keeps the sum reproducible
    return QPTable(
        hurst=hurst, k_max=k_max, quad_n=quad_n, qk=qk, pk=pk,
        q_sum=float(np.sum(qk)), p_sum=float(np.sum(pk)), tail_estimate=tail,
    )


def finite_n_variance(table: QPTable, n: int, which: str = "Q") -> float:
    """``n^{4H-1} h^{-4H}``-normalised covariance of a sum of n consecutive cells,
    i.e. ``sum_{|k|<n} (1 - |k|/n) Q(k)`` (or P), using the stored terms."""
    vals = table.qk if which == "Q" else table.pk
    ks = table.ks
    keep = np.abs(ks) < n
    return float(np.sum((1.0 - np.abs(ks[keep]) / n) * vals[keep]))


def w_covariance(t: float, s: float, i: int, j: int, i2: int, j2: int,
                 table: QPTable, horizon_T: float, dim_m: int | None = None) -> float:
    """``E[W^{ij}_t W^{i2 j2}_s]`` for the limiting matrix Brownian motion.

    Indices are zero-based; pass ``dim_m`` to have them bounds-checked.
    """
    for idx in (i, j, i2, j2):
        if idx < 0 or (dim_m is not None and idx >= dim_m):
            raise IndexError(f"component index {idx} out of range for m={dim_m}")
    kron = (table.q_sum * (i == i2) * (j == j2) + table.p_sum * (i == j2) * (j == i2))
    return horizon_T ** (4.0 * table.hurst - 1.0) * kron * min(t, s)


def w_covariance_matrix(table: QPTable, dim_m: int) -> np.ndarray:
    """Unit-time covariance over the flattened components ``(i, j) -> i*m + j``."""
    m = dim_m
    eye = np.eye(m * m)
    swap = np.zeros((m * m, m * m))
    for i in range(m):
        for j in range(m):
            swap[i * m + j, j * m + i] = 1.0
    return table.q_sum * eye + table.p_sum * swap


def rect_cell_integrator(k: int, a: int, b: int, n_cells: int, hurst: float) -> float:
    """Integrator mass of cell (a, b) for Q(k): the increment
    ``E[dB_{[a,a+1]/N} dB_{k+[b,b+1]/N}]``.  Reference for the vectorised sum."""
    dl = 1.0 / n_cells
    return rect_increment(a * dl, (a + 1) * dl, k + b * dl, k + (b + 1) * dl, hurst)
