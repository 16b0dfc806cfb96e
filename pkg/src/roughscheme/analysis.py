"""Diagnostics and Monte Carlo harnesses.

Holder seminorms, the discrete sewing inequality, sup-errors and rate fits,
the error decomposition ``eps = eps_hat + eps_tilde``, and three harnesses:
strong rate, residual decay and the error CLT.  Harnesses split replicates
into chunks keyed by replicate index; results are scattered back by index so
the aggregate does not depend on chunking or worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .constants import QPTable
from .fbm_core import LevyAreaF, levy_area_values, lift_increments, sample_increments
from .fields import CoefficientField
from .schemes import (
    GATE_FRACTION,
    JacobianPair,
    Trajectory,
    jacobian_pair,
    limit_process_U,
    modified_euler,
    reference_solution,
    run_scheme,
    sample_W,
)

log = logging.getLogger(__name__)

HOLDER_DENSE_MAX = 2**12


# ---------------------------------------------------------------- norms


def holder_seminorm(values, gamma: float, horizon_T: float = 1.0) -> float:
    """``max |x_v - x_u| / (v - u)^gamma`` over grid pairs of a uniform grid on [0, T].

    ``values`` has shape ``(n+1,)`` or ``(n+1, d)``.  All lags are scanned up to
    ``n = 4096``; beyond that the lags are a dyadic/geometric subsample.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    x = np.asarray(values, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0] - 1
    if n < 1:
        raise ValueError("need at least two grid points")
    dt = horizon_T / n
    if n <= HOLDER_DENSE_MAX:
        lags = range(1, n + 1)
    else:
        lags = np.unique(np.concatenate([
            2 ** np.arange(int(math.log2(n)) + 1),
            np.geomspace(1, n, 512).astype(int),
        ]))
    best = 0.0
    for lag in lags:
        lag = int(lag)
        d = np.linalg.norm(x[lag:] - x[:-lag], axis=-1).max()
        best = max(best, d / (lag * dt) ** gamma)
    return float(best)


def sewing_constant(mu: float) -> float:
    """``K_mu = 2^mu zeta(mu)``."""
    from scipy.special import zeta

    if mu <= 1:
        raise ValueError(f"the series diverges for mu <= 1 (got {mu})")
    return float(2.0**mu * zeta(mu))


@dataclass(frozen=True)
class SewingIncrement:
    """Two-parameter increment ``r[s, t]`` on grid nodes with ``r[k, k+1] = 0``."""

    grid_n: int
    r: np.ndarray = field(repr=False)  # (n+1, n+1) or (n+1, n+1, d)
    horizon_T: float = 1.0

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        if r.shape[:2] != (self.grid_n + 1, self.grid_n + 1):
            raise ValueError(f"r must be indexed by {self.grid_n + 1} grid nodes")
        k = np.arange(self.grid_n)
        if np.any(r[k, k + 1] != 0):
            raise ValueError("r must vanish on consecutive nodes")


class SewingViolation(ArithmeticError):
    pass


def _abs(x, vector: bool):
    return np.linalg.norm(x, axis=-1) if vector else np.abs(x)


def sewing_norms(inc: SewingIncrement, mu: float) -> tuple[float, float]:
    """``(||R||_mu, ||delta R||_mu)`` over ordered grid pairs and triples."""
    r = np.asarray(inc.r, dtype=float)
    n = inc.grid_n
    vec = r.ndim == 3
    t = np.linspace(0.0, inc.horizon_T, n + 1)
    s_idx, t_idx = np.triu_indices(n + 1, k=1)
    norm_r = float(np.max(_abs(r[s_idx, t_idx], vec) / (t[t_idx] - t[s_idx]) ** mu))
    best = 0.0
    for s in range(n - 1):
        # delta R_{s u t} = R_st - R_su - R_ut for s < u < t
        u = np.arange(s + 1, n)[:, None]
        tt = np.arange(s + 2, n + 1)[None, :]
        valid = u < tt
        dr = r[s, tt] - r[s, u] - r[u, tt]
        vals = _abs(dr, vec) / (t[tt] - t[s]) ** mu
        best = max(best, float(np.max(np.where(valid, vals, 0.0))))
    return norm_r, best


def sewing_check(inc: SewingIncrement, mu: float) -> float:
    """Ratio ``||R||_mu / (K_mu ||delta R||_mu)``; the sewing inequality says <= 1."""
    k_mu = sewing_constant(mu)
    norm_r, norm_dr = sewing_norms(inc, mu)
    if norm_r == 0.0:
        return 0.0
    if norm_dr == 0.0:
        raise SewingViolation("delta R vanishes but R does not")
    return norm_r / (k_mu * norm_dr)


# ---------------------------------------------------------------- errors and rates


def sup_error(a, b):
    """Max over grid nodes of the Euclidean distance between two trajectories.

    Batched trajectories give one value per replicate.
    """
    va = a.values if isinstance(a, Trajectory) else np.asarray(a, dtype=float)
    vb = b.values if isinstance(b, Trajectory) else np.asarray(b, dtype=float)
    if va.shape[-2:] != vb.shape[-2:]:
        raise ValueError(f"grid mismatch: {va.shape} vs {vb.shape}")
    out = np.linalg.norm(va - vb, axis=-1).max(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class RateReport:
    ns: list
    mean_sup_errors: list
    fitted_slope: float
    slope_stderr: float
    mc_reps: int
    stderrs: list | None = None

    @property
    def rate(self) -> float:
        return -self.fitted_slope


def rate_fit(ns, errors, mc_reps: int = 0, stderrs=None) -> RateReport:
    """Least-squares slope of ``log(error)`` against ``log(n)``."""
    ns = [int(n) for n in ns]
    errors = [float(e) for e in errors]
    if len(ns) != len(errors):
        raise ValueError("ns and errors differ in length")
    if len(ns) < 4:
        raise ValueError("need at least 4 grid sizes")
    if min(errors) <= 0:
        raise ValueError("errors must be positive")
    fit = stats.linregress(np.log(ns), np.log(errors))
    return RateReport(ns, errors, float(fit.slope), float(fit.stderr), int(mc_reps),
                      None if stderrs is None else [float(s) for s in stderrs])


@dataclass(frozen=True)
class ErrorDecomposition:
    epsilon: np.ndarray = field(repr=False)  # (..., n+1, d)
    epsilon_hat: np.ndarray = field(repr=False)
    epsilon_tilde: np.ndarray = field(repr=False)
    scale: float = 1.0


def error_decomposition(y_ref, y_scheme, jac_n: JacobianPair, jac: JacobianPair,
                        F: LevyAreaF, coeffs: CoefficientField) -> ErrorDecomposition:
    """``eps = Psi^n (y - y^n)``, ``eps_hat_k = sum_{l<k} Psi_l sum_ij dV_j V_i(y_l) dF^{ij}_l``
    and ``eps_tilde = eps - eps_hat``; ``scale = n^{2H - 1/2}``."""
    y = y_ref.values if isinstance(y_ref, Trajectory) else np.asarray(y_ref, dtype=float)
    yn = y_scheme.values if isinstance(y_scheme, Trajectory) else np.asarray(y_scheme, dtype=float)
    if y.shape != yn.shape:
        raise ValueError("trajectories must share one grid")
    n = y.shape[-2] - 1
    if F.coarse_n != n or jac.psi.shape[-3] != n + 1 or jac_n.psi.shape[-3] != n + 1:
        raise ValueError("all inputs must live on the same grid")
    if not np.all(np.isfinite(jac_n.psi)):
        raise np.linalg.LinAlgError("singular Psi^n")
    eps = np.einsum("...kl,...l->...k", jac_n.psi, y - yn)
    dF = np.diff(F.values, axis=-3)
    dvv = coeffs.eval_dVV(y[..., :-1, :])
    drive = np.einsum("...kji,...ij->...k", dvv, dF)
    weighted = np.einsum("...kl,...l->...k", jac.psi[..., :-1, :, :], drive)
    eps_hat = np.concatenate([np.zeros_like(weighted[..., :1, :]), np.cumsum(weighted, axis=-2)], axis=-2)
    return ErrorDecomposition(eps, eps_hat, eps - eps_hat, float(n ** (2.0 * F.hurst - 0.5)))


def ks_two_sample(xs, ys) -> float:
    """Two-sample Kolmogorov-Smirnov statistic ``sup |F_x - F_y|``."""
    xs = np.asarray(xs, dtype=float).ravel()
    ys = np.asarray(ys, dtype=float).ravel()
    if xs.size == 0 or ys.size == 0:
        raise ValueError("both samples must be nonempty")
    return float(stats.ks_2samp(xs, ys).statistic)


# ---------------------------------------------------------------- harness plumbing


def _chunks(reps: int, size: int):
    return [list(range(a, min(a + size, reps))) for a in range(0, reps, size)]


def _map(fn, tasks, threads: int):
    if threads <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, tasks))


def _fine_increments(hurst, n_fine, horizon_T, m, seed, reps, batch=32):
    out = np.empty((len(reps), n_fine, m))
    for a in range(0, len(reps), batch):
        out[a:a + batch] = sample_increments(hurst, n_fine, horizon_T, m, seed, reps[a:a + batch])
    return out


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    return math.fsum(x) / x.size, float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else 0.0


# ---------------------------------------------------------------- strong rate


@dataclass
class RateHarnessResult:
    hurst: float
    ns: list
    reps: int
    errors: dict  # scheme -> (reps, len(ns)) sup errors
    gaps: np.ndarray  # per-replicate reference gap
    reports: dict = field(default_factory=dict)

    def mean_gap(self) -> float:
        return math.fsum(self.gaps) / self.gaps.size

    def gate_ratio(self, scheme: str) -> float:
        """Mean reference gap over the smallest mean error of ``scheme``."""
        return self.mean_gap() / min(self.reports[scheme].mean_sup_errors)

    def rows(self):
        for scheme, rep in self.reports.items():
            for n, e, s in zip(rep.ns, rep.mean_sup_errors, rep.stderrs):
                yield scheme, n, self.hurst, e, s, self.reps


def _rate_chunk(task):
    (reps, hurst, horizon_T, coeffs, y0, ns, n_fine, seed, schemes) = task
    dx = _fine_increments(hurst, n_fine, horizon_T, coeffs.dim_m, seed, reps)
    ref = reference_solution(dx, coeffs, y0, max(ns), horizon_T=horizon_T, check_gap=True)
    out = {s: np.empty((len(reps), len(ns))) for s in schemes}
    for c, n in enumerate(ns):
        delta_b, bb = lift_increments(dx, n_fine // n)
        rv = ref.values[..., :: max(ns) // n, :]
        for s in schemes:
            tr = run_scheme(s, delta_b, horizon_T / n, coeffs, y0, hurst=hurst, bb=bb)
            out[s][:, c] = np.linalg.norm(tr.values - rv, axis=-1).max(axis=-1)
    return reps, out, ref.gaps


def rate_harness(coeffs: CoefficientField, hurst: float = 0.4, ns=None, reps: int = 1000,
                 horizon_T: float = 1.0, y0=None, refinement: int = 32, seed: int = 0,
                 schemes=("modified", "classical"), chunk: int = 200, threads: int = 1) -> RateHarnessResult:
    """Mean sup-error of each scheme against the third-order proxy.

    One fine path with ``refinement * max(ns)`` steps per replicate serves
    every n, so the proxy is at least ``refinement`` times finer than each
    scheme grid.  Errors at different n use common random numbers.
    """
    ns = sorted(ns or [2**k for k in range(6, 13)])
    n_fine = refinement * ns[-1]
    if any(n_fine % n for n in ns):
        raise ValueError("grid sizes must divide the fine grid")
    y0 = np.zeros(coeffs.dim_d) if y0 is None else np.asarray(y0, dtype=float)
    tasks = [(c, hurst, horizon_T, coeffs, y0, ns, n_fine, seed, tuple(schemes)) for c in _chunks(reps, chunk)]
    errors = {s: np.empty((reps, len(ns))) for s in schemes}
    gaps = np.empty(reps)
    for idx, out, gap in _map(_rate_chunk, tasks, threads):
        for s in schemes:
            errors[s][idx] = out[s]
        gaps[idx] = gap
    res = RateHarnessResult(hurst, ns, reps, errors, gaps)
    for s in schemes:
        ms = [_mean_se(errors[s][:, c]) for c in range(len(ns))]
        res.reports[s] = rate_fit(ns, [m for m, _ in ms], reps, [se for _, se in ms])
    return res


# ---------------------------------------------------------------- residual decay


@dataclass
class ResidualHarnessResult:
    hurst: float
    ns: list
    reps: int
    scaled_tilde: np.ndarray  # (reps, len(ns)) of n^{2H-1/2} sup |eps_tilde|
    scaled_eps: np.ndarray
    scaled_hat: np.ndarray

    def medians(self, which: str = "tilde") -> list:
        arr = {"tilde": self.scaled_tilde, "eps": self.scaled_eps, "hat": self.scaled_hat}[which]
        return [float(np.median(arr[:, c])) for c in range(len(self.ns))]


def _residual_chunk(task):
    reps, hurst, horizon_T, coeffs, y0, ns, n_fine, seed = task
    dx = _fine_increments(hurst, n_fine, horizon_T, coeffs.dim_m, seed, reps)
    ref = reference_solution(dx, coeffs, y0, max(ns), horizon_T=horizon_T, check_gap=False)
    shape = (len(reps), len(ns))
    tilde, eps, hat = np.empty(shape), np.empty(shape), np.empty(shape)
    for c, n in enumerate(ns):
        h = horizon_T / n
        delta_b, bb = lift_increments(dx, n_fine // n)
        F = LevyAreaF(levy_area_values(bb, hurst, h), hurst, horizon_T, n)
        y = ref.values[..., :: max(ns) // n, :]
        yn = modified_euler(delta_b, h, hurst, coeffs, y0).values
        jac = jacobian_pair(y, delta_b, h, hurst, coeffs)
        jac_n = jacobian_pair(y, delta_b, h, hurst, coeffs, y_other=yn)
        dec = error_decomposition(y, yn, jac_n, jac, F, coeffs)
        sup = lambda a: np.linalg.norm(a, axis=-1).max(axis=-1)  # noqa: E731
        tilde[:, c] = dec.scale * sup(dec.epsilon_tilde)
        eps[:, c] = dec.scale * sup(dec.epsilon)
        hat[:, c] = dec.scale * sup(dec.epsilon_hat)
    return reps, tilde, eps, hat


def residual_harness(coeffs: CoefficientField, hurst: float = 0.4, ns=(2**7, 2**9, 2**11),
                     reps: int = 200, horizon_T: float = 1.0, y0=None, refinement: int = 32,
                     seed: int = 0, chunk: int = 100, threads: int = 1) -> ResidualHarnessResult:
    """``n^{2H-1/2} sup |eps_tilde|`` per replicate and grid size (common random numbers)."""
    ns = sorted(ns)
    n_fine = refinement * ns[-1]
    y0 = np.zeros(coeffs.dim_d) if y0 is None else np.asarray(y0, dtype=float)
    tasks = [(c, hurst, horizon_T, coeffs, y0, ns, n_fine, seed) for c in _chunks(reps, chunk)]
    shape = (reps, len(ns))
    tilde, eps, hat = np.empty(shape), np.empty(shape), np.empty(shape)
    for idx, t, e, h in _map(_residual_chunk, tasks, threads):
        tilde[idx], eps[idx], hat[idx] = t, e, h
    return ResidualHarnessResult(hurst, list(ns), reps, tilde, eps, hat)


# ---------------------------------------------------------------- error CLT


@dataclass
class CltReport:
    hurst: float
    n: int
    reps: int
    horizon_T: float
    errors: np.ndarray = field(repr=False)  # (reps, d) renormalised errors at T
    limits: np.ndarray = field(repr=False)  # (reps, d) U_T samples
    ks: list = field(default_factory=list)
    mean_gap: list = field(default_factory=list)
    variance_gap: list = field(default_factory=list)  # |var_A / var_B - 1|

    def summary(self) -> dict:
        return {
            "hurst": self.hurst, "n": self.n, "reps": self.reps, "horizon_T": self.horizon_T,
            "ks": self.ks, "mean_gap": self.mean_gap, "variance_gap": self.variance_gap,
            "var_errors": np.var(self.errors, axis=0, ddof=1).tolist(),
            "var_limits": np.var(self.limits, axis=0, ddof=1).tolist(),
        }


def _solution_on_grid(coeffs, dB_coarse, dx_fine, horizon_T, y0, n):
    """Exact solution when the field provides one, else the third-order proxy."""
    if hasattr(coeffs, "exact_solution"):
        b = np.concatenate([np.zeros_like(dB_coarse[..., :1, :]), np.cumsum(dB_coarse, axis=-2)], axis=-2)
        return coeffs.exact_solution(y0, b)
    return reference_solution(dx_fine, coeffs, y0, n, horizon_T=horizon_T, check_gap=False).values


def _clt_chunk(task):
    reps, hurst, horizon_T, coeffs, y0, n, refinement, seed, table, offset = task
    exact = hasattr(coeffs, "exact_solution")
    n_fine = n if exact else refinement * n
    m = coeffs.dim_m
    h = horizon_T / n
    scale = n ** (2.0 * hurst - 0.5)
    # pipeline A: renormalised scheme error on fresh paths
    dx = _fine_increments(hurst, n_fine, horizon_T, m, seed, reps)
    dB = dx if exact else lift_increments(dx, refinement)[0]
    y = _solution_on_grid(coeffs, dB, dx, horizon_T, y0, n)
    yn = modified_euler(dB, h, hurst, coeffs, y0).values
    err = scale * (y[..., -1, :] - yn[..., -1, :])
    # pipeline B: U_T on independent (B, W) pairs
    reps_b = [offset + r for r in reps]
    dx = _fine_increments(hurst, n_fine, horizon_T, m, seed, reps_b)
    dB = dx if exact else lift_increments(dx, refinement)[0]
    y = _solution_on_grid(coeffs, dB, dx, horizon_T, y0, n)
    jac = jacobian_pair(y, dB, h, hurst, coeffs)
    dW = sample_W(table, horizon_T, n, m, seed, reps)
    u = limit_process_U(y, jac, dW, coeffs, w_seed=seed).u_values[..., -1, :]
    return reps, err, u


def clt_error_harness(coeffs: CoefficientField, table: QPTable, hurst: float = 0.45, n: int = 2**10,
                      reps: int = 2000, horizon_T: float = 1.0, y0=None, refinement: int = 32,
                      seed: int = 0, chunk: int = 500, threads: int = 1) -> CltReport:
    """Compare ``n^{2H-1/2}(y_T - y^n_T)`` with ``U_T``, coordinate by coordinate.

    The two sample sets use disjoint fBm replicate indices (``r`` and
    ``reps + r``); ``W`` for replicate r comes from its own stream.
    """
    if table.hurst != hurst:
        raise ValueError(f"table was computed for H={table.hurst}, harness runs H={hurst}")
    y0 = np.ones(coeffs.dim_d) if y0 is None else np.asarray(y0, dtype=float)
    tasks = [(c, hurst, horizon_T, coeffs, y0, n, refinement, seed, table, reps) for c in _chunks(reps, chunk)]
    d = coeffs.dim_d
    errs, lims = np.empty((reps, d)), np.empty((reps, d))
    for idx, e, u in _map(_clt_chunk, tasks, threads):
        errs[idx], lims[idx] = e, u
    rep = CltReport(hurst, n, reps, horizon_T, errs, lims)
    for c in range(d):
        a, b = errs[:, c], lims[:, c]
        rep.ks.append(ks_two_sample(a, b))
        rep.mean_gap.append(float(np.mean(a) - np.mean(b)))
        va, vb = np.var(a, ddof=1), np.var(b, ddof=1)
        rep.variance_gap.append(float(abs(va / vb - 1.0)) if vb > 0 else (0.0 if va == 0 else math.inf))
    return rep
