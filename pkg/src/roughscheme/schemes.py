"""Time-discrete schemes, the fine-grid reference, the Jacobian pair and the
limiting error process.

Array conventions: increments ``dB`` have shape ``(..., n, m)`` and
trajectories ``(..., n+1, d)``; leading axes are independent replicates and
are advanced together.  Second-level increments ``bb[..., k, i, j]`` are
``int dB^i dB^j`` over step k, paired with the vector field ``dV_j V_i``
(the coefficient that appears when the flow is expanded to second order).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .constants import QPTable, w_covariance_matrix
from .fbm_core import FbmPath, RoughLift, restrict_increments
from .fields import CoefficientField

log = logging.getLogger(__name__)

SCHEMES = ("classical", "modified", "taylor", "wong_zakai", "third_order")
REFERENCE_MIN_REFINEMENT = 32
GATE_FRACTION = 0.1
COND_MAX = 1e10
INVERSE_TOL = 1e-12
GL_NODES = 3


class SelfConsistencyError(RuntimeError):
    """The reference proxy moved too much when the fine grid was halved."""


class SingularJacobianError(RuntimeError):
    pass


class CovarianceError(ValueError):
    """The limiting covariance is not positive semidefinite."""


@dataclass(frozen=True)
class Trajectory:
    grid_n: int
    times: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)  # (..., n+1, d)
    scheme_tag: str
    gap: float | None = None  # reference only: mean sup-distance to the half-resolution proxy
    gaps: np.ndarray | None = field(default=None, repr=False)  # the same, per replicate

    def restrict(self, coarse_n: int) -> "Trajectory":
        if coarse_n < 1 or self.grid_n % coarse_n:
            raise ValueError(f"coarse_n={coarse_n} does not divide grid_n={self.grid_n}")
        f = self.grid_n // coarse_n
        return Trajectory(coarse_n, self.times[::f], self.values[..., ::f, :], self.scheme_tag, self.gap, self.gaps)

    def to_csv(self) -> str:
        if self.values.ndim != 2:
            raise ValueError("CSV export needs a single trajectory")
        d = self.values.shape[1]
        head = "t," + ",".join(f"y{i + 1}" for i in range(d))
        rows = [",".join(f"{x:.17g}" for x in (t, *v)) for t, v in zip(self.times, self.values)]
        return head + "\n" + "\n".join(rows) + "\n"


@dataclass(frozen=True)
class JacobianPair:
    phi: np.ndarray = field(repr=False)  # (..., n+1, d, d)
    psi: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class LimitSample:
    u_values: np.ndarray = field(repr=False)  # (..., nu+1, d)
    w_seed: int = 0


def _prepare(coeffs: CoefficientField, dB: np.ndarray, y0, stride: int = 1):
    dB = np.asarray(dB, dtype=float)
    if dB.ndim < 2 or dB.shape[-1] != coeffs.dim_m:
        raise ValueError(f"increments must have shape (..., n, {coeffs.dim_m}), got {dB.shape}")
    if dB.shape[-2] % stride:
        raise ValueError(f"stride {stride} does not divide {dB.shape[-2]} steps")
    y0 = np.asarray(y0, dtype=float)
    if y0.shape[-1:] != (coeffs.dim_d,):
        raise ValueError(f"y0 must have trailing dimension {coeffs.dim_d}, got {y0.shape}")
    batch = np.broadcast_shapes(dB.shape[:-2], y0.shape[:-1])
    out = np.empty(batch + (dB.shape[-2] // stride + 1, coeffs.dim_d))
    out[..., 0, :] = y0
    return dB, out


def _advance(coeffs, dB, h, y0, kind, hurst=None, bb=None, stride: int = 1) -> np.ndarray:
    """Run one scheme; keep every ``stride``-th node of the trajectory."""
    dB, out = _prepare(coeffs, dB, y0, stride)
    n = dB.shape[-2]
    if kind == "modified":
        corr = 0.5 * h ** (2.0 * hurst)
    y = np.array(np.broadcast_to(out[..., 0, :], out[..., 0, :].shape))
    for k in range(n):
        x = dB[..., k, :]
        V = coeffs.eval_V(y)
        v = np.einsum("...kj,...j->...k", V, x)
        step = coeffs.eval_b(y) * h + v
        if kind == "modified":
            step += corr * np.einsum("...kjj->...k", coeffs.eval_dVV(y))
        elif kind == "taylor":
            step += np.einsum("...kji,...ij->...k", coeffs.eval_dVV(y), bb[..., k, :, :])
        elif kind in ("wong_zakai", "third_order"):
            # with v = V x and M = sum_i dV_i x^i:  sum_ij dV_i V_j x^i x^j = M v
            M = np.einsum("...klj,...j->...kl", coeffs.eval_dV(y), x)
            Mv = np.einsum("...kl,...l->...k", M, v)
            step += 0.5 * Mv
            if kind == "third_order":
                D = np.einsum("...klpj,...j->...klp", coeffs.eval_ddV(y), x)
                third = np.einsum("...klp,...l,...p->...k", D, v, v)
                third += np.einsum("...kl,...l->...k", M, Mv)
                step += third / 6.0
        y = y + step
        if (k + 1) % stride == 0:
            out[..., (k + 1) // stride, :] = y
    return out


def _traj(values, h, tag) -> Trajectory:
    n = values.shape[-2] - 1
    return Trajectory(n, h * np.arange(n + 1), values, tag)


def classical_euler(increments, h: float, coeffs: CoefficientField, y0) -> Trajectory:
    """``y + b h + V dB``."""
    return _traj(_advance(coeffs, increments, h, y0, "classical"), h, "classical")


def modified_euler(increments, h: float, hurst: float, coeffs: CoefficientField, y0) -> Trajectory:
    """Euler step plus the mean of the second-order term, ``1/2 sum_j dV_j V_j h^{2H}``."""
    return _traj(_advance(coeffs, increments, h, y0, "modified", hurst=hurst), h, "modified")


def taylor_milstein(lift, h: float, coeffs: CoefficientField, y0) -> Trajectory:
    """Second-order Taylor step using the true second-level increments.

    ``lift`` is a :class:`RoughLift` or a pair ``(delta_b, bb)``.
    """
    if isinstance(lift, RoughLift):
        delta_b, bb = lift.delta_b, lift.bb
    else:
        delta_b, bb = lift
    return _traj(_advance(coeffs, delta_b, h, y0, "taylor", bb=np.asarray(bb)), h, "taylor")


def wong_zakai_milstein(increments, h: float, coeffs: CoefficientField, y0) -> Trajectory:
    """Taylor step with ``bb^{ij}`` replaced by ``dB^i dB^j / 2``."""
    return _traj(_advance(coeffs, increments, h, y0, "wong_zakai"), h, "wong_zakai")


def third_order(increments, h: float, coeffs: CoefficientField, y0) -> Trajectory:
    """Wong-Zakai step plus ``1/6 sum d(dV_i V_j) V_k dB^i dB^j dB^k``."""
    return _traj(_advance(coeffs, increments, h, y0, "third_order"), h, "third_order")


def run_scheme(name: str, dB, h, coeffs, y0, hurst=None, bb=None) -> Trajectory:
    if name == "classical":
        return classical_euler(dB, h, coeffs, y0)
    if name == "modified":
        return modified_euler(dB, h, hurst, coeffs, y0)
    if name == "taylor":
        return taylor_milstein((dB, bb), h, coeffs, y0)
    if name == "wong_zakai":
        return wong_zakai_milstein(dB, h, coeffs, y0)
    if name == "third_order":
        return third_order(dB, h, coeffs, y0)
    raise ValueError(f"unknown scheme {name!r}; choose from {SCHEMES}")


def reference_solution(fine_path, coeffs: CoefficientField, y0, coarse_n: int,
                       horizon_T: float | None = None, scheme_error: float | None = None,
                       check_gap: bool = True) -> Trajectory:
    """Truth proxy: the third-order scheme on the full fine grid, restricted to
    ``coarse_n`` steps.

    ``fine_path`` is an :class:`FbmPath` or an array of fine increments
    ``(..., N, m)`` (then ``horizon_T`` is required).  With ``check_gap`` the
    run is repeated on the grid of half resolution and the mean sup-distance
    between the two proxies is stored as ``gap``.  If ``scheme_error`` is
    given, a gap of at least ``0.1 * scheme_error`` raises
    :class:`SelfConsistencyError`.
    """
    if isinstance(fine_path, FbmPath):
        dB = fine_path.increments
        horizon_T = fine_path.horizon_T
    else:
        dB = np.asarray(fine_path, dtype=float)
        if horizon_T is None:
            raise ValueError("horizon_T is required with raw increments")
    n_fine = dB.shape[-2]
    if n_fine % coarse_n or n_fine // coarse_n < REFERENCE_MIN_REFINEMENT:
        raise ValueError(
            f"fine grid ({n_fine}) must be a multiple of at least {REFERENCE_MIN_REFINEMENT}x coarse_n={coarse_n}"
        )
    h = horizon_T / n_fine
    factor = n_fine // coarse_n
    values = _advance(coeffs, dB, h, y0, "third_order", stride=factor)
    gap = diff = None
    if check_gap:
        half = _advance(coeffs, restrict_increments(dB, 2), 2 * h, y0, "third_order", stride=factor // 2)
        diff = np.linalg.norm(values - half, axis=-1).max(axis=-1)
        gap = float(np.mean(diff))
        if scheme_error is not None and gap >= GATE_FRACTION * scheme_error:
            raise SelfConsistencyError(
                f"reference moved by {gap:.3g} when the fine grid was halved; "
                f"scheme error is {scheme_error:.3g}"
            )
    return Trajectory(coarse_n, (horizon_T / coarse_n) * np.arange(coarse_n + 1), values, "reference", gap, diff)


def check_reference_gate(ref: Trajectory, scheme_error: float) -> None:
    if ref.gap is None:
        raise ValueError("reference was computed without the self-consistency run")
    if ref.gap >= GATE_FRACTION * scheme_error:
        raise SelfConsistencyError(
            f"reference gap {ref.gap:.3g} is not below {GATE_FRACTION:g} x scheme error {scheme_error:.3g}"
        )


def _coefficients_along(coeffs, y, y_other):
    """``(db, dV, d_dVV_diag, ddV_V_diag)`` at ``y``, or averaged over the
    segment from ``y_other`` to ``y`` with Gauss-Legendre nodes."""
    if y_other is None:
        pts, wts = [y], [1.0]
    else:
        x, w = np.polynomial.legendre.leggauss(GL_NODES)
        pts = [y_other + 0.5 * (xi + 1.0) * (y - y_other) for xi in x]
        wts = 0.5 * w
    db = dV = dd = 0.0
    for p, w in zip(pts, wts):
        db = db + w * coeffs.eval_db(p)
        dV = dV + w * coeffs.eval_dV(p)
        dd = dd + w * np.einsum("...kpjj->...kp", coeffs.eval_d_dVV(p))
    return db, dV, dd


def _newton_schulz(phi, psi, eye):
    for _ in range(6):
        res = np.einsum("...ij,...jk->...ik", phi, psi) - eye
        if np.max(np.abs(res), initial=0.0) < INVERSE_TOL:
            return psi
        psi = psi - np.einsum("...ij,...jk->...ik", psi, res)
    res = np.einsum("...ij,...jk->...ik", phi, psi) - eye
    if np.max(np.abs(res), initial=0.0) < INVERSE_TOL:
        return psi
    return np.linalg.inv(phi)


def jacobian_pair(y_ref, increments, h: float, hurst: float, coeffs: CoefficientField,
                  y_other=None) -> JacobianPair:
    """Jacobian ``Phi`` of the flow along ``y_ref`` and its inverse ``Psi``.

    Phi is advanced with the modified-Euler step of the linearised equation,
    ``Phi_{k+1} = (I + db h + sum_j dV_j dB^j + 1/2 sum_j d(dV_j V_j) h^{2H}) Phi_k``,
    and Psi with the mirrored step for the inverse equation followed by
    Newton-Schulz refinement so that ``Phi Psi = I`` at every node.  When
    ``y_other`` (a scheme trajectory) is given, all coefficients are averaged
    over the segment between the two trajectories, which gives ``Phi^n``.
    """
    y = y_ref.values if isinstance(y_ref, Trajectory) else np.asarray(y_ref, dtype=float)
    if y_other is not None:
        y_other = y_other.values if isinstance(y_other, Trajectory) else np.asarray(y_other, dtype=float)
        if y_other.shape != y.shape:
            raise ValueError("trajectories must share one grid")
    dB = np.asarray(increments, dtype=float)
    n, d = dB.shape[-2], coeffs.dim_d
    if y.shape[-2] != n + 1:
        raise ValueError(f"trajectory has {y.shape[-2] - 1} steps, increments have {n}")
    batch = np.broadcast_shapes(y.shape[:-2], dB.shape[:-2])
    eye = np.eye(d)
    phi = np.empty(batch + (n + 1, d, d))
    psi = np.empty_like(phi)
    phi[..., 0, :, :] = eye
    psi[..., 0, :, :] = eye
    h2 = h ** (2.0 * hurst)
    for k in range(n):
        yk = y[..., k, :]
        db, dV, dd = _coefficients_along(coeffs, yk, None if y_other is None else y_other[..., k, :])
        A = np.einsum("...klj,...j->...kl", dV, dB[..., k, :])
        AA = np.einsum("...klj,...lpj->...kp", dV, dV)
        fwd = eye + db * h + A + 0.5 * dd * h2
        bwd = eye - db * h - A + (AA - 0.5 * dd) * h2
        phi[..., k + 1, :, :] = np.einsum("...ij,...jk->...ik", fwd, phi[..., k, :, :])
        p = np.einsum("...ij,...jk->...ik", psi[..., k, :, :], bwd)
        psi[..., k + 1, :, :] = _newton_schulz(phi[..., k + 1, :, :], p, eye)
    # Phi starts at I, so a vanishing singular value is degenerate even when d = 1
    sv = np.linalg.svd(phi, compute_uv=False)
    if not np.all(np.isfinite(sv)) or np.min(sv[..., -1]) * COND_MAX < 1.0 \
            or np.max(sv[..., 0] / sv[..., -1]) > COND_MAX:
        raise SingularJacobianError(f"Jacobian is numerically singular (condition limit {COND_MAX:g})")
    return JacobianPair(phi, psi)


def w_covariance_factor(table: QPTable, horizon_T: float, dim_m: int, dt: float) -> np.ndarray:
    """Matrix square root of the per-step covariance of the flattened ``W``."""
    cov = horizon_T ** (4.0 * table.hurst - 1.0) * dt * w_covariance_matrix(table, dim_m)
    cov = 0.5 * (cov + cov.T)
    w, q = np.linalg.eigh(cov)
    if w.min() < -1e-12 * max(abs(w).max(), 1e-300):
        raise CovarianceError(
            f"W covariance is not positive semidefinite (min eigenvalue {w.min():.3g}); "
            f"requires Q >= |P|, got Q={table.q_sum:.6g}, P={table.p_sum:.6g}"
        )
    return q * np.sqrt(np.clip(w, 0.0, None))


def sample_W(table: QPTable, horizon_T: float, grid_nu: int, dim_m: int, seed: int,
             replicates=1) -> np.ndarray:
    """Gaussian increments ``dW[r, k, i, j]`` of the limiting matrix Brownian motion.

    Per step of length ``T/nu`` the covariance is
    ``T^{4H-1} (Q d_ii' d_jj' + P d_ij' d_ji') dt``; steps are independent.
    Replicate r uses the stream ``(seed, W_LIMIT, r)``.
    """
    if table.q_sum < table.p_sum:
        warnings.warn(f"Q={table.q_sum:.6g} is not larger than P={table.p_sum:.6g}", RuntimeWarning)
    dt = horizon_T / grid_nu
    fac = w_covariance_factor(table, horizon_T, dim_m, dt)
    if isinstance(replicates, (int, np.integer)):
        replicates = range(int(replicates))
    out = np.empty((len(replicates), grid_nu, dim_m * dim_m))
    for a, r in enumerate(replicates):
        z = rng.stream(seed, rng.W_LIMIT, r).standard_normal((grid_nu, dim_m * dim_m))
        out[a] = z @ fac.T
    return out.reshape(len(replicates), grid_nu, dim_m, dim_m)


def limit_process_U(y_ref, phi_psi: JacobianPair, w_increments, coeffs: CoefficientField,
                    w_seed: int = 0) -> LimitSample:
    """``U_t = Phi_t sum_{t_k < t} Psi_k sum_{ij} dV_j V_i(y_k) dW^{ij}_k``."""
    y = y_ref.values if isinstance(y_ref, Trajectory) else np.asarray(y_ref, dtype=float)
    dW = np.asarray(w_increments, dtype=float)
    nu = dW.shape[-3]
    if y.shape[-2] != nu + 1 or phi_psi.phi.shape[-3] != nu + 1:
        raise ValueError("y, the Jacobian pair and W must share one grid")
    dvv = coeffs.eval_dVV(y[..., :-1, :])
    drive = np.einsum("...kji,...ij->...k", dvv, dW)
    weighted = np.einsum("...kl,...l->...k", phi_psi.psi[..., :-1, :, :], drive)
    acc = np.concatenate([np.zeros_like(weighted[..., :1, :]), np.cumsum(weighted, axis=-2)], axis=-2)
    u = np.einsum("...kl,...l->...k", phi_psi.phi, acc)
    return LimitSample(u, w_seed)
