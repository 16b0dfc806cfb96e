"""Fractional Brownian motion sampling, geometric rough lifts and the
centred Levy-area process.

Array conventions used throughout the package: increments are stored
time-major, ``(..., n, m)``, where leading axes index replicates.  The
single-path dataclasses below wrap the same kernels.
"""

from __future__ import annotations

import functools
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.fft
import scipy.linalg

from . import rng

log = logging.getLogger(__name__)

EIG_CLIP_TOL = 1e-8
DENSE_MAX_N = 2048
DEFAULT_REFINEMENT = 32


class EmbeddingError(RuntimeError):
    """Neither the circulant embedding nor the dense factorisation is usable."""


def _check_hurst(hurst: float) -> None:
    if not 0.0 < hurst < 1.0:
        raise ValueError(f"Hurst parameter must lie in (0, 1), got {hurst}")


def fbm_covariance(s: float, t: float, hurst: float) -> float:
    """Covariance ``E[B_s B_t]`` of a standard fBm."""
    _check_hurst(hurst)
    if np.any(np.asarray(s) < 0) or np.any(np.asarray(t) < 0):
        raise ValueError("times must be non-negative")
    e = 2.0 * hurst
    return 0.5 * (np.abs(s) ** e + np.abs(t) ** e - np.abs(t - s) ** e)


def rect_increment(u, v, s, t, hurst: float):
    """``E[dB_{uv} dB_{st}]``: rectangular increment of the fBm covariance.

    Accepts arrays; intervals must be ordered (``u <= v`` and ``s <= t``).
    Times may be negative (two-sided fBm), which the quadrature relies on.
    """
    _check_hurst(hurst)
    u, v, s, t = (np.asarray(a, dtype=float) for a in (u, v, s, t))
    if np.any(u > v) or np.any(s > t):
        raise ValueError("rect_increment needs ordered intervals u <= v, s <= t")
    e = 2.0 * hurst
    out = 0.5 * (np.abs(t - u) ** e + np.abs(s - v) ** e - np.abs(t - v) ** e - np.abs(s - u) ** e)
    return out[()] if out.ndim == 0 else out


def fgn_autocovariance(lags, hurst: float) -> np.ndarray:
    """Autocovariance of unit-step fractional Gaussian noise."""
    k = np.abs(np.asarray(lags, dtype=float))
    e = 2.0 * hurst
    return 0.5 * (np.abs(k + 1) ** e + np.abs(k - 1) ** e - 2.0 * k**e)


@functools.lru_cache(maxsize=32)
def _circulant_sqrt_eigs(hurst: float, n: int) -> np.ndarray | None:
    """Square roots of ``lambda / M`` for the size ``M = 2n`` embedding, or
    None when the embedding has a negative eigenvalue beyond tolerance."""
    gam = fgn_autocovariance(np.arange(n + 1), hurst)
    row = np.concatenate([gam, gam[-2:0:-1]])
    lam = scipy.fft.fft(row).real
    lmax = lam.max()
    if lam.min() < -EIG_CLIP_TOL * lmax:
        return None
    lam = np.clip(lam, 0.0, None)
    return np.sqrt(lam / row.size)


@functools.lru_cache(maxsize=8)
def _dense_factor(hurst: float, n: int) -> np.ndarray:
    cov = scipy.linalg.toeplitz(fgn_autocovariance(np.arange(n), hurst))
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, q = np.linalg.eigh(cov)
        if w.min() < -EIG_CLIP_TOL * w.max():
            raise EmbeddingError(
                f"fGn covariance is numerically indefinite (H={hurst}, n={n}, "
                f"min eigenvalue {w.min():.3e})"
            ) from None
        return q * np.sqrt(np.clip(w, 0.0, None))


def sample_increments(
    hurst: float,
    n: int,
    horizon_T: float,
    m: int,
    seed: int,
    replicates: Sequence[int] | int = 1,
    method: str = "auto",
) -> np.ndarray:
    """Exact-law fBm increments on the uniform grid ``t_k = k T / n``.

    Returns an array of shape ``(len(replicates), n, m)``.  Components come in
    pairs ``(2p, 2p+1)`` drawn from the stream ``(seed, FBM, replicate, p)``:
    the real and imaginary parts of one circulant-embedding draw, which are
    independent with the fGn law.  ``method`` is ``"fft"``, ``"dense"`` or
    ``"auto"`` (circulant, dense fallback when the embedding fails).
    """
    _check_hurst(hurst)
    if n < 2:
        raise ValueError(f"need at least 2 grid steps, got n={n}")
    if m < 1:
        raise ValueError(f"need at least one component, got m={m}")
    if horizon_T <= 0:
        raise ValueError("horizon must be positive")
    if isinstance(replicates, (int, np.integer)):
        replicates = range(int(replicates))
    replicates = list(replicates)
    if method not in ("auto", "fft", "dense"):
        raise ValueError(f"unknown method {method!r}")

    sq = None
    if method != "dense":
        sq = _circulant_sqrt_eigs(float(hurst), int(n))
        if sq is None:
            if method == "fft" or n > DENSE_MAX_N:
                raise EmbeddingError(
                    f"circulant embedding has negative eigenvalues (H={hurst}, n={n})"
                )
            log.warning("circulant embedding failed for H=%s n=%d; using dense factor", hurst, n)

    n_pairs = (m + 1) // 2
    scale = (horizon_T / n) ** hurst
    out = np.empty((len(replicates), n, 2 * n_pairs))
    if sq is not None:
        size = sq.size
        z = np.empty((len(replicates), n_pairs, size), dtype=complex)
        for a, r in enumerate(replicates):
            for p in range(n_pairs):
                g = rng.stream(seed, rng.FBM, r, p)
                xi = g.standard_normal((2, size))
                z[a, p].real = xi[0]
                z[a, p].imag = xi[1]
        z *= sq
        x = scipy.fft.fft(z, axis=-1, overwrite_x=True)[..., :n]
        out[..., 0::2] = np.swapaxes(x.real, 1, 2)
        out[..., 1::2] = np.swapaxes(x.imag, 1, 2)
    else:
        fac = _dense_factor(float(hurst), int(n))
        for a, r in enumerate(replicates):
            for p in range(n_pairs):
                g = rng.stream(seed, rng.FBM, r, p)
                xi = g.standard_normal((2, n))
                out[a, :, 2 * p : 2 * p + 2] = (fac @ xi.T)
    out = out[..., :m]
    out *= scale
    return out


def paths_from_increments(dx: np.ndarray) -> np.ndarray:
    """Cumulate ``(..., n, m)`` increments into ``(..., n+1, m)`` values with B_0 = 0."""
    zero = np.zeros(dx.shape[:-2] + (1, dx.shape[-1]))
    return np.concatenate([zero, np.cumsum(dx, axis=-2)], axis=-2)


def restrict_increments(dx: np.ndarray, factor: int) -> np.ndarray:
    """Increments of the path sub-sampled at every ``factor``-th node."""
    n = dx.shape[-2]
    if factor < 1 or n % factor:
        raise ValueError(f"factor {factor} does not divide n={n}")
    if factor == 1:
        return dx
    return dx.reshape(dx.shape[:-2] + (n // factor, factor, dx.shape[-1])).sum(axis=-2)


def lift_increments(dx: np.ndarray, refinement: int) -> tuple[np.ndarray, np.ndarray]:
    """Second-level increments of the piecewise-linear path over coarse cells.

    ``dx`` holds fine increments ``(..., n_fine, m)``; every coarse cell spans
    ``refinement`` fine steps.  Returns ``(delta_b, bb)`` with shapes
    ``(..., n_coarse, m)`` and ``(..., n_coarse, m, m)``.  The symmetric part
    is set to ``delta_b (x) delta_b / 2`` and only the Levy area is
    accumulated, so the shuffle and diagonal identities hold to rounding.
    """
    n_f, m = dx.shape[-2], dx.shape[-1]
    if refinement < 1 or n_f % refinement:
        raise ValueError(f"refinement {refinement} does not divide n_fine={n_f}")
    cells = dx.reshape(dx.shape[:-2] + (n_f // refinement, refinement, m))
    delta_b = cells.sum(axis=-2)
    bb = 0.5 * delta_b[..., :, None] * delta_b[..., None, :]
    if refinement > 1 and m > 1:
        # mid-chord value of the path inside the cell, relative to its left end
        mid = np.cumsum(cells, axis=-2)
        mid -= 0.5 * cells
        for i in range(m):
            for j in range(i + 1, m):
                s_ij = np.einsum("...r,...r->...", mid[..., i], cells[..., j])
                s_ji = np.einsum("...r,...r->...", mid[..., j], cells[..., i])
                area = 0.5 * (s_ij - s_ji)
                bb[..., i, j] += area
                bb[..., j, i] -= area
    return delta_b, bb


def levy_area_values(bb: np.ndarray, hurst: float, step: float) -> np.ndarray:
    """Cumulative sums of second-level increments, diagonal centred by h^{2H}/2."""
    m = bb.shape[-1]
    incr = bb - 0.5 * step ** (2.0 * hurst) * np.eye(m)
    zero = np.zeros(bb.shape[:-3] + (1, m, m))
    return np.concatenate([zero, np.cumsum(incr, axis=-3)], axis=-3)


@dataclass(frozen=True)
class FbmPath:
    hurst: float
    horizon_T: float
    n_fine: int
    components_m: int
    values: np.ndarray = field(repr=False)  # (m, n_fine + 1)
    seed: int = 0
    replicate: int = 0

    @property
    def step(self) -> float:
        return self.horizon_T / self.n_fine

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_fine + 1) * self.step

    @property
    def increments(self) -> np.ndarray:
        """Time-major increments ``(n_fine, m)``."""
        return np.diff(self.values, axis=1).T

    def to_csv(self, fh=None) -> str | None:
        """Write ``t,B1,...,Bm`` rows with 17 significant digits."""
        header = ",".join(["t"] + [f"B{j + 1}" for j in range(self.components_m)])
        data = np.column_stack([self.times, self.values.T])
        buf = io.StringIO() if fh is None else fh
        np.savetxt(buf, data, delimiter=",", header=header, comments="", fmt="%.17g")
        return buf.getvalue() if fh is None else None


@dataclass(frozen=True)
class RoughLift:
    coarse_n: int
    refinement: int
    delta_b: np.ndarray = field(repr=False)  # (coarse_n, m)
    bb: np.ndarray = field(repr=False)  # (coarse_n, m, m)
    hurst: float = 0.5
    horizon_T: float = 1.0

    @property
    def step(self) -> float:
        return self.horizon_T / self.coarse_n


@dataclass(frozen=True)
class LevyAreaF:
    values: np.ndarray = field(repr=False)  # (coarse_n + 1, m, m)
    hurst: float
    horizon_T: float
    coarse_n: int


def generate_fbm(
    hurst: float,
    n_fine: int,
    horizon_T: float = 1.0,
    components_m: int = 1,
    seed: int = 0,
    replicate: int = 0,
    method: str = "auto",
) -> FbmPath:
    dx = sample_increments(hurst, n_fine, horizon_T, components_m, seed, [replicate], method)[0]
    values = paths_from_increments(dx).T.copy()
    values.setflags(write=False)
    return FbmPath(hurst, horizon_T, n_fine, components_m, values, seed, replicate)


def generate_fbm_batch(
    hurst: float,
    n_fine: int,
    horizon_T: float,
    components_m: int,
    seed: int,
    replicates: Iterable[int],
    method: str = "auto",
) -> list[FbmPath]:
    replicates = list(replicates)
    dx = sample_increments(hurst, n_fine, horizon_T, components_m, seed, replicates, method)
    out = []
    for r, inc in zip(replicates, dx):
        values = paths_from_increments(inc).T.copy()
        values.setflags(write=False)
        out.append(FbmPath(hurst, horizon_T, n_fine, components_m, values, seed, r))
    return out


def restrict(path: FbmPath, factor: int) -> FbmPath:
    """Sub-sample ``path`` at every ``factor``-th node."""
    if factor < 1 or path.n_fine % factor:
        raise ValueError(f"factor {factor} does not divide n_fine={path.n_fine}")
    if factor == 1:
        return path
    values = path.values[:, ::factor].copy()
    values.setflags(write=False)
    return FbmPath(
        path.hurst, path.horizon_T, path.n_fine // factor, path.components_m,
        values, path.seed, path.replicate,
    )


def lift_geometric(path: FbmPath, coarse_n: int) -> RoughLift:
    if coarse_n < 1 or path.n_fine % coarse_n:
        raise ValueError(f"coarse_n={coarse_n} does not divide n_fine={path.n_fine}")
    rho = path.n_fine // coarse_n
    delta_b, bb = lift_increments(path.increments, rho)
    return RoughLift(coarse_n, rho, delta_b, bb, path.hurst, path.horizon_T)


def levy_area_process(lift: RoughLift) -> LevyAreaF:
    if lift.bb.shape[-3] != lift.coarse_n:
        raise ValueError("lift does not match its coarse grid")
    values = levy_area_values(lift.bb, lift.hurst, lift.step)
    return LevyAreaF(values, lift.hurst, lift.horizon_T, lift.coarse_n)
