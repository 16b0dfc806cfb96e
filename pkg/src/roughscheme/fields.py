"""Coefficient fields b, V and the derivative combinations the schemes need.

All evaluations broadcast over leading axes: ``y`` has shape ``(..., d)``.
Index conventions::

    V[..., k, j]          = V^k_j
    dV[..., k, l, j]      = d_l V^k_j
    ddV[..., k, l, p, j]  = d_p d_l V^k_j
    dVV[..., k, i, j]     = (dV_i V_j)^k
    d_dVV[..., k, p, i, j] = d_p (dV_i V_j)^k
    dddVVV[..., k, i, j, q] = (d(dV_i V_j) V_q)^k

Subclasses provide ``eval_b``, ``eval_db``, ``eval_V``, ``eval_dV`` and
``eval_ddV``; the iterated fields are derived here.
"""

from __future__ import annotations

import numpy as np


class CoefficientField:
    dim_d: int
    dim_m: int
    name = "field"

    def eval_b(self, y):
        raise NotImplementedError

    def eval_db(self, y):
        raise NotImplementedError

    def eval_V(self, y):
        raise NotImplementedError

    def eval_dV(self, y):
        raise NotImplementedError

    def eval_ddV(self, y):
        raise NotImplementedError

    def eval_dVV(self, y):
        return np.einsum("...kli,...lj->...kij", self.eval_dV(y), self.eval_V(y))

    def eval_d_dVV(self, y):
        V, dV, ddV = self.eval_V(y), self.eval_dV(y), self.eval_ddV(y)
        return (np.einsum("...klpi,...lj->...kpij", ddV, V)
                + np.einsum("...kli,...lpj->...kpij", dV, dV))

    def eval_dddVVV(self, y):
        return np.einsum("...kpij,...pq->...kijq", self.eval_d_dVV(y), self.eval_V(y))

    def check_shape(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.shape[-1:] != (self.dim_d,):
            raise ValueError(f"{self.name}: expected state dimension {self.dim_d}, got shape {y.shape}")
        return y

    def __repr__(self):
        return f"{type(self).__name__}(d={self.dim_d}, m={self.dim_m})"


class GeometricField(CoefficientField):
    """d = m = 1, b = 0, V(y) = sigma y.  Exact solution y0 exp(sigma B_t)."""

    name = "geometric"

    def __init__(self, sigma: float = 1.0):
        self.dim_d = self.dim_m = 1
        self.sigma = float(sigma)

    def eval_b(self, y):
        return np.zeros_like(self.check_shape(y))

    def eval_db(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape + (1,))

    def eval_V(self, y):
        y = self.check_shape(y)
        return self.sigma * y[..., None]

    def eval_dV(self, y):
        y = self.check_shape(y)
        return np.full(y.shape + (1, 1), self.sigma)

    def eval_ddV(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape + (1, 1, 1))

    def exact_solution(self, y0, b_values):
        """``y0 exp(sigma B)`` for path values ``(..., n+1, 1)``."""
        return np.asarray(y0, dtype=float) * np.exp(self.sigma * np.asarray(b_values))


class AdditiveField(CoefficientField):
    """Constant diffusion matrix and constant drift: every scheme is exact."""

    name = "additive"

    def __init__(self, V, b=None):
        self.V = np.atleast_2d(np.asarray(V, dtype=float))
        self.dim_d, self.dim_m = self.V.shape
        self.b = np.zeros(self.dim_d) if b is None else np.asarray(b, dtype=float)

    def eval_b(self, y):
        y = self.check_shape(y)
        return np.broadcast_to(self.b, y.shape).copy()

    def eval_db(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape + (self.dim_d,))

    def eval_V(self, y):
        y = self.check_shape(y)
        return np.broadcast_to(self.V, y.shape[:-1] + self.V.shape).copy()

    def eval_dV(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape[:-1] + (self.dim_d, self.dim_d, self.dim_m))

    def eval_ddV(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape[:-1] + (self.dim_d,) * 3 + (self.dim_m,))


class LinearField(CoefficientField):
    """``b(y) = B y``, ``V_j(y) = A_j y`` with ``A`` of shape ``(m, d, d)``."""

    name = "linear"

    def __init__(self, A, B=None):
        self.A = np.asarray(A, dtype=float)
        self.dim_m, self.dim_d, _ = self.A.shape
        self.B = np.zeros((self.dim_d, self.dim_d)) if B is None else np.asarray(B, dtype=float)

    def eval_b(self, y):
        return self.check_shape(y) @ self.B.T

    def eval_db(self, y):
        y = self.check_shape(y)
        return np.broadcast_to(self.B, y.shape[:-1] + self.B.shape).copy()

    def eval_V(self, y):
        return np.einsum("jkl,...l->...kj", self.A, self.check_shape(y))

    def eval_dV(self, y):
        y = self.check_shape(y)
        dv = np.transpose(self.A, (1, 2, 0))
        return np.broadcast_to(dv, y.shape[:-1] + dv.shape).copy()

    def eval_ddV(self, y):
        y = self.check_shape(y)
        return np.zeros(y.shape[:-1] + (self.dim_d,) * 3 + (self.dim_m,))


class RotationField(CoefficientField):
    """Bounded 2-d field with noncommuting vector fields (d = m = 2).

    ``V_j(y) = sigma (cos(y2 + phi_j), sin(y1 + phi_j))`` with ``phi_1 = 0``
    and ``phi_2 = phase``; drift ``b(y) = drift (-sin y1, cos y2)``.  The
    bracket ``[V_1, V_2]`` is proportional to ``sin(phase)``, so ``phase``
    dials the noncommutativity from zero up to a full quarter turn.  All
    derivatives are bounded.
    """

    name = "rotation"

    def __init__(self, sigma: float = 1.0, phase: float = 0.3, drift: float = 0.5):
        self.dim_d = self.dim_m = 2
        self.sigma, self.phase, self.drift = float(sigma), float(phase), float(drift)
        self._phi = np.array([0.0, self.phase])

    def _angles(self, y):
        y = self.check_shape(y)
        return y[..., 0, None] + self._phi, y[..., 1, None] + self._phi

    def eval_b(self, y):
        y = self.check_shape(y)
        return self.drift * np.stack([-np.sin(y[..., 0]), np.cos(y[..., 1])], axis=-1)

    def eval_db(self, y):
        y = self.check_shape(y)
        out = np.zeros(y.shape + (2,))
        out[..., 0, 0] = -self.drift * np.cos(y[..., 0])
        out[..., 1, 1] = -self.drift * np.sin(y[..., 1])
        return out

    def eval_V(self, y):
        a1, a2 = self._angles(y)
        return self.sigma * np.stack([np.cos(a2), np.sin(a1)], axis=-2)

    def eval_dV(self, y):
        a1, a2 = self._angles(y)
        out = np.zeros(a1.shape[:-1] + (2, 2, 2))
        # [k, l, j] = d_l V^k_j
        out[..., 0, 1, :] = -self.sigma * np.sin(a2)
        out[..., 1, 0, :] = self.sigma * np.cos(a1)
        return out

    def eval_ddV(self, y):
        a1, a2 = self._angles(y)
        out = np.zeros(a1.shape[:-1] + (2, 2, 2, 2))
        # [k, l, p, j] = d_p d_l V^k_j
        out[..., 0, 1, 1, :] = -self.sigma * np.cos(a2)
        out[..., 1, 0, 0, :] = -self.sigma * np.sin(a1)
        return out


BUILTIN_FIELDS = {
    "geometric": GeometricField,
    "rotation": RotationField,
}


def make_field(name: str, **params) -> CoefficientField:
    try:
        cls = BUILTIN_FIELDS[name]
    except KeyError:
        raise ValueError(f"unknown field {name!r}; choose from {sorted(BUILTIN_FIELDS)}") from None
    return cls(**params)


def commutator(field: CoefficientField, y, i: int = 0, j: int = 1) -> np.ndarray:
    """Lie bracket ``dV_j V_i - dV_i V_j`` at ``y``."""
    dvv = field.eval_dVV(y)
    return dvv[..., :, j, i] - dvv[..., :, i, j]
