"""Closed-form moments of affine switched models.

For flows ``c_i + exp(-a_i t)(y - c_i)`` and jumps ``kappa*y + xi`` the
regime-weighted moments ``p_i = P(xi=i)``, ``m_i = E[y 1{i}]`` and
``q_i = E[y^2 1{i}]`` of one coordinate solve a closed linear ODE. This gives
exact transition moments, the stationary moments, the corrector of the
linear observable (affine in y per regime) and its asymptotic variance.

These are used as oracles and as the analytic corrector for the built-in
models. They describe the *linear* observable, so they coincide with the
clamp-linear observable only while paths stay inside the clamp; see
:meth:`AffineMoments.invariant_radius`.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .model import AffineFlow, AffineUniformJump, DiracScaleJump, HybridState, ModelError, PdmpModel

__all__ = ["AffineMoments", "AffineCorrector"]


class AffineMoments:
    def __init__(self, model: PdmpModel, coord: int = 0):
        if not all(isinstance(s, AffineFlow) for s in model.semiflows):
            raise ModelError("closed-form moments need affine flows")
        kern = model.jump_kernel
        if isinstance(kern, AffineUniformJump):
            self.kappa, self.noise2 = kern.kappa, kern.beta**2 / 3.0
        elif isinstance(kern, DiracScaleJump):
            self.kappa, self.noise2 = kern.kappa, 0.0
        else:
            raise ModelError("closed-form moments need an affine jump kernel")
        self.model = model
        self.coord = coord
        self.rates = np.array([s.rate for s in model.semiflows])
        self.centers = np.array([np.broadcast_to(s.center, (model.dim,))[coord] for s in model.semiflows])
        self.lam = model.lam
        self.pi = np.asarray(model.routing)
        self.n = model.n_regimes

    # generator of z = (p, m, q) acting as dz/dt = G z
    @cached_property
    def generator(self) -> np.ndarray:
        n, lam, a, c, k = self.n, self.lam, self.rates, self.centers, self.kappa
        pt = self.pi.T
        eye = np.eye(n)
        G = np.zeros((3 * n, 3 * n))
        G[:n, :n] = lam * (pt - eye)
        G[n:2 * n, :n] = np.diag(a * c)
        G[n:2 * n, n:2 * n] = -np.diag(a) + lam * (k * pt - eye)
        G[2 * n:, :n] = lam * self.noise2 * pt
        G[2 * n:, n:2 * n] = np.diag(2 * a * c)
        G[2 * n:, 2 * n:] = -np.diag(2 * a) + lam * (k**2 * pt - eye)
        return G

    def _start(self, x: HybridState) -> np.ndarray:
        z = np.zeros(3 * self.n)
        y = x.y[self.coord]
        z[x.i] = 1.0
        z[self.n + x.i] = y
        z[2 * self.n + x.i] = y * y
        return z

    def moments(self, x: HybridState, t) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(p, m, q) at time t from x; each an array over regimes."""
        z = expm(self.generator * float(t)) @ self._start(x)
        n = self.n
        return z[:n], z[n:2 * n], z[2 * n:]

    def mean_at(self, x: HybridState, t) -> float:
        """E_x y(t) (coordinate ``coord``)."""
        return float(self.moments(x, t)[1].sum())

    def lyapunov2_at(self, x: HybridState, t) -> float:
        """P(t)V^2(x) for V = |y - y*| in dimension one."""
        if self.model.dim != 1:
            raise ModelError("P(t)V^2 closed form implemented for dim 1")
        p, m, q = self.moments(x, t)
        ys = self.model.anchor[0]
        return float(q.sum() - 2 * ys * m.sum() + ys * ys * p.sum())

    @cached_property
    def stationary(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stationary (p, m, q)."""
        n = self.n
        G = self.generator.copy()
        rhs = np.zeros(3 * n)
        # replace one balance row of the regime chain by normalization
        G[0, :] = 0.0
        G[0, :n] = 1.0
        rhs[0] = 1.0
        z = np.linalg.solve(G, rhs)
        return z[:n], z[n:2 * n], z[2 * n:]

    @property
    def mean(self) -> float:
        """Stationary mean of the coordinate."""
        return float(self.stationary[1].sum())

    @cached_property
    def corrector_coefficients(self) -> tuple[np.ndarray, np.ndarray]:
        """(A, B) with chi(y, i) = A_i y + B_i for g(y) = y."""
        n, lam, a, c, k = self.n, self.lam, self.rates, self.centers, self.kappa
        A = np.linalg.solve(np.diag(a + lam) - lam * k * self.pi, np.ones(n))
        p, m, _ = self.stationary
        rhs = a * c * A - self.mean
        # lam (I - Pi) B = rhs, fixed by <chi, mu*> = 0
        lhs = np.vstack([lam * (np.eye(n) - self.pi), p[None, :]])
        B, *_ = np.linalg.lstsq(lhs, np.concatenate([rhs, [-A @ m]]), rcond=None)
        return A, B

    def chi(self, y, i) -> np.ndarray:
        A, B = self.corrector_coefficients
        i = np.asarray(i)
        return A[i] * np.asarray(y, float)[:, self.coord] + B[i]

    @property
    def sigma2(self) -> float:
        """Asymptotic variance 2 <chi gbar, mu*> of the linear observable."""
        A, B = self.corrector_coefficients
        _, m, q = self.stationary
        return float(2 * (A @ q + B @ m))

    def invariant_radius(self, y0: float = 0.0) -> float:
        """Radius of an interval around 0 that paths from y0 never leave."""
        if abs(self.kappa) >= 1:
            return np.inf
        beta = np.sqrt(3 * self.noise2)
        return float(max(abs(y0), np.max(np.abs(self.centers)), beta / (1 - abs(self.kappa))))


@dataclass(frozen=True)
class AffineCorrector:
    """Analytic corrector for a clamp-linear observable on an affine model.

    Exact while |y| stays below the clamp radius.
    """

    A: tuple
    B: tuple
    coord: int = 0

    @classmethod
    def for_model(cls, model: PdmpModel, coord: int = 0) -> AffineCorrector:
        A, B = AffineMoments(model, coord).corrector_coefficients
        return cls(tuple(A), tuple(B), coord)

    def __call__(self, y, i):
        i = np.asarray(i)
        return np.asarray(self.A)[i] * np.asarray(y, float)[:, self.coord] + np.asarray(self.B)[i]
