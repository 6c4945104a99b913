"""Domain types for randomly switched semiflow processes.

A state is a pair ``(y, i)``: a point of Y = R^d and a regime index. Between
jumps the point follows the semiflow of its regime; jumps happen at the
events of a rate-``lam`` Poisson clock, where the regime is redrawn from the
routing matrix and the point from the jump kernel evaluated at the
pre-jump position.

All callables here are vectorized: points are ``(P, d)`` arrays, regimes
``(P,)`` integer arrays and times ``(P,)`` arrays.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "HybridState",
    "HybridMetric",
    "AffineFlow",
    "AffineUniformJump",
    "DiracScaleJump",
    "PdmpModel",
    "Observable",
    "ModelError",
    "affine_model",
    "builtin_model",
    "clamp_linear",
    "cosine",
    "tabulated",
    "constant",
    "BUILTIN_MODELS",
]


class ModelError(ValueError):
    """Invalid model or observable definition."""


class HypothesisWarning(UserWarning):
    """A parameter choice violates a sufficient condition for the CLT."""


@dataclass(frozen=True)
class HybridState:
    y: tuple
    i: int = 0

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        if y.ndim != 1:
            raise ModelError("state point must be a flat vector")
        object.__setattr__(self, "y", tuple(float(v) for v in y))
        object.__setattr__(self, "i", int(self.i))

    @property
    def dim(self) -> int:
        return len(self.y)

    def array(self) -> np.ndarray:
        return np.asarray(self.y, dtype=float)


def _euclidean(y1, y2):
    return np.sqrt(np.sum((np.asarray(y1, float) - np.asarray(y2, float)) ** 2, axis=-1))


@dataclass(frozen=True)
class HybridMetric:
    """rho((y1, i1), (y2, i2)) = rho_y(y1, y2) + c * [i1 != i2]."""

    c: float = 1.0
    rho_y: Callable = _euclidean

    def __post_init__(self):
        if not self.c > 0:
            raise ModelError("regime weight c must be positive")

    def __call__(self, y1, i1, y2, i2):
        y1 = np.asarray(y1, float)
        y2 = np.asarray(y2, float)
        d = self.rho_y(y1, y2)
        return d + self.c * (np.asarray(i1) != np.asarray(i2))

    def between(self, x1: HybridState, x2: HybridState) -> float:
        return float(self(x1.array(), x1.i, x2.array(), x2.i))

    def pairwise(self, ys, regimes) -> np.ndarray:
        """Dense distance matrix of a point set (ys: (n, d))."""
        ys = np.asarray(ys, float)
        regimes = np.asarray(regimes)
        if self.rho_y is _euclidean:
            diff = ys[:, None, :] - ys[None, :, :]
            d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        else:
            d = self.rho_y(ys[:, None, :], ys[None, :, :])
        return d + self.c * (regimes[:, None] != regimes[None, :])


# ---------------------------------------------------------------------------
# semiflows and jump kernels


@dataclass(frozen=True)
class AffineFlow:
    """S(t, y) = center + exp(-rate * t) * (y - center)."""

    rate: float
    center: tuple

    def __call__(self, t, y):
        c = np.asarray(self.center, float)
        return c + np.exp(-self.rate * np.asarray(t, float))[..., None] * (y - c)


@dataclass(frozen=True)
class AffineUniformJump:
    """y' = kappa * y + xi with xi uniform on [-beta, beta]^d."""

    kappa: float
    beta: float
    dim: int = 1

    @property
    def n_uniforms(self) -> int:
        return self.dim

    def __call__(self, y, u):
        return self.kappa * y + self.beta * (2.0 * u[:, : self.dim] - 1.0)

    def describe(self) -> dict:
        return {"type": "affine-uniform", "kappa": self.kappa, "beta": self.beta}


@dataclass(frozen=True)
class DiracScaleJump:
    """y' = kappa * y (deterministic kernel)."""

    kappa: float
    n_uniforms: int = 0

    def __call__(self, y, u):
        return self.kappa * y

    def describe(self) -> dict:
        return {"type": "dirac-scale", "kappa": self.kappa}


@dataclass(frozen=True)
class PdmpModel:
    """A randomly switched semiflow process.

    ``semiflows[i](t, y)`` is the flow of regime ``i``; ``jump_kernel(y, u)``
    samples a post-jump point from ``n_uniforms`` uniforms per row.
    """

    name: str
    lam: float
    routing: np.ndarray
    semiflows: tuple
    jump_kernel: Callable
    metric: HybridMetric
    anchor: np.ndarray
    dim: int
    params: dict = field(default_factory=dict)
    flags: tuple = ()

    def __post_init__(self):
        routing = np.array(self.routing, dtype=float)
        routing.setflags(write=False)
        anchor = np.array(self.anchor, dtype=float).reshape(-1)
        anchor.setflags(write=False)
        object.__setattr__(self, "routing", routing)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "semiflows", tuple(self.semiflows))
        if not self.lam > 0:
            raise ModelError("jump rate lam must be positive")
        n = len(self.semiflows)
        if routing.shape != (n, n):
            raise ModelError(f"routing must be {n}x{n}, got {routing.shape}")
        if np.any(routing < 0):
            raise ModelError("routing entries must be nonnegative")
        if np.any(np.abs(routing.sum(axis=1) - 1.0) > 1e-12):
            raise ModelError("routing rows must sum to 1")
        if anchor.shape != (self.dim,):
            raise ModelError("anchor dimension does not match dim")
        cum = np.cumsum(routing, axis=1)
        cum[:, -1] = 1.0
        object.__setattr__(self, "_cum_routing", cum)

    @property
    def n_regimes(self) -> int:
        return len(self.semiflows)

    @property
    def n_uniforms(self) -> int:
        """Uniforms consumed per embedded step: clock, regime, location."""
        return 2 + int(getattr(self.jump_kernel, "n_uniforms", 0))

    def flow(self, t, y, regimes):
        """Vectorized S_i(t, y) with per-row regimes."""
        t = np.asarray(t, float)
        y = np.asarray(y, float)
        regimes = np.asarray(regimes)
        if self.n_regimes == 1:
            return self.semiflows[0](t, y)
        if all(isinstance(s, AffineFlow) for s in self.semiflows):
            rates = np.array([s.rate for s in self.semiflows])[regimes]
            centers = np.array([np.broadcast_to(s.center, (self.dim,)) for s in self.semiflows])
            c = centers[regimes]
            return c + np.exp(-rates * t)[..., None] * (y - c)
        out = np.empty_like(y)
        for k, s in enumerate(self.semiflows):
            m = regimes == k
            if np.any(m):
                out[m] = s(t[m], y[m])
        return out

    def next_regime(self, regimes, u):
        cum = self._cum_routing[np.asarray(regimes)]
        return np.sum(cum[:, :-1] <= np.asarray(u)[:, None], axis=1)

    def jump(self, y, u):
        return self.jump_kernel(y, u)

    def lyapunov(self, y) -> np.ndarray:
        """V(y, i) = rho_y(y, y*); independent of the regime."""
        return self.metric.rho_y(np.asarray(y, float), self.anchor)

    def state(self, y, i: int = 0) -> HybridState:
        x = HybridState(y, i)
        self.check_state(x)
        return x

    def check_state(self, x: HybridState) -> None:
        if x.dim != self.dim:
            raise ModelError(f"state dimension {x.dim} != model dimension {self.dim}")
        if not 0 <= x.i < self.n_regimes:
            raise ModelError(f"regime {x.i} out of range 0..{self.n_regimes - 1}")

    def describe(self) -> dict:
        """JSON-able description; used for the model hash in manifests."""
        return {
            "name": self.name,
            "lam": self.lam,
            "routing": self.routing.tolist(),
            "anchor": self.anchor.tolist(),
            "dim": self.dim,
            "c": self.metric.c,
            "params": self.params,
        }

    def digest(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def semiflow_defect(self, n: int = 1000, seed: int = 0, scale: float = 5.0):
        """Largest violations of S(0,y)=y and S(s,S(t,y))=S(s+t,y).

        The composition defect is normalized by 1 + V(y).
        """
        rng = np.random.default_rng(seed)
        y = rng.normal(scale=scale, size=(n, self.dim)) + self.anchor
        s, t = rng.exponential(2.0, size=(2, n))
        regimes = rng.integers(0, self.n_regimes, size=n)
        rho = self.metric.rho_y
        ident = np.max(rho(self.flow(np.zeros(n), y, regimes), y))
        lhs = self.flow(s, self.flow(t, y, regimes), regimes)
        rhs = self.flow(s + t, y, regimes)
        comp = np.max(rho(lhs, rhs) / (1.0 + self.lyapunov(y)))
        return float(ident), float(comp)

    def claimed_constants(self) -> dict | None:
        """(S1'), (S2'), (J1') constants known by construction (affine models)."""
        return self.params.get("_claimed")


# ---------------------------------------------------------------------------
# constructors


def affine_model(
    rates: Sequence[float],
    centers,
    routing,
    jump: dict,
    lam: float = 1.0,
    anchor=0.0,
    c: float = 1.0,
    name: str = "affine",
    dim: int = 1,
) -> PdmpModel:
    """Model with affine contracting flows and an affine jump kernel.

    ``jump`` is ``{"type": "affine-uniform", "kappa", "beta"}`` or
    ``{"type": "dirac-scale", "kappa"}``.
    """
    rates = [float(a) for a in rates]
    centers = np.asarray(centers, float).reshape(len(rates), -1)
    if centers.shape[1] == 1 and dim > 1:
        centers = np.repeat(centers, dim, axis=1)
    if centers.shape[1] != dim:
        raise ModelError("flow centers do not match dim")
    flows = tuple(AffineFlow(a, tuple(ci)) for a, ci in zip(rates, centers))
    kind = jump.get("type")
    kappa = float(jump["kappa"])
    if kind == "affine-uniform":
        beta = float(jump["beta"])
        kernel = AffineUniformJump(kappa, beta, dim)
    elif kind == "dirac-scale":
        beta = 0.0
        kernel = DiracScaleJump(kappa)
    else:
        raise ModelError(f"unknown jump type {kind!r}")
    anchor = np.broadcast_to(np.asarray(anchor, float), (dim,)).copy()

    # constants valid by construction: contracting flows give L = 1 and
    # zeta = 0 with M the largest center displacement from the anchor
    flags = []
    if any(a < 0 for a in rates):
        flags.append("expanding flow: (S2') fails for every finite L")
    M = float(max(np.linalg.norm(ci - anchor) for ci in centers))
    second = beta**2 * dim / 3.0
    if np.allclose(anchor, 0.0):
        a, b = kappa**2, second
    else:
        # (k y + xi - y*)^2 <= 2 k^2 |y - y*|^2 + 2 (k - 1)^2 |y*|^2 + E xi^2
        a = 2 * kappa**2
        b = 2 * (kappa - 1) ** 2 * float(anchor @ anchor) + second
    if not 2 * a * 1.0**2 < 1:
        flags.append(f"balance condition 2aL^2<1 violated (2aL^2={2 * a:.4g})")
    claimed = {"M": M, "zeta": 0.0, "L": 1.0, "a": float(a), "b": float(b)}
    params = {
        "rates": rates,
        "centers": centers.tolist(),
        "jump": kernel.describe(),
        "_claimed": claimed,
    }
    for msg in flags:
        warnings.warn(f"{name}: {msg}", HypothesisWarning, stacklevel=2)
    return PdmpModel(
        name=name,
        lam=float(lam),
        routing=np.asarray(routing, float),
        semiflows=flows,
        jump_kernel=kernel,
        metric=HybridMetric(float(c)),
        anchor=anchor,
        dim=dim,
        params=params,
        flags=tuple(flags),
    )


def _contract_multijump(alpha=1.0, kappa=0.5, lam=1.0, anchor=0.0, c=1.0):
    return affine_model(
        [alpha], [[0.0]], [[1.0]], {"type": "dirac-scale", "kappa": kappa},
        lam=lam, anchor=anchor, c=c, name="contract-multijump",
    )


def _two_regime_ou(
    alpha=(1.0, 2.0), c_flow=(0.0, 1.0), kappa=0.5, beta=1.0, lam=1.0,
    p=0.5, q=0.5, anchor=0.0, c=1.0,
):
    routing = [[1 - p, p], [q, 1 - q]]
    return affine_model(
        list(alpha), [[v] for v in c_flow], routing,
        {"type": "affine-uniform", "kappa": kappa, "beta": beta},
        lam=lam, anchor=anchor, c=c, name="two-regime-ou",
    )


BUILTIN_MODELS = {
    "contract-multijump": _contract_multijump,
    "two-regime-ou": _two_regime_ou,
}


def builtin_model(name: str, params: dict | None = None) -> PdmpModel:
    """Instantiate a registered example model with parameter overrides.

    Defaults are implementer choices (the construction fixes no numbers):
    contract-multijump uses alpha=1, kappa=0.5, lam=1; two-regime-ou uses
    alpha=(1, 2), c_flow=(0, 1), kappa=0.5, beta=1, lam=1, p=q=0.5.
    """
    try:
        factory = BUILTIN_MODELS[name]
    except KeyError:
        raise ModelError(f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}") from None
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", HypothesisWarning)
            model = factory(**(params or {}))
    except TypeError as exc:
        raise ModelError(f"bad parameter for {name}: {exc}") from None
    return model


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class _ClampLinear:
    radius: float
    coord: int = 0

    def __call__(self, y, i):
        return np.clip(np.asarray(y, float)[:, self.coord], -self.radius, self.radius)


@dataclass(frozen=True)
class _Cosine:
    freq: float
    coord: int = 0

    def __call__(self, y, i):
        return np.cos(self.freq * np.asarray(y, float)[:, self.coord])


@dataclass(frozen=True)
class _Tabulated:
    grid: tuple
    values: tuple  # one row per regime
    coord: int = 0

    def __call__(self, y, i):
        y = np.asarray(y, float)[:, self.coord]
        i = np.asarray(i)
        grid = np.asarray(self.grid)
        vals = np.asarray(self.values)
        out = np.empty(len(y))
        for k in range(vals.shape[0]):
            m = i == k
            out[m] = np.interp(y[m], grid, vals[k])
        return out


@dataclass(frozen=True)
class _Constant:
    value: float

    def __call__(self, y, i):
        return np.full(np.asarray(y).shape[0], self.value)


@dataclass(frozen=True)
class Observable:
    """Bounded Lipschitz function on Y x I with certified constants.

    ``lip_const`` is with respect to the hybrid metric. The stationary mean
    is attached later with :meth:`with_mean`.
    """

    name: str
    func: Callable
    sup_bound: float
    lip_const: float
    mean_under_mu_star: float | None = None
    params: dict = field(default_factory=dict)

    def __call__(self, y, i):
        return self.func(np.atleast_2d(np.asarray(y, float)), np.atleast_1d(i))

    @property
    def bl_norm(self) -> float:
        return max(self.sup_bound, self.lip_const)

    def with_mean(self, mean: float) -> Observable:
        return replace(self, mean_under_mu_star=float(mean))

    def centered(self):
        """The centered observable g - <g, mu*> as a vectorized callable."""
        if self.mean_under_mu_star is None:
            raise ModelError(f"observable {self.name!r} has no stationary mean attached")
        return _Centered(self.func, self.mean_under_mu_star)

    def is_constant(self) -> bool:
        return isinstance(self.func, _Constant)

    def describe(self) -> dict:
        return {"name": self.name, **self.params, "mean_under_mu_star": self.mean_under_mu_star}


@dataclass(frozen=True)
class _Centered:
    func: Callable
    mean: float

    def __call__(self, y, i):
        return self.func(y, i) - self.mean


def clamp_linear(radius: float, coord: int = 0) -> Observable:
    if not radius > 0:
        raise ModelError("clamp radius must be positive")
    return Observable("clamp-linear", _ClampLinear(float(radius), coord), float(radius), 1.0,
                      params={"R": float(radius), "coord": coord})


def cosine(freq: float = 1.0, coord: int = 0) -> Observable:
    return Observable("cosine", _Cosine(float(freq), coord), 1.0, abs(float(freq)),
                      params={"freq": float(freq), "coord": coord})


def constant(value: float = 1.0) -> Observable:
    return Observable("constant", _Constant(float(value)), abs(float(value)), 0.0,
                      params={"value": float(value)})


def tabulated(grid, values, c: float = 1.0, coord: int = 0) -> Observable:
    """Piecewise-linear g(y, i) through ``values[i]`` at ``grid``.

    Extended flat outside the grid. ``c`` is the regime weight of the metric
    the Lipschitz constant is certified against.
    """
    grid = np.asarray(grid, float)
    vals = np.atleast_2d(np.asarray(values, float))
    if grid.ndim != 1 or len(grid) < 2 or np.any(np.diff(grid) <= 0):
        raise ModelError("tabulated grid must be strictly increasing with >= 2 nodes")
    if vals.shape[1] != len(grid):
        raise ModelError("tabulated values do not match grid")
    slope = float(np.max(np.abs(np.diff(vals, axis=1)) / np.diff(grid)))
    cross = float(np.max(vals.max(axis=0) - vals.min(axis=0))) / c if vals.shape[0] > 1 else 0.0
    func = _Tabulated(tuple(grid), tuple(map(tuple, vals)), coord)
    return Observable("tabulated", func, float(np.max(np.abs(vals))), max(slope, cross),
                      params={"grid": grid.tolist(), "values": vals.tolist()})
