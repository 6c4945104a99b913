"""Corrector, martingale decomposition and asymptotic-variance estimators.

With gbar = g - <g, mu*> and the corrector chi(x) = int_0^inf P(t)gbar(x) dt,

    int_0^t gbar(Psi(s)) ds = M(t) + chi(Psi(0)) - chi(Psi(t)),
    M(t) = chi(Psi(t)) - chi(Psi(0)) + int_0^t gbar(Psi(s)) ds,

where M is a martingale. The asymptotic variance is estimated three ways:
E_{mu*} M(1)^2, 2 <chi gbar, mu*>, and the growth rate of the summed
squared unit increments of M.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .engine import (
    Ensemble, Trajectory, final_states, path_integrals, simulate_ensemble, states_at, QUAD_STEP,
)
from .fm import EmpiricalMeasure
from .model import HybridState, ModelError, Observable, PdmpModel
from .rng import RngStream, derive_keys

__all__ = [
    "Estimate",
    "MeanEstimate",
    "CorrectorEstimate",
    "MartingaleDecomposition",
    "Sigma2Report",
    "MonteCarloCorrector",
    "estimate_mean_mu_star",
    "sample_mu_star",
    "corrector_time_grid",
    "estimate_corrector",
    "decompose",
    "sigma2_martingale",
    "sigma2_green",
    "qv_slope",
    "increment_orthogonality",
    "remainder_decay",
    "default_clamp_radius",
]


@dataclass(frozen=True)
class Estimate:
    value: float
    stderr: float

    def __iter__(self):
        yield self.value
        yield self.stderr

    def z(self, other: Estimate) -> float:
        """|difference| in units of the combined standard error."""
        se = np.hypot(self.stderr, other.stderr)
        diff = abs(self.value - other.value)
        if se == 0:
            return 0.0 if diff == 0 else np.inf
        return float(diff / se)

    def as_dict(self) -> dict:
        return {"value": self.value, "stderr": self.stderr}


@dataclass(frozen=True)
class MeanEstimate(Estimate):
    observable: Observable | None = None
    n_batches: int = 0


def _start_of(model: PdmpModel, x0) -> HybridState:
    return HybridState(model.anchor, 0) if x0 is None else x0


def estimate_mean_mu_star(
    model: PdmpModel,
    g: Observable,
    burn_in: float,
    horizon: float,
    rng: RngStream,
    *,
    x0: HybridState | None = None,
    n_batches: int = 32,
    h_max: float = QUAD_STEP,
) -> MeanEstimate:
    """Stationary mean of g from time averages over [burn_in, horizon].

    Each batch is an independent chain started at ``x0``; the standard error
    is the batch-means standard error. The returned estimate carries the
    observable with the mean attached.
    """
    if not horizon > burn_in >= 0:
        raise ValueError("need horizon > burn_in >= 0")
    if n_batches < 2:
        raise ValueError("at least two batches are needed for a standard error")
    if g.is_constant():
        value = g.func.value
        return MeanEstimate(value, 0.0, g.with_mean(value), n_batches)
    ens = simulate_ensemble(model, _start_of(model, x0), horizon, rng.spawn_keys(n_batches))
    ints, _ = path_integrals(ens, model, g.func, [burn_in, horizon], h_max)
    batch = ints[:, 0] / (horizon - burn_in)
    mean = float(np.mean(batch))
    se = float(np.std(batch, ddof=1) / np.sqrt(n_batches))
    return MeanEstimate(mean, se, g.with_mean(mean), n_batches)


def sample_mu_star(
    model: PdmpModel,
    n: int,
    burn_in: float,
    spacing: float,
    rng: RngStream,
    *,
    x0: HybridState | None = None,
    n_chains: int = 1,
) -> EmpiricalMeasure:
    """Uniform empirical stand-in for mu*.

    States are read off at burn_in + k*spacing along ``n_chains`` long
    trajectories (one by default), n points in total.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    per = -(-n // n_chains)
    times = burn_in + spacing * np.arange(per)
    horizon = max(times[-1], 1e-12)
    ens = simulate_ensemble(model, _start_of(model, x0), horizon, rng.spawn_keys(n_chains))
    ys, regs = states_at(ens, model, times)
    ys = ys.reshape(-1, model.dim)[:n]
    regs = regs.reshape(-1)[:n]
    return EmpiricalMeasure.uniform(ys, regs)


def default_clamp_radius(
    model: PdmpModel,
    rng: RngStream,
    *,
    x0: HybridState | None = None,
    burn_in: float | None = None,
    n: int = 2000,
) -> float:
    """10x the 99.9th percentile of V over states sampled after burn-in.

    The radius also covers the start, so the observable is not clamped
    along the initial transient; 1 is used when both are zero.
    """
    x0 = _start_of(model, x0)
    burn_in = 20.0 / model.lam if burn_in is None else burn_in
    mu = sample_mu_star(model, n, burn_in, 1.0 / model.lam, rng, x0=x0, n_chains=20)
    v = model.lyapunov(mu.ys)
    r = max(10.0 * float(np.quantile(v, 0.999)), float(model.lyapunov(x0.array())))
    return r if r > 0 else 1.0


# ---------------------------------------------------------------------------
# corrector


@dataclass(frozen=True)
class CorrectorEstimate:
    x: HybridState
    value: float
    stat_err: float
    trunc_T: float
    tail_bound: float | None = None


def corrector_time_grid(trunc_T: float, step: float) -> np.ndarray:
    """0, then geometric up to ``step``, then uniform with ``step`` to trunc_T."""
    if not trunc_T > 0 or not step > 0:
        raise ValueError("trunc_T and step must be positive")
    geo = step * 2.0 ** -np.arange(6, 0, -1)
    uni = np.arange(step, trunc_T, step)
    grid = np.concatenate([[0.0], geo[geo < trunc_T], uni, [trunc_T]])
    return np.unique(grid)


def _tail_bound(g: Observable, model: PdmpModel, y, ergodicity, trunc_T):
    if ergodicity is None or not ergodicity.gamma_hat > 0:
        return None
    gamma = ergodicity.gamma_hat
    cbar = ergodicity.kappa_hat * np.sqrt(model.lyapunov(np.asarray(y, float)) + 1.0)
    return g.bl_norm * cbar * np.exp(-gamma * trunc_T) / gamma


def _corrector_batch(model, g, ys, regs, keys_per_state, trunc_T, grid):
    """Monte-Carlo chi at several states; keys_per_state: (S, n_rep, 2)."""
    gbar = g.centered()
    S, n_rep, _ = keys_per_state.shape
    values = np.empty(S)
    errs = np.empty(S)
    per_chunk = max(1, 4_000_000 // (n_rep * len(grid)))
    for s0 in range(0, S, per_chunk):
        sl = slice(s0, min(S, s0 + per_chunk))
        k = sl.stop - sl.start
        y0 = np.repeat(ys[sl], n_rep, axis=0)
        i0 = np.repeat(regs[sl], n_rep)
        ens = simulate_ensemble(model, (y0, i0), trunc_T, keys_per_state[sl].reshape(-1, 2))
        yt, it = states_at(ens, model, grid)
        vals = gbar(yt.reshape(-1, model.dim), it.reshape(-1)).reshape(k * n_rep, len(grid))
        integ = np.trapezoid(vals, grid, axis=1).reshape(k, n_rep)
        values[sl] = integ.mean(axis=1)
        errs[sl] = integ.std(axis=1, ddof=1) / np.sqrt(n_rep)
    return values, errs


def estimate_corrector(
    model: PdmpModel,
    g: Observable,
    x: HybridState,
    trunc_T: float | None = None,
    t_grid_step: float = 0.02,
    n_rep: int = 1000,
    rng: RngStream | None = None,
    *,
    ergodicity=None,
) -> CorrectorEstimate:
    """Monte-Carlo chi(x) truncated at trunc_T (default 20/lam).

    P(t)gbar(x) is the ensemble mean of gbar(Psi(t)) on a time grid and is
    integrated with the trapezoid rule. The standard error is taken across
    replica-wise integrals, which accounts for the correlation between grid
    times. A tail bound is attached when an ergodicity estimate is given.
    """
    g.centered()  # fails early without a stationary mean
    model.check_state(x)
    trunc_T = 20.0 / model.lam if trunc_T is None else float(trunc_T)
    rng = RngStream(0) if rng is None else rng
    grid = corrector_time_grid(trunc_T, t_grid_step)
    keys = rng.spawn_keys(n_rep)[None, :, :]
    v, e = _corrector_batch(model, g, x.array()[None, :], np.array([x.i]), keys, trunc_T, grid)
    tail = _tail_bound(g, model, x.array(), ergodicity, trunc_T)
    return CorrectorEstimate(x, float(v[0]), float(e[0]), trunc_T,
                             None if tail is None else float(tail))


def _state_ids(ys, regs) -> np.ndarray:
    """Stable 64-bit id per state, independent of query order."""
    out = np.empty(len(regs), dtype=np.uint64)
    for k, (y, i) in enumerate(zip(np.asarray(ys, float), regs)):
        h = hashlib.blake2b(y.tobytes() + int(i).to_bytes(4, "little"), digest_size=8)
        out[k] = int.from_bytes(h.digest(), "little")
    return out


class MonteCarloCorrector:
    """Memoized Monte-Carlo corrector usable as a ``chi_fn``.

    Each queried state gets its own child stream derived from a hash of the
    state, so values do not depend on query order and are independent of
    any outer trajectory randomness.
    """

    def __init__(self, model, g, rng: RngStream, trunc_T=None, t_grid_step=0.02, n_rep=400):
        g.centered()
        self.model = model
        self.g = g
        self.rng = rng
        self.trunc_T = 20.0 / model.lam if trunc_T is None else float(trunc_T)
        self.grid = corrector_time_grid(self.trunc_T, t_grid_step)
        self.n_rep = n_rep
        self._cache: dict = {}

    def _key(self, y, i):
        return (np.asarray(y, float).tobytes(), int(i))

    def __call__(self, ys, regs) -> np.ndarray:
        ys = np.asarray(ys, float).reshape(-1, self.model.dim)
        regs = np.asarray(regs).reshape(-1)
        keys = [self._key(y, i) for y, i in zip(ys, regs)]
        todo = {}
        for k, key in enumerate(keys):
            if key not in self._cache and key not in todo:
                todo[key] = k
        if todo:
            idx = np.fromiter(todo.values(), dtype=np.int64)
            ids = _state_ids(ys[idx], regs[idx])
            state_keys = derive_keys(self.rng.key, ids)
            rep_keys = derive_keys(np.repeat(state_keys, self.n_rep, axis=0),
                                   np.tile(np.arange(self.n_rep, dtype=np.uint64), len(idx)))
            v, e = _corrector_batch(self.model, self.g, ys[idx], regs[idx],
                                    rep_keys.reshape(len(idx), self.n_rep, 2), self.trunc_T, self.grid)
            for key, vv, ee in zip(todo, v, e):
                self._cache[key] = (float(vv), float(ee))
        return np.array([self._cache[k][0] for k in keys])

    def stderr(self, ys, regs) -> np.ndarray:
        self(ys, regs)
        ys = np.asarray(ys, float).reshape(-1, self.model.dim)
        return np.array([self._cache[self._key(y, i)][1] for y, i in zip(ys, np.asarray(regs).reshape(-1))])

    def table(self) -> list[tuple]:
        """(y..., regime, chi, stderr) rows of every cached state, sorted."""
        rows = []
        for (yb, i), (v, e) in self._cache.items():
            rows.append((*np.frombuffer(yb, dtype=float), i, v, e))
        return sorted(rows)


# ---------------------------------------------------------------------------
# martingale decomposition


@dataclass(frozen=True)
class MartingaleDecomposition:
    """Martingale pieces for N replicas (N may be 1).

    ``M`` is sampled on ``times``; ``Z[:, n-1] = M(n) - M(n-1)``.
    """

    times: np.ndarray  # (G,)
    M: np.ndarray  # (N, G)
    Z: np.ndarray  # (N, n_int)
    integral: np.ndarray  # (N,) int_0^T gbar
    R_T: np.ndarray  # (N,)
    horizon: float
    quad_err: np.ndarray = field(default=None)

    @property
    def qv(self) -> np.ndarray:
        """Running sum of squared unit increments, (N, n_int)."""
        return np.cumsum(self.Z**2, axis=1)

    @property
    def n_increments(self) -> int:
        return self.Z.shape[1]

    def identity_residual(self) -> float:
        """max |T^-1/2 int gbar - (M(T)/sqrt(T) + R(T))|."""
        T = self.horizon
        lhs = self.integral / np.sqrt(T)
        rhs = self.M[:, -1] / np.sqrt(T) + self.R_T
        return float(np.max(np.abs(lhs - rhs)))

    @staticmethod
    def concat(decomps) -> MartingaleDecomposition:
        if isinstance(decomps, MartingaleDecomposition):
            return decomps
        decomps = list(decomps)
        n = min(d.n_increments for d in decomps)
        first = decomps[0]
        return MartingaleDecomposition(
            first.times,
            np.vstack([d.M for d in decomps]) if all(len(d.times) == len(first.times) for d in decomps) else first.M,
            np.vstack([d.Z[:, :n] for d in decomps]),
            np.concatenate([d.integral for d in decomps]),
            np.concatenate([d.R_T for d in decomps]),
            first.horizon,
        )


def _as_ensemble(traj) -> Ensemble:
    if isinstance(traj, Ensemble):
        return traj
    return Ensemble(traj.taus[None, :], traj.ys[None], traj.regimes[None, :],
                    np.array([len(traj.taus)]), traj.horizon, np.zeros((1, 2), np.uint64))


def decompose(
    traj,
    model: PdmpModel,
    g: Observable,
    chi_fn: Callable,
    grid_step: float = 1.0,
    h_max: float = QUAD_STEP,
) -> MartingaleDecomposition:
    """Martingale decomposition along a trajectory or an ensemble.

    M is evaluated on a grid with spacing ``grid_step`` that always
    contains the integer times (and the horizon).
    """
    ens = _as_ensemble(traj)
    T = ens.horizon
    if T < 1:
        raise ValueError("horizon must be at least 1")
    n_int = int(np.floor(T + 1e-12))
    grid = np.unique(np.concatenate([np.arange(0.0, T, grid_step), np.arange(0, n_int + 1), [T]]))
    grid = grid[grid <= T]
    gbar = g.centered()
    ints, errs = path_integrals(ens, model, gbar, grid, h_max)
    cum = np.concatenate([np.zeros((ens.n_rep, 1)), np.cumsum(ints, axis=1)], axis=1)
    yt, it = states_at(ens, model, grid)
    chi = np.asarray(chi_fn(yt.reshape(-1, model.dim), it.reshape(-1)), float).reshape(ens.n_rep, len(grid))
    M = chi - chi[:, :1] + cum
    at = np.searchsorted(grid, np.arange(n_int + 1))
    Z = np.diff(M[:, at], axis=1)
    R_T = (chi[:, 0] - chi[:, -1]) / np.sqrt(T)
    return MartingaleDecomposition(grid, M, Z, cum[:, -1], R_T, T, errs.sum(axis=1))


def _weighted_mean_se(values, weights, n_batches: int = 32):
    """Weighted mean with a batch-means standard error.

    Points sampled along one trajectory are serially correlated, so the
    spread is taken over contiguous batches instead of single points.
    """
    w = np.asarray(weights, float)
    v = np.asarray(values, float)
    mean = float(np.dot(w, v))
    n = len(v)
    if n < 2:
        return mean, np.inf
    nb = min(n_batches, n)
    edges = np.linspace(0, n, nb + 1).astype(int)
    wb = np.add.reduceat(w, edges[:-1])
    mb = np.add.reduceat(w * v, edges[:-1]) / np.where(wb > 0, wb, 1.0)
    var = float(np.sum(wb**2 * (mb - mean) ** 2)) * nb / (nb - 1)
    return mean, float(np.sqrt(var))


def sigma2_martingale(
    model: PdmpModel,
    g: Observable,
    chi_fn: Callable,
    mu_star: EmpiricalMeasure,
    rng: RngStream,
) -> Estimate:
    """E_{mu*} Z(1)^2 with one unit-time path from every support point."""
    if len(mu_star) == 0:
        raise ValueError("mu_star is empty")
    if g.is_constant():
        return Estimate(0.0, 0.0)
    ens = simulate_ensemble(model, (mu_star.ys, mu_star.regimes), 1.0, rng.spawn_keys(len(mu_star)))
    dec = decompose(ens, model, g, chi_fn, grid_step=1.0)
    z2 = dec.Z[:, 0] ** 2
    return Estimate(*_weighted_mean_se(z2, mu_star.weights))


def sigma2_green(
    g: Observable,
    chi_values,
    mu_star: EmpiricalMeasure,
    chi_stderr=None,
) -> Estimate:
    """2 <chi gbar, mu*> on the empirical measure.

    The standard error combines the sampling spread over the support with
    the Monte-Carlo noise of the chi values (delta method).
    """
    chi_values = np.asarray(chi_values, float)
    if chi_values.shape != (len(mu_star),):
        raise ValueError(f"chi_values has shape {chi_values.shape}, measure has {len(mu_star)} points")
    gbar = g.centered()(mu_star.ys, mu_star.regimes)
    terms = 2.0 * chi_values * gbar
    w = mu_star.weights
    value, se = _weighted_mean_se(terms, w)
    if not np.any(terms):
        return Estimate(0.0, 0.0)
    if chi_stderr is not None:
        se = float(np.hypot(se, np.sqrt(np.sum((2 * w * gbar * np.asarray(chi_stderr)) ** 2))))
    return Estimate(value, se)


def qv_slope(decomps, n_max: int) -> Estimate:
    """Least-squares slope in n of the ensemble mean of sum_{k<=n} Z(k)^2.

    The standard error is the spread of replica-wise slopes.
    """
    dec = MartingaleDecomposition.concat(decomps)
    if dec.n_increments < n_max:
        raise ValueError(f"need {n_max} increments, have {dec.n_increments}")
    S = np.cumsum(dec.Z[:, :n_max] ** 2, axis=1)
    n = np.arange(1, n_max + 1, dtype=float)
    nc = n - n.mean()
    slopes = (S - S.mean(axis=1, keepdims=True)) @ nc / np.dot(nc, nc)
    se = float(np.std(slopes, ddof=1) / np.sqrt(len(slopes))) if len(slopes) > 1 else np.inf
    return Estimate(float(np.mean(slopes)), se)


def increment_orthogonality(decomps, lags=(1, 2, 3, 4, 5)) -> list[dict]:
    """Correlation of (Z(n), Z(n+k)) pooled over n, with t-statistics.

    The t-statistic tests E[Z(n) Z(n+k)] = 0 using replica-wise averages of
    the products, which are independent across replicas.
    """
    dec = MartingaleDecomposition.concat(decomps)
    Z = dec.Z
    out = []
    for k in lags:
        if Z.shape[1] <= k:
            raise ValueError(f"lag {k} needs more than {Z.shape[1]} increments")
        a, b = Z[:, :-k], Z[:, k:]
        prod = (a * b).mean(axis=1)
        mean = prod.mean()
        se = prod.std(ddof=1) / np.sqrt(len(prod))
        scale = np.sqrt(np.mean(a**2) * np.mean(b**2))
        corr = mean / scale if scale > 0 else 0.0
        t = mean / se if se > 0 else 0.0
        out.append({"lag": k, "corr": float(corr), "corr_stderr": float(se / scale) if scale > 0 else 0.0,
                    "t": float(t)})
    return out


def remainder_decay(
    model: PdmpModel,
    x0,
    chi_fn: Callable,
    times,
    n_rep: int,
    rng: RngStream,
) -> list[Estimate]:
    """E|R(t)| = E|chi(Psi(0)) - chi(Psi(t))| / sqrt(t) at each time."""
    times = np.asarray(times, float)
    ens = simulate_ensemble(model, x0, float(times.max()), rng.spawn_keys(n_rep))
    ys, regs = states_at(ens, model, np.concatenate([[0.0], times]))
    chi = np.asarray(chi_fn(ys.reshape(-1, model.dim), regs.reshape(-1))).reshape(n_rep, -1)
    out = []
    for k, t in enumerate(times):
        r = np.abs(chi[:, 0] - chi[:, k + 1]) / np.sqrt(t)
        out.append(Estimate(float(r.mean()), float(r.std(ddof=1) / np.sqrt(n_rep))))
    return out


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class Sigma2Report:
    sigma2_mart: Estimate
    sigma2_green: Estimate
    qv_slope: Estimate
    trunc_T: float | None = None
    tail_bound: float | None = None
    mean: Estimate | None = None
    chi_source: str = ""

    @property
    def agreement_z(self) -> float:
        """Largest pairwise |difference| / combined stderr."""
        e = [self.sigma2_mart, self.sigma2_green, self.qv_slope]
        return max(e[0].z(e[1]), e[0].z(e[2]), e[1].z(e[2]))

    @property
    def reference(self) -> Estimate:
        """Inverse-variance weighted combination of the two direct estimators."""
        a, b = self.sigma2_mart, self.sigma2_green
        if a.stderr == 0 or b.stderr == 0:
            return a if a.stderr == 0 else b
        wa, wb = 1 / a.stderr**2, 1 / b.stderr**2
        return Estimate((wa * a.value + wb * b.value) / (wa + wb), float(np.sqrt(1 / (wa + wb))))

    def to_dict(self) -> dict:
        return {
            "sigma2_mart": self.sigma2_mart.value,
            "sigma2_green": self.sigma2_green.value,
            "qv_slope": self.qv_slope.value,
            "stderrs": {
                "sigma2_mart": self.sigma2_mart.stderr,
                "sigma2_green": self.sigma2_green.stderr,
                "qv_slope": self.qv_slope.stderr,
            },
            "agreement_z": self.agreement_z,
            "trunc_T": self.trunc_T,
            "tail_bound": self.tail_bound,
            "mean_under_mu_star": None if self.mean is None else self.mean.as_dict(),
            "chi_source": self.chi_source,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)
