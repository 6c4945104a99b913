"""CLT statistic ensembles, the normality test and martingale diagnostics."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .analysis import Estimate, MartingaleDecomposition
from .engine import QUAD_STEP, path_integrals, simulate_ensemble
from .fm import EmpiricalMeasure
from .model import HybridState, Observable, PdmpModel
from .rng import RngStream

__all__ = [
    "clt_samples",
    "normal_cdf",
    "ks_test",
    "KsResult",
    "CltReport",
    "clt_report",
    "cdf_plot_data",
    "lindeberg_profile",
    "variance_plateau",
    "MIN_ACCEPTANCE_REPLICAS",
]

MIN_ACCEPTANCE_REPLICAS = 500
_KS_CRITICAL = {0.05: 1.358, 0.01: 1.628}
_CHUNK = 250


def _integrate_chunk(model, gbar, x0, t, keys, h_max):
    ens = simulate_ensemble(model, x0, t, keys)
    vals, _ = path_integrals(ens, model, gbar, [0.0, t], h_max)
    return vals[:, 0] / math.sqrt(t)


def clt_samples(
    model: PdmpModel,
    g: Observable,
    init,
    t: float,
    n_rep: int,
    rng: RngStream,
    *,
    workers: int = 1,
    h_max: float = QUAD_STEP,
) -> np.ndarray:
    """n_rep independent values of t^{-1/2} int_0^t gbar(Psi(s)) ds.

    ``init`` is a HybridState or an EmpiricalMeasure (starts drawn i.i.d.
    by weight). Replicas are processed in fixed chunks, so the output does
    not depend on ``workers``.
    """
    gbar = g.centered()
    if not t > 0:
        raise ValueError("t must be positive")
    if n_rep < 2:
        raise ValueError("n_rep must be >= 2")
    if g.is_constant():
        return np.zeros(n_rep)
    keys = rng.spawn_keys(n_rep)
    if isinstance(init, EmpiricalMeasure):
        idx = rng.split(1).generator().choice(len(init), size=n_rep, p=init.weights)
        starts = (init.ys[idx], init.regimes[idx])
    elif isinstance(init, HybridState):
        model.check_state(init)
        starts = (np.tile(init.array(), (n_rep, 1)), np.full(n_rep, init.i))
    else:
        raise TypeError("init must be a HybridState or an EmpiricalMeasure")
    jobs = []
    for lo in range(0, n_rep, _CHUNK):
        hi = min(n_rep, lo + _CHUNK)
        jobs.append((model, gbar, (starts[0][lo:hi], starts[1][lo:hi]), t, keys[lo:hi], h_max))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_integrate_chunk, *zip(*jobs)))
    else:
        parts = [_integrate_chunk(*job) for job in jobs]
    return np.concatenate(parts)


def normal_cdf(u, sigma: float):
    """Phi_sigma(u); sigma = 0 gives the right-continuous step 1[u >= 0]."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    u = np.asarray(u, float)
    if sigma == 0:
        out = (u >= 0).astype(float)
    else:
        out = 0.5 * (1.0 + np.vectorize(math.erf, otypes=[float])(u / (sigma * math.sqrt(2.0))))
    return float(out) if out.ndim == 0 else out


def _ks_critical(alpha: float) -> float:
    for a, c in _KS_CRITICAL.items():
        if math.isclose(alpha, a):
            return c
    return math.sqrt(-0.5 * math.log(alpha / 2))


@dataclass(frozen=True)
class KsResult:
    stat: float
    threshold: float
    passed: bool
    concentration: float | None = None  # 0.99-quantile of |samples| when sigma = 0

    def __iter__(self):
        yield self.stat
        yield self.threshold
        yield self.passed


def ks_test(samples, sigma2_ref: float, alpha: float = 0.05, eps_dirac: float = 0.1) -> KsResult:
    """One-sample Kolmogorov-Smirnov test against Phi_sigma.

    With sigma2_ref = 0 the verdict is the concentration check
    q_0.99(|samples|) <= eps_dirac; the KS statistic against the step
    function is still reported.
    """
    x = np.sort(np.asarray(samples, float))
    n = len(x)
    if n == 0:
        raise ValueError("samples are empty")
    if sigma2_ref < 0:
        raise ValueError("sigma2_ref must be nonnegative")
    F = normal_cdf(x, math.sqrt(sigma2_ref))
    F = np.atleast_1d(F)
    k = np.arange(1, n + 1)
    stat = float(max(np.max(k / n - F), np.max(F - (k - 1) / n)))
    if sigma2_ref == 0:
        q = float(np.quantile(np.abs(x), 0.99))
        return KsResult(stat, eps_dirac, q <= eps_dirac, q)
    thr = _ks_critical(alpha) / math.sqrt(n)
    return KsResult(stat, thr, stat <= thr)


@dataclass(frozen=True)
class CltReport:
    t: float
    n_rep: int
    samples: np.ndarray
    sample_mean: float
    sample_var: float
    sigma2_ref: Estimate
    ks: KsResult
    alpha: float

    @property
    def ks_stat(self) -> float:
        return self.ks.stat

    @property
    def ks_threshold(self) -> float:
        return self.ks.threshold

    @property
    def mean_ok(self) -> bool:
        return abs(self.sample_mean) <= 4 * math.sqrt(self.sample_var / self.n_rep)

    @property
    def degenerate(self) -> bool:
        return self.sigma2_ref.value == 0

    @property
    def variance_z(self) -> float:
        """|sample_var - sigma2| over the combined standard error."""
        c = self.samples - self.sample_mean
        se_var = math.sqrt(max(np.mean(c**4) - self.sample_var**2, 0.0) / self.n_rep)
        se = math.hypot(se_var, self.sigma2_ref.stderr)
        diff = abs(self.sample_var - self.sigma2_ref.value)
        if se == 0:
            return 0.0 if diff == 0 else math.inf
        return diff / se

    @property
    def passed(self) -> bool:
        # with sigma = 0 the O(t^-1/2) bias dominates the vanishing spread,
        # so only the concentration verdict is meaningful
        if self.degenerate:
            return self.ks.passed
        return self.ks.passed and self.mean_ok

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "n_rep": self.n_rep,
            "sample_mean": self.sample_mean,
            "sample_var": self.sample_var,
            "sigma2_ref": self.sigma2_ref.as_dict(),
            "alpha": self.alpha,
            "ks_stat": self.ks_stat,
            "ks_threshold": self.ks_threshold,
            "concentration_q99": self.ks.concentration,
            "mean_within_4se": self.mean_ok,
            "variance_z": self.variance_z,
            "pass": self.passed,
        }


def clt_report(samples, t: float, sigma2_ref: Estimate, alpha: float = 0.01,
               eps_dirac: float = 0.1) -> CltReport:
    s = np.asarray(samples, float)
    ks = ks_test(s, sigma2_ref.value, alpha, eps_dirac)
    return CltReport(float(t), len(s), s, float(np.mean(s)), float(np.var(s, ddof=1)), sigma2_ref, ks, alpha)


def cdf_plot_data(samples, sigma: float) -> list[tuple[float, float, float]]:
    """(u, empirical CDF, Phi_sigma(u)) at every sorted sample."""
    x = np.sort(np.asarray(samples, float))
    n = len(x)
    phi = np.atleast_1d(normal_cdf(x, sigma))
    return [(float(u), (k + 1) / n, float(p)) for k, (u, p) in enumerate(zip(x, phi))]


def lindeberg_profile(decomps, eps_list, ns=(32, 128, 512)) -> list[dict]:
    """n^-1 sum_{i<n} E[Z(i+1)^2 1{|Z(i+1)| >= eps sqrt(n)}] per (n, eps)."""
    dec = MartingaleDecomposition.concat(decomps)
    rows = []
    for n in ns:
        if dec.n_increments < n:
            raise ValueError(f"need {n} increments, have {dec.n_increments}")
        Z = dec.Z[:, :n]
        for eps in eps_list:
            per = np.mean(Z**2 * (np.abs(Z) >= eps * math.sqrt(n)), axis=1)
            se = float(np.std(per, ddof=1) / math.sqrt(len(per))) if len(per) > 1 else 0.0
            rows.append({"n": int(n), "eps": float(eps), "value": float(np.mean(per)), "stderr": se})
    return rows


@dataclass(frozen=True)
class VariancePlateau:
    means: np.ndarray  # E Z(n)^2 for n = 1..n_max
    stderrs: np.ndarray
    max_value: float
    tail_slope: Estimate

    @property
    def trend_free(self) -> bool:
        return self.tail_slope.value <= 4 * self.tail_slope.stderr + 1e-300

    def to_dict(self) -> dict:
        return {
            "means": self.means.tolist(),
            "stderrs": self.stderrs.tolist(),
            "max": self.max_value,
            "tail_slope": self.tail_slope.as_dict(),
            "trend_free": self.trend_free,
        }


def variance_plateau(decomps, n_max: int) -> VariancePlateau:
    """Per-n ensemble mean of Z(n)^2 and the slope over the last half."""
    dec = MartingaleDecomposition.concat(decomps)
    if dec.n_increments < n_max:
        raise ValueError(f"need {n_max} increments, have {dec.n_increments}")
    Z2 = dec.Z[:, :n_max] ** 2
    N = len(Z2)
    means = Z2.mean(axis=0)
    se = Z2.std(axis=0, ddof=1) / math.sqrt(N) if N > 1 else np.zeros(n_max)
    lo = n_max // 2
    n = np.arange(lo + 1, n_max + 1, dtype=float)
    if len(n) >= 2:
        nc = n - n.mean()
        slopes = (Z2[:, lo:] - Z2[:, lo:].mean(axis=1, keepdims=True)) @ nc / np.dot(nc, nc)
        slope = Estimate(float(slopes.mean()), float(slopes.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0)
    else:
        slope = Estimate(0.0, 0.0)
    return VariancePlateau(means, se, float(means.max()), slope)


def default_workers() -> int:
    env = os.environ.get("PDMPCLT_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1
