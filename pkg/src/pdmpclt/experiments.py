"""Experiment pipelines shared by the CLI commands.

Each pipeline draws from its own child of the root stream, so running a
command alone or inside ``full-report`` gives the same numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis import (
    Estimate, MartingaleDecomposition, MeanEstimate, MonteCarloCorrector, Sigma2Report, _tail_bound,
    decompose, default_clamp_radius, estimate_mean_mu_star, qv_slope, sample_mu_star, sigma2_green,
    sigma2_martingale,
)
from .clt import CltReport, clt_report, clt_samples, lindeberg_profile, variance_plateau, VariancePlateau
from .config import ConfigError, ExperimentConfig
from .engine import simulate_ensemble
from .exact import AffineCorrector, AffineMoments
from .fm import EmpiricalMeasure
from .hypotheses import (
    CheckResult, ErgodicityEstimate, HypothesisConstants, check_balance, check_genlap, check_j1, check_s1,
    check_s2, fit_drift, probe_ergodicity,
)
from .model import HybridState, ModelError, Observable, PdmpModel, _ClampLinear, _Constant
from .rng import RngStream

__all__ = ["Streams", "offset_state", "resolve_observable", "run_check", "run_sigma2", "run_clt",
           "Sigma2Outcome", "CltOutcome"]


SIGMA2_ZERO = 1e-12


class Streams:
    """Fixed child-stream ids of the root seed."""

    SIMULATE = 1
    CHECK = 2
    SIGMA2 = 3
    CLT = 4
    CLAMP = 9


def offset_state(model: PdmpModel, offset: float, i: int = 0) -> HybridState:
    """Anchor shifted by ``offset`` along the first coordinate."""
    y = model.anchor.copy()
    y[0] += offset
    return model.state(tuple(y), i)


def resolve_observable(cfg: ExperimentConfig, model: PdmpModel, root: RngStream) -> Observable:
    radius = None
    if cfg.observable.kind == "clamp-linear" and cfg.observable.radius is None:
        radius = default_clamp_radius(model, root.split(Streams.CLAMP), x0=cfg.init_state(model),
                                      burn_in=cfg.run.burn_in_time)
    return cfg.build_observable(radius)


# ---------------------------------------------------------------------------
# hypotheses


def _ergodicity_result(est: ErgodicityEstimate) -> CheckResult:
    d = est.to_dict()
    return CheckResult("H1", not est.no_signal, est.fit_r2 if not est.no_signal else math.nan,
                       {"gamma_hat": est.gamma_hat, "kappa_hat": est.kappa_hat}, d["grid"],
                       {"fit_r2": est.fit_r2, "no_signal": est.no_signal, "noise_floor": est.noise_floor,
                        "fitted": True})


def run_check(cfg: ExperimentConfig, model: PdmpModel, root: RngStream):
    """All hypothesis checks; returns (payload, passed, tables)."""
    rng = root.split(Streams.CHECK)
    c = cfg.check
    consts = HypothesisConstants.from_model(model, strict=False)
    results = [
        check_s1(model, c.flow_times, (consts.M, consts.zeta)),
        check_s2(model, [0.0, *c.flow_times], c.pair_samples, rng.split(1), consts.L),
        check_j1(model, [model.anchor[0] + y for y in c.jump_points] if model.dim == 1 else
                 [model.anchor + np.eye(model.dim)[0] * y for y in c.jump_points],
                 c.jump_samples, rng.split(2), (consts.a, consts.b)),
    ]
    balance = check_balance(consts)
    results.append(balance)
    drift = fit_drift(model, [offset_state(model, y) for y in c.drift_points],
                      np.linspace(0.0, c.drift_max_time, c.drift_grid_size), c.drift_replicas, rng.split(3))
    if balance.passed:
        strict = HypothesisConstants.from_model(model)
        genlap = check_genlap(model, strict, [offset_state(model, y) for y in c.genlap_points],
                              c.genlap_times, c.genlap_replicas, rng.split(4))
    else:
        genlap = CheckResult("gen-lap", False, math.nan, consts.to_dict(), [],
                             {"skipped": "balance condition fails"})
    results.append(genlap)
    erg = probe_ergodicity(model, offset_state(model, c.ergodicity_start_a),
                           offset_state(model, c.ergodicity_start_b),
                           np.linspace(0.0, c.ergodicity_max_time, c.ergodicity_grid_size),
                           c.ergodicity_ensemble, c.fm_subsample, rng.split(5))
    checks = [r.to_dict() for r in results]
    checks.insert(4, drift.to_dict())
    checks.append(_ergodicity_result(erg).to_dict())
    passed = all(r.passed for r in results) and drift.passed and not erg.no_signal
    payload = {
        "model": model.describe(),
        "model_flags": list(model.flags),
        "constants": consts.to_dict(),
        "checks": checks,
        "pass": passed,
    }
    tables = {
        "genlap_margins.csv": (["y", "regime", "t0", "series", "stderr", "bound", "margin"],
                               [(r["y"][0], r["i"], r["t0"], r["series"], r["stderr"], r["bound"], r["margin"])
                                for r in genlap.grid]),
        "jump_moments.csv": (["y", "second_moment", "stderr", "bound", "margin"],
                             [(r["y"][0], r["second_moment"], r["stderr"], r["bound"], r["margin"])
                              for r in results[2].grid]),
    }
    return payload, passed, tables, erg


# ---------------------------------------------------------------------------
# asymptotic variance


@dataclass
class Sigma2Outcome:
    report: Sigma2Report
    mean: MeanEstimate
    g: Observable  # with the stationary mean attached
    mu_star: EmpiricalMeasure
    decomps: MartingaleDecomposition
    chi_table: list

    @property
    def passed(self) -> bool:
        return self.report.agreement_z <= 3


def _analytic_ok(model: PdmpModel, g: Observable, init: HybridState) -> bool:
    if not isinstance(g.func, _ClampLinear):
        return False
    try:
        am = AffineMoments(model, g.func.coord)
    except ModelError:
        return False
    y0 = abs(init.y[g.func.coord])
    return g.func.radius >= am.invariant_radius(y0)


def _zero_chi(ys, regs):
    return np.zeros(len(np.asarray(regs).reshape(-1)))


def _evenly(mu: EmpiricalMeasure, n: int) -> EmpiricalMeasure:
    if n >= len(mu):
        return mu
    idx = np.linspace(0, len(mu) - 1, n).round().astype(int)
    return EmpiricalMeasure.uniform(mu.ys[idx], mu.regimes[idx])


def run_sigma2(cfg: ExperimentConfig, model: PdmpModel, g: Observable, root: RngStream,
               erg: ErgodicityEstimate | None = None) -> Sigma2Outcome:
    rng = root.split(Streams.SIGMA2)
    r, s = cfg.run, cfg.sigma2
    init = cfg.init_state(model)
    h = r.quad_step_time
    mean = estimate_mean_mu_star(model, g, r.burn_in_time, r.burn_in_time + r.mean_run_time, rng.split(1),
                                 x0=init, n_batches=r.mean_batches, h_max=h)
    gm = mean.observable
    mu = sample_mu_star(model, r.mu_star_points, r.burn_in_time, r.mu_star_spacing_time, rng.split(2), x0=init)

    trunc_T = tail = None
    chi_err = None
    if isinstance(g.func, _Constant):
        chi_fn, source = _zero_chi, "zero (constant observable)"
    elif s.chi == "monte-carlo" or (s.chi == "auto" and not _analytic_ok(model, gm, init)):
        chi_fn = MonteCarloCorrector(model, gm, rng.split(3), s.trunc_time, s.chi_step_time, s.chi_replicas)
        trunc_T, source = chi_fn.trunc_T, "monte-carlo"
        mu = _evenly(mu, s.mc_points)
    else:
        if not _analytic_ok(model, gm, init):
            raise ConfigError("sigma2.chi=analytic needs an affine model and a clamp radius "
                              "covering the invariant interval")
        chi_fn, source = AffineCorrector.for_model(model, gm.func.coord), "analytic"

    s_mart = sigma2_martingale(model, gm, chi_fn, mu, rng.split(4))
    chi_vals = np.asarray(chi_fn(mu.ys, mu.regimes))
    if isinstance(chi_fn, MonteCarloCorrector):
        chi_err = chi_fn.stderr(mu.ys, mu.regimes)
    s_green = sigma2_green(gm, chi_vals, mu, chi_err)

    n_qv = s.qv_replicas if source != "monte-carlo" else min(s.qv_replicas, 20)
    T_qv = s.qv_horizon_time if source != "monte-carlo" else min(s.qv_horizon_time, 20.0)
    starts = _evenly(mu, n_qv)
    if len(starts) < n_qv:
        idx = np.arange(n_qv) % len(starts)
        start_pair = (starts.ys[idx], starts.regimes[idx])
    else:
        start_pair = (starts.ys, starts.regimes)
    ens = simulate_ensemble(model, start_pair, T_qv, rng.split(5).spawn_keys(n_qv))
    dec = decompose(ens, model, gm, chi_fn, grid_step=1.0, h_max=h)
    s_qv = qv_slope(dec, dec.n_increments)

    if isinstance(chi_fn, MonteCarloCorrector):
        table = chi_fn.table()
        if erg is not None and not erg.no_signal:
            tail = max(_tail_bound(gm, model, np.array(row[:model.dim]), erg, trunc_T) for row in table)
    else:
        table = [(*y, int(i), float(v), 0.0) for y, i, v in zip(mu.ys, mu.regimes, chi_vals)]
    report = Sigma2Report(s_mart, s_green, s_qv, trunc_T, tail, Estimate(mean.value, mean.stderr), source)
    return Sigma2Outcome(report, mean, gm, mu, dec, table)


# ---------------------------------------------------------------------------
# CLT


@dataclass
class CltOutcome:
    report: CltReport
    lindeberg: list
    plateau: VariancePlateau

    @property
    def passed(self) -> bool:
        return self.report.passed

    def to_dict(self) -> dict:
        return {**self.report.to_dict(), "lindeberg": self.lindeberg, "variance_plateau": self.plateau.to_dict()}


def validate_clt(cfg: ExperimentConfig) -> None:
    if cfg.clt.acceptance and cfg.run.replicas < 500:
        raise ConfigError(f"run.replicas={cfg.run.replicas}: acceptance runs need at least 500 replicas")


def run_clt(cfg: ExperimentConfig, model: PdmpModel, root: RngStream, sigma: Sigma2Outcome,
            workers: int = 1) -> CltOutcome:
    validate_clt(cfg)
    rng = root.split(Streams.CLT)
    r = cfg.run
    init = sigma.mu_star if r.stationary_start else cfg.init_state(model)
    samples = clt_samples(model, sigma.g, init, r.horizon_time, r.replicas, rng, workers=workers,
                          h_max=r.quad_step_time)
    ref = sigma.report.reference
    if ref.value <= max(3 * ref.stderr, SIGMA2_ZERO):
        # not significantly positive: the limit law is the point mass at 0
        ref = Estimate(0.0, ref.stderr)
    report = clt_report(samples, r.horizon_time, ref, cfg.clt.alpha, cfg.clt.eps_dirac)
    n_avail = sigma.decomps.n_increments
    ns = [n for n in cfg.clt.lindeberg_n if n <= n_avail]
    lind = lindeberg_profile(sigma.decomps, cfg.clt.lindeberg_eps, ns) if ns else []
    plateau = variance_plateau(sigma.decomps, n_avail)
    return CltOutcome(report, lind, plateau)
