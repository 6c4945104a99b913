import json

import numpy as np
import pytest

from pdmpclt.analysis import (
    Estimate, MartingaleDecomposition, MonteCarloCorrector, Sigma2Report, corrector_time_grid, decompose,
    default_clamp_radius, estimate_corrector, estimate_mean_mu_star, increment_orthogonality, qv_slope,
    remainder_decay, sample_mu_star, sigma2_green, sigma2_martingale,
)
from pdmpclt.engine import simulate, simulate_ensemble
from pdmpclt.exact import AffineCorrector
from pdmpclt.fm import EmpiricalMeasure
from pdmpclt.model import HybridState, ModelError, clamp_linear, constant
from pdmpclt.rng import RngStream

OU_MEAN = 8 / 19  # hand-derived stationary mean, see test_exact
OU_SIGMA2 = 0.48403557  # closed-form affine corrector, cross-checked by simulation in test_exact


@pytest.fixture
def g_contract():
    return clamp_linear(5.0).with_mean(0.0)


@pytest.fixture
def g_ou():
    return clamp_linear(10.0).with_mean(OU_MEAN)


def chi_contract(ys, regs):
    return np.asarray(ys, float)[:, 0] / 1.5


# stationary mean and samples


def test_stationary_mean(ou):
    est = estimate_mean_mu_star(ou, clamp_linear(10.0), 20.0, 2020.0, RngStream(1), n_batches=16)
    assert abs(est.value - OU_MEAN) <= 4 * est.stderr
    assert est.observable.mean_under_mu_star == est.value


def test_mean_of_constant_is_exact(ou):
    est = estimate_mean_mu_star(ou, constant(2.5), 1.0, 2.0, RngStream(0))
    assert est.value == 2.5 and est.stderr == 0.0


def test_mean_argument_checks(ou):
    with pytest.raises(ValueError):
        estimate_mean_mu_star(ou, clamp_linear(1.0), 5.0, 5.0, RngStream(0))
    with pytest.raises(ValueError):
        estimate_mean_mu_star(ou, clamp_linear(1.0), 0.0, 5.0, RngStream(0), n_batches=1)


def test_sample_mu_star(ou):
    a = sample_mu_star(ou, 300, 10.0, 2.0, RngStream(4))
    b = sample_mu_star(ou, 300, 10.0, 2.0, RngStream(4))
    assert len(a) == 300 and np.array_equal(a.ys, b.ys)
    c = sample_mu_star(ou, 301, 10.0, 2.0, RngStream(4), n_chains=7)
    assert len(c) == 301


def test_default_clamp_radius_covers_start(contract, ou):
    r = default_clamp_radius(contract, RngStream(1), x0=HybridState((3.0,), 0))
    assert r >= 3.0
    assert default_clamp_radius(ou, RngStream(1)) >= 2.0  # paths stay in [-2, 2]


# corrector


def test_time_grid():
    grid = corrector_time_grid(20.0, 0.02)
    assert grid[0] == 0 and grid[-1] == 20.0
    assert np.all(np.diff(grid) > 0) and np.max(np.diff(grid)) <= 0.02 + 1e-12
    assert np.min(np.diff(grid)) < 0.001
    with pytest.raises(ValueError):
        corrector_time_grid(0.0, 0.1)


def test_corrector_closed_form(contract, g_contract):
    est = estimate_corrector(contract, g_contract, HybridState((1.0,), 0), trunc_T=20.0, n_rep=1000,
                             rng=RngStream(3))
    assert abs(est.value - 1 / 1.5) <= 3 * est.stat_err


def test_corrector_at_fixed_point(contract, g_contract):
    est = estimate_corrector(contract, g_contract, HybridState((0.0,), 0), trunc_T=20.0, n_rep=200,
                             rng=RngStream(3))
    assert abs(est.value) <= 3 * est.stat_err + 1e-15


def test_corrector_error_scaling(ou, g_ou):
    x = HybridState((1.0,), 0)
    e1 = estimate_corrector(ou, g_ou, x, trunc_T=10.0, t_grid_step=0.05, n_rep=400, rng=RngStream(5)).stat_err
    e2 = estimate_corrector(ou, g_ou, x, trunc_T=10.0, t_grid_step=0.05, n_rep=800, rng=RngStream(6)).stat_err
    assert abs(e2 / e1 - 1 / np.sqrt(2)) <= 0.2 / np.sqrt(2)


def test_corrector_truncation_consistency(ou, g_ou):
    x = HybridState((2.0,), 1)
    a = estimate_corrector(ou, g_ou, x, trunc_T=20.0, t_grid_step=0.05, n_rep=600, rng=RngStream(7))
    b = estimate_corrector(ou, g_ou, x, trunc_T=40.0, t_grid_step=0.05, n_rep=600, rng=RngStream(8))
    assert abs(a.value - b.value) <= 3 * np.hypot(a.stat_err, b.stat_err)


def test_corrector_needs_mean(ou):
    with pytest.raises(ModelError):
        estimate_corrector(ou, clamp_linear(1.0), HybridState((0.0,), 0))


def test_monte_carlo_corrector_is_order_independent(contract, g_contract):
    ys = np.array([[1.0], [0.5], [1.0]])
    regs = np.array([0, 0, 0])
    a = MonteCarloCorrector(contract, g_contract, RngStream(2), trunc_T=10.0, n_rep=50)
    b = MonteCarloCorrector(contract, g_contract, RngStream(2), trunc_T=10.0, n_rep=50)
    va = a(ys, regs)
    vb = b(ys[::-1], regs[::-1])[::-1]
    assert np.array_equal(va, vb) and va[0] == va[2]
    assert len(a.table()) == 2
    assert np.all(a.stderr(ys, regs) > 0)


# martingale decomposition


def test_decomposition_identities(contract, g_contract):
    tr = simulate(contract, HybridState((1.0,), 0), 10.5, RngStream(1))
    dec = decompose(tr, contract, g_contract, chi_contract, grid_step=0.5)
    assert np.all(dec.M[:, 0] == 0.0)
    assert dec.n_increments == 10
    assert dec.identity_residual() <= 1e-12
    assert np.allclose(dec.qv[:, -1], np.sum(dec.Z**2, axis=1))


def test_decompose_needs_unit_horizon(contract, g_contract):
    tr = simulate(contract, HybridState((1.0,), 0), 0.5, RngStream(1))
    with pytest.raises(ValueError):
        decompose(tr, contract, g_contract, chi_contract)


def test_martingale_mean_zero(contract, g_contract):
    ens = simulate_ensemble(contract, HybridState((1.0,), 0), 5.0, RngStream(2).spawn_keys(2000))
    dec = decompose(ens, contract, g_contract, chi_contract)
    m5 = dec.M[:, -1]
    assert abs(m5.mean()) <= 4 * m5.std(ddof=1) / np.sqrt(len(m5))


def test_increment_orthogonality(ou, g_ou):
    chi = AffineCorrector.for_model(ou)
    ens = simulate_ensemble(ou, HybridState((0.4,), 0), 30.0, RngStream(3).spawn_keys(300))
    rows = increment_orthogonality(decompose(ens, ou, g_ou, chi), lags=range(1, 6))
    assert [r["lag"] for r in rows] == [1, 2, 3, 4, 5]
    assert all(abs(r["t"]) <= 4 for r in rows)


def test_remainder_decays(ou):
    chi = AffineCorrector.for_model(ou)
    est = remainder_decay(ou, HybridState((0.0,), 0), chi, [25.0, 100.0, 400.0], 300, RngStream(4))
    vals = [e.value for e in est]
    assert vals[0] >= vals[1] >= vals[2] and vals[2] <= vals[0] / 2


# variance estimators


def test_sigma2_martingale_and_green_on_contract(contract, g_contract):
    mu = EmpiricalMeasure.uniform(np.zeros((50, 1)), np.zeros(50, int))
    s = sigma2_martingale(contract, g_contract, chi_contract, mu, RngStream(1))
    assert abs(s.value) <= 3 * s.stderr + 1e-15
    gr = sigma2_green(g_contract, chi_contract(mu.ys, mu.regimes), mu)
    assert gr.value == 0.0


def test_sigma2_of_constant_is_zero(ou):
    g = constant(3.0).with_mean(3.0)
    mu = EmpiricalMeasure.uniform(np.zeros((5, 1)), np.zeros(5, int))
    assert sigma2_martingale(ou, g, lambda y, i: np.zeros(len(i)), mu, RngStream(0)).value == 0.0


def test_green_with_zero_chi_and_alignment(ou, g_ou):
    mu = EmpiricalMeasure.uniform(np.linspace(-1, 1, 10), np.zeros(10, int))
    assert sigma2_green(g_ou, np.zeros(10), mu) == Estimate(0.0, 0.0)
    with pytest.raises(ValueError):
        sigma2_green(g_ou, np.zeros(9), mu)


def test_estimators_match_closed_form(ou, g_ou):
    chi = AffineCorrector.for_model(ou)
    mu = sample_mu_star(ou, 2000, 20.0, 2.0, RngStream(5))
    mart = sigma2_martingale(ou, g_ou, chi, mu, RngStream(6))
    green = sigma2_green(g_ou, chi(mu.ys, mu.regimes), mu)
    # the supplied mean is exact here, so only sampling noise remains
    assert abs(mart.value - OU_SIGMA2) <= 4 * mart.stderr
    assert abs(green.value - OU_SIGMA2) <= 4 * green.stderr
    assert green.value >= -3 * green.stderr


def test_qv_slope(ou, g_ou):
    zero = MartingaleDecomposition(np.arange(6.0), np.zeros((3, 6)), np.zeros((3, 5)), np.zeros(3), np.zeros(3), 5.0)
    assert qv_slope(zero, 5).value == 0.0
    with pytest.raises(ValueError):
        qv_slope(zero, 6)
    chi = AffineCorrector.for_model(ou)
    mu = sample_mu_star(ou, 200, 20.0, 5.0, RngStream(8))
    ens = simulate_ensemble(ou, (mu.ys, mu.regimes), 64.0, RngStream(9).spawn_keys(200))
    s = qv_slope(decompose(ens, ou, g_ou, chi), 64)
    assert abs(s.value - OU_SIGMA2) <= 4 * s.stderr


def test_report_combination_and_json():
    rep = Sigma2Report(Estimate(1.0, 0.1), Estimate(1.2, 0.1), Estimate(1.1, 0.2))
    assert rep.agreement_z == pytest.approx(0.2 / np.hypot(0.1, 0.1))
    assert rep.reference.value == pytest.approx(1.1)
    assert rep.reference.stderr == pytest.approx(0.1 / np.sqrt(2))
    d = json.loads(rep.to_json())
    assert d["stderrs"]["qv_slope"] == 0.2 and d["tail_bound"] is None
