import math

import numpy as np
import pytest
from scipy import stats

from pdmpclt.analysis import Estimate, MartingaleDecomposition, decompose, sample_mu_star
from pdmpclt.clt import (
    MIN_ACCEPTANCE_REPLICAS, clt_report, clt_samples, cdf_plot_data, default_workers, ks_test, lindeberg_profile,
    normal_cdf, variance_plateau,
)
from pdmpclt.engine import simulate_ensemble
from pdmpclt.exact import AffineCorrector
from pdmpclt.model import HybridState, clamp_linear, constant
from pdmpclt.rng import RngStream

OU_MEAN = 8 / 19
OU_SIGMA2 = 0.48403557


def test_normal_cdf_values():
    assert normal_cdf(0.0, 2.0) == 0.5
    assert abs(normal_cdf(1.96, 1.0) - 0.9750021048517795) <= 1e-7
    u = np.linspace(-5, 5, 41)
    assert np.allclose(normal_cdf(u, 1.7), stats.norm.cdf(u, scale=1.7), atol=1e-12)


def test_normal_cdf_dirac():
    assert normal_cdf(-1.0, 0.0) == 0.0
    assert normal_cdf(0.0, 0.0) == 1.0
    with pytest.raises(ValueError):
        normal_cdf(0.0, -1.0)


def test_ks_null_distribution():
    passes = 0
    for seed in range(100):
        x = stats.norm.ppf(np.random.default_rng(seed).uniform(size=2000), scale=0.7)
        passes += ks_test(x, 0.49, alpha=0.05).passed
    assert passes >= 94


def test_ks_statistic_matches_scipy():
    x = np.random.default_rng(1).normal(0.1, 1.0, 500)
    res = ks_test(x, 1.0, alpha=0.05)
    assert res.stat == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-12)
    assert res.threshold == pytest.approx(1.358 / math.sqrt(500))


def test_ks_degenerate_cases():
    assert ks_test(np.zeros(100), 0.0).passed
    far = ks_test(np.full(100, 5.0), 1.0)
    assert not far.passed and far.stat > 0.99
    spread = ks_test(np.linspace(-1, 1, 100), 0.0, eps_dirac=0.1)
    assert not spread.passed and spread.concentration > 0.9
    with pytest.raises(ValueError):
        ks_test([], 1.0)


def test_ks_other_alpha_uses_asymptotic_formula():
    assert ks_test(np.zeros(4), 1.0, alpha=0.1).threshold == pytest.approx(math.sqrt(-0.5 * math.log(0.05)) / 2)


def test_constant_observable_gives_zeros(ou):
    s = clt_samples(ou, constant(1.0).with_mean(1.0), HybridState((0.0,), 0), 10.0, 5, RngStream(0))
    assert np.array_equal(s, np.zeros(5))


def test_samples_reproducible_and_worker_independent(ou):
    g = clamp_linear(10.0).with_mean(OU_MEAN)
    a = clt_samples(ou, g, HybridState((0.0,), 0), 5.0, 600, RngStream(3))
    b = clt_samples(ou, g, HybridState((0.0,), 0), 5.0, 600, RngStream(3), workers=2)
    assert np.array_equal(a, b)


def test_sample_argument_checks(ou):
    g = clamp_linear(10.0).with_mean(OU_MEAN)
    with pytest.raises(ValueError):
        clt_samples(ou, g, HybridState((0.0,), 0), 0.0, 10, RngStream(0))
    with pytest.raises(ValueError):
        clt_samples(ou, g, HybridState((0.0,), 0), 1.0, 1, RngStream(0))
    with pytest.raises(TypeError):
        clt_samples(ou, g, (0.0, 0), 1.0, 10, RngStream(0))


def test_contract_variance_shrinks(contract):
    g = clamp_linear(5.0).with_mean(0.0)
    v50 = clt_samples(contract, g, HybridState((1.0,), 0), 50.0, 300, RngStream(1)).var()
    v200 = clt_samples(contract, g, HybridState((1.0,), 0), 200.0, 300, RngStream(2)).var()
    assert v200 < v50 and v200 <= 10 * v50


def test_ou_statistic_is_centred(ou):
    g = clamp_linear(10.0).with_mean(OU_MEAN)
    mu = sample_mu_star(ou, 500, 20.0, 2.0, RngStream(4))
    s = clt_samples(ou, g, mu, 50.0, 500, RngStream(5))
    rep = clt_report(s, 50.0, Estimate(OU_SIGMA2, 0.0), alpha=0.01)
    assert rep.mean_ok
    assert 0.0 <= rep.ks_stat <= 1.0


def test_report_pass_rule():
    x = stats.norm.ppf((np.arange(1000) + 0.5) / 1000)
    good = clt_report(x, 1.0, Estimate(1.0, 0.01))
    assert good.passed and good.ks_stat <= good.ks_threshold and good.mean_ok
    shifted = clt_report(x + 0.5, 1.0, Estimate(1.0, 0.01))
    assert not shifted.passed
    assert good.to_dict()["pass"] is True
    assert MIN_ACCEPTANCE_REPLICAS == 500


def test_cdf_plot_data():
    rows = cdf_plot_data([0.5, -0.5], 1.0)
    assert rows[0][0] == -0.5 and rows[1][1] == 1.0
    assert rows[0][2] == pytest.approx(stats.norm.cdf(-0.5))


def _zero_decomp(N, n):
    return MartingaleDecomposition(np.arange(n + 1.0), np.zeros((N, n + 1)), np.zeros((N, n)), np.zeros(N),
                                   np.zeros(N), float(n))


def test_lindeberg_bounded_increments():
    Z = np.full((4, 32), 0.5)
    dec = MartingaleDecomposition(np.arange(33.0), np.zeros((4, 33)), Z, np.zeros(4), np.zeros(4), 32.0)
    rows = lindeberg_profile(dec, [0.25], [32])
    assert rows[0]["value"] == 0.0  # 0.25 * sqrt(32) > 0.5
    with pytest.raises(ValueError):
        lindeberg_profile(dec, [0.25], [64])


@pytest.fixture(scope="module")
def ou_decomps():
    from pdmpclt.model import builtin_model
    ou = builtin_model("two-regime-ou")
    g = clamp_linear(10.0).with_mean(OU_MEAN)
    mu = sample_mu_star(ou, 150, 20.0, 5.0, RngStream(6))
    ens = simulate_ensemble(ou, (mu.ys, mu.regimes), 512.0, RngStream(7).spawn_keys(150))
    return decompose(ens, ou, g, AffineCorrector.for_model(ou))


def test_lindeberg_profile_ou(ou_decomps):
    rows = lindeberg_profile(ou_decomps, [0.25, 0.5, 1.0], [32, 128, 512])
    at = {(r["n"], r["eps"]): r for r in rows}
    for n in (32, 128, 512):
        vals = [at[(n, e)]["value"] for e in (0.25, 0.5, 1.0)]
        assert vals[0] >= vals[1] >= vals[2]
    for lo, hi in ((32, 128), (128, 512)):
        a, b = at[(lo, 0.5)], at[(hi, 0.5)]
        assert b["value"] <= a["value"] + 4 * math.hypot(a["stderr"], b["stderr"])


def test_variance_plateau(ou_decomps):
    zero = variance_plateau(_zero_decomp(3, 10), 10)
    assert np.all(zero.means == 0) and zero.trend_free
    vp = variance_plateau(ou_decomps, 512)
    assert vp.trend_free and np.isfinite(vp.max_value)
    assert abs(vp.means.mean() - OU_SIGMA2) <= 0.1 * OU_SIGMA2


def test_default_workers(monkeypatch):
    monkeypatch.setenv("PDMPCLT_WORKERS", "3")
    assert default_workers() == 3
    monkeypatch.delenv("PDMPCLT_WORKERS")
    assert default_workers() >= 1
