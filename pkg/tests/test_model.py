import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pdmpclt.model import (
    HybridMetric, HybridState, HypothesisWarning, ModelError, PdmpModel, affine_model, builtin_model,
    clamp_linear, constant, cosine, tabulated,
)
from pdmpclt.rng import RngStream, block_uniforms

finite = st.floats(min_value=-50, max_value=50, allow_nan=False)


def test_builtin_defaults(ou, contract):
    assert contract.lam == 1 and contract.n_regimes == 1
    assert contract.jump_kernel.kappa == 0.5 and contract.semiflows[0].rate == 1
    k = ou.claimed_constants()
    assert k["a"] == 0.25 and k["b"] == pytest.approx(1 / 3) and k["L"] == 1
    assert 2 * k["a"] * k["L"] ** 2 == 0.5
    assert ou.flags == ()


def test_unknown_builtin():
    with pytest.raises(ModelError, match="unknown"):
        builtin_model("nope", {})


def test_bad_parameter_name():
    with pytest.raises(ModelError):
        builtin_model("two-regime-ou", {"gamma": 1})


def test_balance_violation_is_a_flag_not_an_error():
    m = builtin_model("two-regime-ou", {"kappa": 0.8})
    assert any("balance" in f for f in m.flags)
    with pytest.warns(HypothesisWarning):
        affine_model([1.0], [0.0], [[1.0]], {"type": "affine-uniform", "kappa": 0.9, "beta": 1})


def test_routing_validation():
    with pytest.raises(ModelError):
        affine_model([1, 1], [0, 0], [[0.5, 0.6], [0.5, 0.5]], {"type": "dirac-scale", "kappa": 0.5})
    with pytest.raises(ModelError):
        affine_model([1, 1], [0, 0], [[1.5, -0.5], [0.5, 0.5]], {"type": "dirac-scale", "kappa": 0.5})
    with pytest.raises(ModelError):
        affine_model([1.0], [0.0], [[1.0]], {"type": "dirac-scale", "kappa": 0.5}, lam=0.0)


def test_state_validation(ou):
    with pytest.raises(ModelError):
        ou.state((0.0,), 2)
    with pytest.raises(ModelError):
        ou.state((0.0, 1.0), 0)
    assert ou.state(1.5, 1) == HybridState((1.5,), 1)


@pytest.mark.parametrize("name", ["contract-multijump", "two-regime-ou"])
def test_semiflow_laws(name):
    ident, comp = builtin_model(name).semiflow_defect(n=1000, seed=3)
    assert ident <= 1e-12
    assert comp <= 1e-9


@settings(max_examples=100, deadline=None)
@given(y1=finite, y2=finite, y3=finite, i1=st.integers(0, 2), i2=st.integers(0, 2), i3=st.integers(0, 2),
       c=st.floats(min_value=0.1, max_value=10))
def test_hybrid_metric_axioms(y1, y2, y3, i1, i2, i3, c):
    rho = HybridMetric(c)
    d12 = rho([y1], i1, [y2], i2)
    assert d12 == rho([y2], i2, [y1], i1)
    assert rho([y1], i1, [y1], i1) == 0
    assert d12 <= rho([y1], i1, [y3], i3) + rho([y3], i3, [y2], i2) + 1e-9
    if (y1, i1) != (y2, i2):
        assert d12 > 0
    assert np.isclose(d12, abs(y1 - y2) + c * (i1 != i2))


def test_pairwise_matches_scalar_metric():
    rng = np.random.default_rng(0)
    ys, regs = rng.normal(size=(6, 2)), rng.integers(0, 2, 6)
    rho = HybridMetric(0.7)
    D = rho.pairwise(ys, regs)
    for a in range(6):
        for b in range(6):
            assert D[a, b] == pytest.approx(rho(ys[a], regs[a], ys[b], regs[b]))


@pytest.mark.parametrize("y", [0.0, 1.0, 5.0])
def test_uniform_jump_second_moment(ou, y):
    n = 10**6
    u = block_uniforms(RngStream(17).spawn_keys(n), 0, 1)
    landed = ou.jump(np.full((n, 1), y), u)[:, 0]
    sq = landed**2
    exact = 0.25 * y * y + 1 / 3
    assert abs(sq.mean() - exact) <= 4 * sq.std() / np.sqrt(n)


def test_lyapunov(ou):
    assert ou.lyapunov(np.array([[0.0]]))[0] == 0
    assert ou.lyapunov(np.array([[-3.0]]))[0] == 3
    with pytest.warns(HypothesisWarning):
        # the shifted anchor doubles the kernel constant a, so balance is lost
        shifted = affine_model([1.0], [0.0], [[1.0]], {"type": "dirac-scale", "kappa": 0.5}, anchor=2.0)
    assert shifted.lyapunov(np.array([[2.0]]))[0] == 0


def test_digest_depends_on_parameters(ou):
    assert ou.digest() == builtin_model("two-regime-ou").digest()
    assert ou.digest() != builtin_model("two-regime-ou", {"beta": 2.0}).digest()


# observables


@pytest.mark.parametrize("g", [clamp_linear(2.0), cosine(3.0), constant(-0.5),
                               tabulated([0, 1, 2], [[0, 1, 0], [1, 1, -1]])])
def test_observable_certified_bounds(g):
    rng = np.random.default_rng(5)
    rho = HybridMetric(1.0)
    y1, y2 = rng.normal(scale=4, size=(2, 5000, 1))
    i1, i2 = rng.integers(0, 2, (2, 5000))
    v1, v2 = g(y1, i1), g(y2, i2)
    assert np.all(np.abs(v1) <= g.sup_bound + 1e-12)
    assert np.all(np.abs(v1 - v2) <= g.lip_const * rho(y1, i1, y2, i2) + 1e-12)
    assert g.bl_norm == max(g.sup_bound, g.lip_const)


def test_centering_requires_mean():
    g = clamp_linear(1.0)
    with pytest.raises(ModelError):
        g.centered()
    gm = g.with_mean(0.25)
    assert gm.centered()(np.array([[0.5]]), np.array([0]))[0] == 0.25
    assert g.mean_under_mu_star is None


def test_clamp_radius_validation():
    with pytest.raises(ModelError):
        clamp_linear(0.0)
