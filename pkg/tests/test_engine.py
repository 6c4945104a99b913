import numpy as np
import pytest
from scipy import stats

from pdmpclt.engine import (
    Ensemble, RunawayError, Trajectory, eval_at, final_states, path_integral, path_integrals, simulate,
    simulate_ensemble, states_at, step_embedded,
)
from pdmpclt.model import HybridState, affine_model, builtin_model, clamp_linear, constant
from pdmpclt.rng import RngStream


def test_step_contract_deterministic_jump(contract):
    rng = RngStream(4)
    dt, nxt = step_embedded(contract, HybridState((1.0,), 0), rng)
    assert nxt.y[0] == pytest.approx(0.5 * np.exp(-dt), rel=1e-15)
    assert rng.position == 1


def test_holding_time_mean_rate_two():
    m = builtin_model("contract-multijump", {"lam": 2.0})
    keys = RngStream(2).spawn_keys(10**6)
    from pdmpclt.engine import _step
    from pdmpclt.rng import block_uniforms
    u = block_uniforms(keys, 0, m.n_uniforms)
    _, _, dt = _step(m, np.ones((len(keys), 1)), np.zeros(len(keys), int), u)
    assert abs(dt.mean() - 0.5) <= 4 * 0.5 / 1e3


def test_regime_switch_frequency(ou):
    rng = RngStream(5)
    x = HybridState((0.0,), 0)
    hits = 0
    for _ in range(2000):
        _, nxt = step_embedded(ou, x, rng)
        hits += nxt.i == 1
    # same draws, vectorized: 10^5 independent first steps from regime 0
    from pdmpclt.engine import _step
    from pdmpclt.rng import block_uniforms
    u = block_uniforms(RngStream(6).spawn_keys(10**5), 0, ou.n_uniforms)
    _, j, _ = _step(ou, np.zeros((10**5, 1)), np.zeros(10**5, int), u)
    assert abs(j.mean() - 0.5) <= 0.006
    assert abs(hits / 2000 - 0.5) <= 4 * 0.5 / np.sqrt(2000)


def test_tiny_horizon_has_no_jumps(ou):
    tr = simulate(ou, HybridState((0.3,), 1), 1e-9, RngStream(0))
    assert tr.n_jumps == 0
    assert tr.taus[0] == 0 and tr.x0 == HybridState((0.3,), 1)


def test_horizon_must_be_positive(ou):
    with pytest.raises(ValueError):
        simulate(ou, HybridState((0.0,), 0), 0.0, RngStream(0))


def test_poisson_jump_count(ou):
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 100.0, RngStream(8).spawn_keys(200))
    assert abs((ens.counts - 1).mean() - 100) <= 4


def test_same_seed_bit_identical(ou):
    a = simulate(ou, HybridState((0.0,), 0), 50.0, RngStream(3))
    b = simulate(ou, HybridState((0.0,), 0), 50.0, RngStream(3))
    assert np.array_equal(a.taus, b.taus) and np.array_equal(a.ys, b.ys)
    assert np.array_equal(a.regimes, b.regimes)


def test_single_run_equals_ensemble_row(ou):
    keys = RngStream(12).spawn_keys(5)
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 30.0, keys)
    one = simulate(ou, HybridState((0.0,), 0), 30.0, RngStream(key=keys[3]))
    row = ens.trajectory(3)
    assert np.array_equal(one.taus, row.taus) and np.array_equal(one.ys, row.ys)


def test_trajectory_invariants(ou):
    tr = simulate(ou, HybridState((2.0,), 0), 40.0, RngStream(9))
    assert np.all(np.diff(tr.taus) > 0) and tr.taus[-1] <= tr.horizon
    # regime is constant between jumps
    for n in range(min(tr.n_jumps, 10)):
        mid = 0.5 * (tr.taus[n] + tr.taus[n + 1])
        assert eval_at(tr, ou, mid).i == tr.regimes[n]


def test_runaway_cap(ou):
    with pytest.raises(RunawayError):
        simulate(ou, HybridState((0.0,), 0), 1000.0, RngStream(0), max_jumps=10)


def test_initial_arrays_not_mutated(ou):
    ys = np.array([[0.1], [0.2]])
    regs = np.array([0, 1])
    simulate_ensemble(ou, (ys, regs), 5.0, RngStream(0).spawn_keys(2))
    assert np.array_equal(ys, [[0.1], [0.2]]) and np.array_equal(regs, [0, 1])


# eval_at


def test_eval_at_jump_time_and_horizon(ou):
    tr = simulate(ou, HybridState((1.0,), 0), 10.0, RngStream(2))
    n = 2
    x = eval_at(tr, ou, tr.taus[n])
    assert x.y[0] == tr.ys[n, 0] and x.i == tr.regimes[n]
    end = eval_at(tr, ou, 10.0)
    last = tr.n_jumps
    c = ou.semiflows[tr.regimes[last]]
    expect = c(np.array([10.0 - tr.taus[last]]), tr.ys[last][None, :])[0, 0]
    assert end.y[0] == pytest.approx(expect, rel=1e-14)
    with pytest.raises(ValueError):
        eval_at(tr, ou, 10.5)


def test_eval_at_contract_closed_form(contract):
    tr = simulate(contract, HybridState((3.0,), 0), 50.0, RngStream(7))
    t = 0.5 * (tr.taus[1] + tr.taus[2])
    assert eval_at(tr, contract, t).y[0] == pytest.approx(3.0 * np.exp(-t) * 0.5, rel=1e-13)
    for t in np.linspace(0, 50, 37):
        k = np.searchsorted(tr.taus, t, side="right") - 1
        assert eval_at(tr, contract, t).y[0] == pytest.approx(3.0 * np.exp(-t) * 0.5**k, rel=1e-12)


def test_states_at_matches_eval_at(ou):
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 20.0, RngStream(3).spawn_keys(4))
    times = np.array([0.0, 3.3, 20.0])
    ys, regs = states_at(ens, ou, times)
    for r in range(4):
        for k, t in enumerate(times):
            x = eval_at(ens.trajectory(r), ou, t)
            assert ys[r, k, 0] == x.y[0] and regs[r, k] == x.i
    yf, rf = final_states(ens, ou)
    assert np.array_equal(yf, ys[:, -1]) and np.array_equal(rf, regs[:, -1])


# path integrals


def test_integral_of_one_is_length(ou):
    tr = simulate(ou, HybridState((0.0,), 0), 37.3, RngStream(1))
    v, _ = path_integral(tr, ou, constant(1.0), 0.0, 37.3)
    assert abs(v - 37.3) <= 1e-12


def test_segment_integral_without_jumps():
    m = builtin_model("contract-multijump", {"lam": 1e-9})
    tr = simulate(m, HybridState((0.8,), 0), 3.0, RngStream(0))
    assert tr.n_jumps == 0
    v, err = path_integral(tr, m, clamp_linear(1.0), 0.0, 3.0)
    exact = 0.8 * (1 - np.exp(-3.0))
    assert abs(v - exact) <= 1e-10 and err <= 1e-10


def test_richardson_halving(ou):
    tr = simulate(ou, HybridState((1.0,), 0), 50.0, RngStream(11))
    g = clamp_linear(2.0)
    v1, _ = path_integral(tr, ou, g, 0.0, 50.0, h_max=0.01)
    v2, _ = path_integral(tr, ou, g, 0.0, 50.0, h_max=0.005)
    assert abs(v1 - v2) <= 1e-8 * abs(v2)


def test_path_integrals_additive(ou):
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 10.0, RngStream(5).spawn_keys(6))
    g = clamp_linear(2.0)
    pieces, _ = path_integrals(ens, ou, g, [0.0, 2.5, 7.0, 10.0])
    whole, _ = path_integrals(ens, ou, g, [0.0, 10.0])
    # extra breakpoints only move the Simpson panels
    assert np.allclose(pieces.sum(axis=1), whole[:, 0], rtol=1e-8, atol=0)


def test_path_integral_range_checks(ou):
    tr = simulate(ou, HybridState((0.0,), 0), 5.0, RngStream(1))
    with pytest.raises(ValueError):
        path_integral(tr, ou, constant(1.0), 2.0, 1.0)
    with pytest.raises(ValueError):
        path_integral(tr, ou, constant(1.0), 0.0, 6.0)


# distributional properties


def test_markov_restart(ou):
    g = clamp_linear(3.0)
    x0 = HybridState((2.0,), 1)
    n, s, T = 10**4, 1.5, 3.0
    direct = simulate_ensemble(ou, x0, T, RngStream(21).spawn_keys(n))
    yd, rd = final_states(direct, ou)
    first = simulate_ensemble(ou, x0, s, RngStream(22).spawn_keys(n))
    ym, rm = final_states(first, ou)
    second = simulate_ensemble(ou, (ym, rm), T - s, RngStream(23).spawn_keys(n))
    yr, rr = final_states(second, ou)
    a, b = g(yd, rd), g(yr, rr)
    se = np.hypot(a.std(), b.std()) / np.sqrt(n)
    assert abs(a.mean() - b.mean()) <= 4 * se


def test_holding_times_exponential(ou):
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 500.0, RngStream(30).spawn_keys(220))
    h = ens.holding_times()[:10**5]
    assert len(h) == 10**5
    assert stats.kstest(h, "expon", args=(0, 1 / ou.lam)).pvalue > 0.01


def test_duality_consistency_across_seed_ranges(ou):
    g = clamp_linear(3.0)
    x = HybridState((1.0,), 0)
    root = RngStream(40)
    vals = []
    for offset in (0, 5000):
        ens = simulate_ensemble(ou, x, 2.0, root.spawn_keys(5000, offset=offset))
        y, r = final_states(ens, ou)
        vals.append(g(y, r))
    a, b = vals
    assert abs(a.mean() - b.mean()) <= 4 * np.hypot(a.std(), b.std()) / np.sqrt(5000)


# export


def test_trajectory_csv_roundtrip(ou, tmp_path):
    tr = simulate(ou, HybridState((0.0,), 0), 5.0, RngStream(1))
    p = tmp_path / "t.csv"
    tr.to_csv(p)
    back = Trajectory.from_csv(p, 5.0)
    assert np.array_equal(back.taus, tr.taus) and np.array_equal(back.ys, tr.ys)
    assert p.read_text().splitlines()[0] == "n,tau_n,y0,regime"


def test_long_csv(ou, tmp_path):
    ens = simulate_ensemble(ou, HybridState((0.0,), 0), 3.0, RngStream(1).spawn_keys(3))
    p = tmp_path / "e.csv"
    ens.to_long_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "replica,n,tau_n,y0,regime"
    assert len(lines) == 1 + ens.counts.sum()
