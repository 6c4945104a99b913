"""Numerical checks of the drift, contraction and ergodicity hypotheses.

Deterministic conditions on the flows are evaluated exactly on grids; the
kernel and drift conditions are Monte-Carlo estimates compared with a
4-standard-error allowance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import simulate_ensemble, states_at
from .fm import EmpiricalMeasure, fm_distance, subsample
from .model import HybridState, ModelError, PdmpModel
from .rng import RngStream, block_uniforms

__all__ = [
    "HypothesisConstants",
    "BalanceError",
    "CheckResult",
    "DriftFit",
    "ErgodicityEstimate",
    "check_s1",
    "check_s2",
    "check_j1",
    "check_balance",
    "fit_drift",
    "check_genlap",
    "probe_ergodicity",
    "sup_poly_exp",
]


class BalanceError(ModelError):
    """2aL^2 >= 1: the drift-series constants are undefined."""


def sup_poly_exp(m: int, lam: float) -> float:
    """sup over t >= 0 of (t^m + 1) e^{-lam t}.

    Critical points are the positive roots of lam t^m - m t^(m-1) + lam;
    the value at t = 0 is 1 (2 when m = 0).
    """
    if m == 0:
        return 2.0
    coeffs = np.zeros(m + 1)
    coeffs[0] = lam
    coeffs[1] = -m
    coeffs[-1] += lam
    cands = [0.0]
    for r in np.roots(coeffs):
        if abs(r.imag) < 1e-9 * max(1.0, abs(r)) and r.real > 0:
            cands.append(float(r.real))
    return max((t**m + 1.0) * math.exp(-lam * t) for t in cands)


@dataclass(frozen=True)
class HypothesisConstants:
    """Primary constants (M, zeta, L, a, b) with the derived drift constants.

    Construction fails with :class:`BalanceError` when eta = 2aL^2 >= 1
    unless ``strict=False`` (used to report a failing balance check).
    """

    M: float
    zeta: float
    L: float
    a: float
    b: float
    lam: float
    strict: bool = field(default=True, compare=False)

    def __post_init__(self):
        if self.M < 0 or self.zeta < 0 or self.b < 0:
            raise ModelError("M, zeta and b must be nonnegative")
        if not (self.L > 0 and self.a > 0 and self.lam > 0):
            raise ModelError("L, a and lam must be positive")
        if self.strict and not self.eta < 1:
            raise BalanceError(f"2aL^2 = {self.eta} >= 1")

    @classmethod
    def from_model(cls, model: PdmpModel, strict: bool = True) -> HypothesisConstants:
        claimed = model.claimed_constants()
        if claimed is None:
            raise ModelError(f"model {model.name!r} has no claimed constants")
        return cls(claimed["M"], claimed["zeta"], claimed["L"], claimed["a"], claimed["b"],
                   model.lam, strict)

    @property
    def m(self) -> int:
        return math.ceil(2 * self.zeta)

    @property
    def eta(self) -> float:
        return 2 * self.a * self.L**2

    @property
    def D(self) -> float:
        return 2 * self.a * self.M**2 * math.factorial(self.m) + self.b

    @property
    def Gamma_lemma(self) -> float:
        return (1 - self.eta) * self.lam

    @property
    def C_lemma(self) -> float:
        if self.eta >= 1:
            return math.inf
        return self.D / (1 - self.eta) * (1 + self.lam ** (-self.m))

    @property
    def A_prop(self) -> float:
        return 2 * self.L**2

    @property
    def B_prop(self) -> float:
        m, lam, M2 = self.m, self.lam, self.M**2
        return 2 * (self.L**2 * self.C_lemma
                    + M2 * (math.factorial(m) * lam ** (-m) + 1)
                    + M2 * sup_poly_exp(m, lam))

    def to_dict(self) -> dict:
        return {
            "M": self.M, "zeta": self.zeta, "L": self.L, "a": self.a, "b": self.b, "lam": self.lam,
            "m": self.m, "eta": self.eta, "D": self.D, "Gamma_lemma": self.Gamma_lemma,
            "C_lemma": self.C_lemma, "A_prop": self.A_prop, "B_prop": self.B_prop,
        }


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst_margin: float
    constants: dict = field(default_factory=dict)
    grid: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def __bool__(self) -> bool:
        return self.passed

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "pass": self.passed,
            "constants": self.constants,
            "worst_margin": self.worst_margin,
            "grid": self.grid,
            **self.info,
        }


def _positive_grid(t_grid) -> np.ndarray:
    t = np.asarray(t_grid, float).reshape(-1)
    if t.size == 0:
        raise ValueError("t_grid is empty")
    return t


def check_s1(model: PdmpModel, t_grid, claimed: tuple[float, float]) -> CheckResult:
    """max_i rho_Y(S_i(t, y*), y*) <= M t^zeta on the grid (zeta = 0: bound M)."""
    M, zeta = claimed
    t = _positive_grid(t_grid)
    if np.any(t <= 0):
        raise ValueError("t_grid entries must be positive")
    star = np.tile(model.anchor, (len(t), 1))
    disp = np.zeros(len(t))
    for i in range(model.n_regimes):
        moved = model.flow(t, star, np.full(len(t), i))
        disp = np.maximum(disp, model.metric.rho_y(moved, star))
    bound = M * t**zeta if zeta > 0 else np.full(len(t), float(M))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(disp == 0, 0.0, disp / bound)
    worst = float(np.max(ratio))
    rows = [{"t": float(a), "displacement": float(d), "ratio": float(r)} for a, d, r in zip(t, disp, ratio)]
    return CheckResult("S1", worst <= 1 + 1e-9, worst, {"M": M, "zeta": zeta}, rows,
                       {"worst_ratio": worst})


def check_s2(model: PdmpModel, t_grid, pair_samples: int, rng: RngStream, claimed_L: float,
             scale: float = 5.0) -> CheckResult:
    """Largest flow Lipschitz ratio over random pairs, regimes and grid times."""
    if pair_samples < 1:
        raise ValueError("pair_samples must be >= 1")
    t = _positive_grid(t_grid)
    gen = rng.generator()
    y1 = model.anchor + scale * gen.standard_normal((pair_samples, model.dim))
    y2 = model.anchor + scale * gen.standard_normal((pair_samples, model.dim))
    base = model.metric.rho_y(y1, y2)
    ok = base > 0
    y1, y2, base = y1[ok], y2[ok], base[ok]
    L_hat = 0.0
    rows = []
    for tk in t:
        worst_t = 0.0
        tt = np.full(len(base), tk)
        for i in range(model.n_regimes):
            reg = np.full(len(base), i)
            d = model.metric.rho_y(model.flow(tt, y1, reg), model.flow(tt, y2, reg))
            worst_t = max(worst_t, float(np.max(d / base)) if len(base) else 0.0)
        rows.append({"t": float(tk), "ratio": worst_t})
        L_hat = max(L_hat, worst_t)
    return CheckResult("S2", L_hat <= claimed_L * (1 + 1e-9), claimed_L * (1 + 1e-9) - L_hat,
                       {"L": claimed_L}, rows, {"L_hat": L_hat})


def check_j1(model: PdmpModel, y_grid, n_mc: int, rng: RngStream,
             claimed: tuple[float, float]) -> CheckResult:
    """E rho_Y(Y', y*)^2 under J(y, .) against a rho_Y(y, y*)^2 + b."""
    if n_mc < 1000:
        raise ValueError("n_mc must be >= 1000")
    a, b = claimed
    ys = np.asarray(y_grid, float).reshape(-1, model.dim)
    nu = int(getattr(model.jump_kernel, "n_uniforms", 0))
    rows, v2s, means = [], [], []
    worst = np.inf
    for k, y in enumerate(ys):
        u = block_uniforms(rng.split(k).spawn_keys(n_mc), 0, nu) if nu else np.zeros((n_mc, 0))
        landed = model.jump(np.tile(y, (n_mc, 1)), u)
        sq = model.metric.rho_y(landed, model.anchor) ** 2
        mean = float(np.mean(sq))
        se = float(np.std(sq, ddof=1) / np.sqrt(n_mc))
        v2 = float(model.lyapunov(y)) ** 2
        margin = a * v2 + b + 4 * se - mean
        worst = min(worst, margin)
        rows.append({"y": y.tolist(), "second_moment": mean, "stderr": se, "bound": a * v2 + b,
                     "margin": margin})
        v2s.append(v2)
        means.append(mean)
    if len(set(v2s)) >= 2:
        a_hat, b_hat = np.polyfit(v2s, means, 1)
    else:
        a_hat, b_hat = np.nan, float(np.mean(means))
    return CheckResult("J1", worst >= 0, float(worst), {"a": a, "b": b}, rows,
                       {"a_hat": float(a_hat), "b_hat": float(b_hat)})


def check_balance(constants: HypothesisConstants) -> CheckResult:
    eta = constants.eta
    return CheckResult("balance", eta < 1, 1 - eta, {"a": constants.a, "L": constants.L}, [],
                       {"eta": eta})


# ---------------------------------------------------------------------------
# drift condition


@dataclass(frozen=True)
class DriftFit:
    A_hat: float
    Gamma_hat: float
    B_hat: float
    residual_max: float
    noise: float
    degenerate: bool
    surface: np.ndarray  # (n_x, n_t) Monte-Carlo P(t)V^2(x)
    stderr: np.ndarray
    t_grid: np.ndarray
    v2: np.ndarray  # V^2 at each x

    @property
    def passed(self) -> bool:
        return (not self.degenerate) and self.residual_max <= 0.05

    def bound(self) -> np.ndarray:
        return self.A_hat * np.exp(-self.Gamma_hat * self.t_grid)[None, :] * self.v2[:, None] + self.B_hat

    def to_dict(self) -> dict:
        return {
            "name": "H2",
            "pass": self.passed,
            "constants": {"A_hat": self.A_hat, "Gamma_hat": self.Gamma_hat, "B_hat": self.B_hat},
            "worst_margin": -self.residual_max,
            "residual_max": self.residual_max,
            "mc_noise": self.noise,
            "degenerate": self.degenerate,
            "grid": {"t": self.t_grid.tolist(), "V2": self.v2.tolist(),
                     "surface": self.surface.tolist(), "stderr": self.stderr.tolist()},
        }


def _v2_surface(model, x_grid, t_grid, n_rep, rng):
    t_max = max(float(t_grid[-1]), 1e-12)
    surf = np.empty((len(x_grid), len(t_grid)))
    se = np.empty_like(surf)
    for k, x in enumerate(x_grid):
        ens = simulate_ensemble(model, x, t_max, rng.split(k).spawn_keys(n_rep))
        ys, _ = states_at(ens, model, t_grid)
        v2 = model.lyapunov(ys) ** 2
        surf[k] = v2.mean(axis=0)
        se[k] = v2.std(axis=0, ddof=1) / np.sqrt(n_rep)
    return surf, se


def fit_drift(model: PdmpModel, x_grid, t_grid, n_rep: int, rng: RngStream) -> DriftFit:
    """Fit P(t)V^2(x) <= A e^{-Gamma t} V^2(x) + B to a Monte-Carlo surface.

    B_hat is the largest top-quartile plateau over x. Gamma_hat is the
    common slope of log((P - B_hat)/V^2) with one intercept per x, fitted
    where P - B_hat exceeds both 4 standard errors and 9 B_hat (so the
    plateau subtraction does not bend the curve). A_hat is the smallest
    prefactor that covers the fitted points.
    """
    t = np.asarray(t_grid, float)
    if np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be increasing")
    if n_rep < 100:
        raise ValueError("n_rep must be >= 100")
    x_grid = list(x_grid)
    surf, se = _v2_surface(model, x_grid, t, n_rep, rng)
    v2 = np.array([float(model.lyapunov(x.array())) ** 2 for x in x_grid])
    top = max(1, math.ceil(len(t) / 4))
    B_hat = float(np.max(surf[:, -top:].mean(axis=1)))
    noise = float(np.sqrt(np.mean(se**2)))

    excess = surf - B_hat
    use = (v2[:, None] > 0) & (excess > 4 * se) & (excess > 9 * B_hat)
    rows = [k for k in range(len(x_grid)) if use[k].sum() >= 2]
    degenerate = not rows
    if degenerate:
        return DriftFit(np.nan, np.nan, B_hat, np.inf, noise, True, surf, se, t, v2)
    # common slope, per-row intercepts: centre within rows then pool
    num = den = 0.0
    for k in rows:
        tk = t[use[k]]
        lk = np.log(excess[k, use[k]] / v2[k])
        num += np.dot(tk - tk.mean(), lk - lk.mean())
        den += np.dot(tk - tk.mean(), tk - tk.mean())
    gamma = -num / den if den > 0 else np.nan
    if not gamma > 0:
        return DriftFit(np.nan, np.nan, B_hat, np.inf, noise, True, surf, se, t, v2)
    A_hat = 0.0
    for k in rows:
        A_hat = max(A_hat, float(np.max(excess[k, use[k]] / (v2[k] * np.exp(-gamma * t[use[k]])))))
    bound = A_hat * np.exp(-gamma * t)[None, :] * v2[:, None] + B_hat
    viol = (surf - 4 * se - bound) / np.maximum(bound, 1e-300)
    residual = float(max(0.0, np.max(viol)))
    return DriftFit(A_hat, float(gamma), B_hat, residual, noise, False, surf, se, t, v2)


def check_genlap(model: PdmpModel, constants: HypothesisConstants, x_grid, t0_grid, n_rep: int,
                 rng: RngStream) -> CheckResult:
    """Embedded-chain series sum_n e^{-lam (t0 - tau_n)} V^2(Phi_n) 1[tau_n <= t0].

    Compared with e^{-Gamma t0} V^2(x) + C plus 4 standard errors.
    """
    if not constants.eta < 1:
        raise BalanceError("drift-series constants need 2aL^2 < 1")
    t0s = np.asarray(t0_grid, float)
    t_max = max(float(t0s.max()), 1e-12)
    rows = []
    worst = np.inf
    for k, x in enumerate(x_grid):
        ens = simulate_ensemble(model, x, t_max, rng.split(k).spawn_keys(n_rep))
        v2 = model.lyapunov(np.nan_to_num(ens.ys)) ** 2
        v0 = float(model.lyapunov(x.array())) ** 2
        for t0 in t0s:
            live = ens.taus <= t0
            w = np.where(live, np.exp(-model.lam * (t0 - np.where(live, ens.taus, 0.0))), 0.0)
            series = np.sum(w * v2, axis=1)
            est = float(series.mean())
            se = float(series.std(ddof=1) / np.sqrt(n_rep))
            bound = math.exp(-constants.Gamma_lemma * t0) * v0 + constants.C_lemma
            margin = bound + 4 * se - est
            worst = min(worst, margin)
            rows.append({"y": x.array().tolist(), "i": x.i, "t0": float(t0), "series": est,
                         "stderr": se, "bound": bound, "margin": margin})
    return CheckResult("gen-lap", worst >= 0, float(worst), constants.to_dict(), rows)


# ---------------------------------------------------------------------------
# ergodicity


@dataclass(frozen=True)
class ErgodicityEstimate:
    gamma_hat: float
    kappa_hat: float
    fit_r2: float
    no_signal: bool
    t_grid: np.ndarray
    distances: np.ndarray
    floor: np.ndarray  # per-time same-law distance
    window: np.ndarray  # boolean mask of fitted times

    @property
    def noise_floor(self) -> float:
        return float(np.mean(self.floor))

    def to_dict(self) -> dict:
        return {
            "name": "H1",
            "gamma_hat": self.gamma_hat,
            "kappa_hat": self.kappa_hat,
            "fit_r2": self.fit_r2,
            "no_signal": self.no_signal,
            "noise_floor": self.noise_floor,
            "fitted": True,
            "grid": {"t": self.t_grid.tolist(), "distance": self.distances.tolist(),
                     "floor": self.floor.tolist(), "window": self.window.tolist()},
        }


def _law(ys, regs, m, rng):
    mu = EmpiricalMeasure.uniform(ys, regs)
    return subsample(mu, m, rng) if len(mu) > m else mu


def probe_ergodicity(
    model: PdmpModel,
    init_a: HybridState,
    init_b: HybridState,
    t_grid,
    ensemble: int,
    fm_subsample: int,
    rng: RngStream,
) -> ErgodicityEstimate:
    """Decay of d_FM between the laws of Psi(t) from two starts.

    The noise floor at each t is the mean distance between the two halves
    of the same ensemble. The fit window is the leading run of times with
    d(t) > 2 * floor, skipping times where d(t) >= 1 (there the sup-norm
    cap of d_FM flattens the curve).
    """
    if ensemble < 100:
        raise ValueError("ensemble must be >= 100")
    t = np.asarray(t_grid, float)
    t_max = max(float(t.max()), 1e-12)
    ea = simulate_ensemble(model, init_a, t_max, rng.split(0).spawn_keys(ensemble))
    eb = simulate_ensemble(model, init_b, t_max, rng.split(1).spawn_keys(ensemble))
    ya, ia = states_at(ea, model, t)
    yb, ib = states_at(eb, model, t)
    half = ensemble // 2
    dist = np.empty(len(t))
    floor = np.empty(len(t))
    for k in range(len(t)):
        sub = rng.split(100 + k)
        la = _law(ya[:, k], ia[:, k], fm_subsample, sub.split(0))
        lb = _law(yb[:, k], ib[:, k], fm_subsample, sub.split(1))
        dist[k] = fm_distance(la, lb, model.metric)
        pairs = []
        for side, (yy, ii) in enumerate(((ya, ia), (yb, ib))):
            h1 = _law(yy[:half, k], ii[:half, k], fm_subsample, sub.split(2 + 2 * side))
            h2 = _law(yy[half:, k], ii[half:, k], fm_subsample, sub.split(3 + 2 * side))
            pairs.append(fm_distance(h1, h2, model.metric))
        floor[k] = np.mean(pairs)
    signal = dist > 2 * floor
    window = np.zeros(len(t), bool)
    started = False
    for k in range(len(t)):
        if not signal[k]:
            if started:
                break
            continue
        if dist[k] < 1.0:
            window[k] = started = True
    if window.sum() < 2:
        return ErgodicityEstimate(np.nan, np.nan, np.nan, True, t, dist, floor, window)
    tw, lw = t[window], np.log(dist[window])
    slope, icpt = np.polyfit(tw, lw, 1)
    resid = lw - (slope * tw + icpt)
    ss = np.sum((lw - lw.mean()) ** 2)
    r2 = float(1 - np.sum(resid**2) / ss) if ss > 0 else 1.0
    scale = max(np.sqrt(model.lyapunov(init_a.array()) + 1), np.sqrt(model.lyapunov(init_b.array()) + 1))
    return ErgodicityEstimate(float(-slope), float(np.exp(icpt) / scale), r2, False, t, dist, floor, window)
