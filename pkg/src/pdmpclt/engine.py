"""Exact simulation of the switched semiflow process.

Only the jump skeleton (jump times and post-jump states) is stored; the
state at any time is recovered by flowing from the last jump. Ensembles are
simulated in lockstep over replicas, each replica drawing from its own
counter-based stream, so replica ``r`` is identical whether simulated alone
or inside an ensemble of any size.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import HybridState, ModelError, PdmpModel
from .rng import RngStream, block_uniforms

__all__ = [
    "Trajectory",
    "Ensemble",
    "RunawayError",
    "step_embedded",
    "simulate",
    "simulate_ensemble",
    "eval_at",
    "states_at",
    "path_integral",
    "path_integrals",
    "DEFAULT_MAX_JUMPS",
    "QUAD_STEP",
]

DEFAULT_MAX_JUMPS = 10**7
QUAD_STEP = 0.01
QUAD_MIN_INTERVALS = 16
_POINTS_PER_CHUNK = 2_000_000


class RunawayError(RuntimeError):
    """The jump-count safety cap was exceeded."""


@dataclass(frozen=True)
class Trajectory:
    """Jump skeleton of one path on [0, horizon].

    ``taus[0] == 0`` and ``ys[0], regimes[0]`` is the initial state.
    """

    taus: np.ndarray
    ys: np.ndarray
    regimes: np.ndarray
    horizon: float
    seed: str = ""

    @property
    def x0(self) -> HybridState:
        return HybridState(self.ys[0], int(self.regimes[0]))

    @property
    def n_jumps(self) -> int:
        return len(self.taus) - 1

    @property
    def jumps(self) -> list[tuple[float, HybridState]]:
        return [(float(t), HybridState(y, int(i))) for t, y, i in zip(self.taus, self.ys, self.regimes)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["n", "tau_n"] + [f"y{k}" for k in range(self.ys.shape[1])] + ["regime"])
            for n, (t, y, i) in enumerate(zip(self.taus, self.ys, self.regimes)):
                w.writerow([n, repr(float(t))] + [repr(float(v)) for v in y] + [int(i)])

    @classmethod
    def from_csv(cls, path, horizon: float) -> Trajectory:
        rows = list(csv.reader(open(path)))[1:]
        taus = np.array([float(r[1]) for r in rows])
        ys = np.array([[float(v) for v in r[2:-1]] for r in rows])
        regimes = np.array([int(r[-1]) for r in rows])
        return cls(taus, ys, regimes, horizon)


@dataclass(frozen=True)
class Ensemble:
    """Padded jump skeletons of N replicas.

    Row ``r`` holds ``counts[r]`` valid entries; ``taus`` is padded with
    +inf, ``ys`` with nan and ``regimes`` with 0.
    """

    taus: np.ndarray  # (N, K)
    ys: np.ndarray  # (N, K, d)
    regimes: np.ndarray  # (N, K)
    counts: np.ndarray  # (N,)
    horizon: float
    keys: np.ndarray  # (N, 2)

    @property
    def n_rep(self) -> int:
        return self.taus.shape[0]

    def __len__(self) -> int:
        return self.n_rep

    def trajectory(self, r: int) -> Trajectory:
        k = self.counts[r]
        token = f"{int(self.keys[r, 0]):016x}{int(self.keys[r, 1]):016x}"
        return Trajectory(self.taus[r, :k].copy(), self.ys[r, :k].copy(),
                          self.regimes[r, :k].copy(), self.horizon, token)

    def holding_times(self) -> np.ndarray:
        """All complete inter-jump times, pooled over replicas."""
        t = self.taus
        ok = np.isfinite(t[:, 1:])
        return (t[:, 1:][ok] - t[:, :-1][ok])

    def to_long_csv(self, path) -> None:
        d = self.ys.shape[2]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replica", "n", "tau_n"] + [f"y{k}" for k in range(d)] + ["regime"])
            for r in range(self.n_rep):
                for n in range(self.counts[r]):
                    w.writerow([r, n, repr(float(self.taus[r, n]))]
                               + [repr(float(v)) for v in self.ys[r, n]] + [int(self.regimes[r, n])])


def _initial_arrays(model: PdmpModel, x0, n: int | None):
    if isinstance(x0, HybridState):
        model.check_state(x0)
        n = 1 if n is None else n
        y = np.tile(x0.array(), (n, 1))
        i = np.full(n, x0.i, dtype=np.int64)
        return y, i
    y, i = x0
    y = np.array(y, dtype=float).reshape(-1, model.dim)
    i = np.array(i, dtype=np.int64).reshape(-1)
    if len(y) != len(i):
        raise ModelError("initial points and regimes differ in length")
    if np.any((i < 0) | (i >= model.n_regimes)):
        raise ModelError("initial regime out of range")
    return y, i


def step_embedded(model: PdmpModel, state: HybridState, rng: RngStream):
    """One step of the embedded chain: (holding time, post-jump state)."""
    model.check_state(state)
    u = rng.next_block(model.n_uniforms)
    y, i, dt = _step(model, state.array()[None, :], np.array([state.i]), u[None, :])
    return float(dt[0]), HybridState(y[0], int(i[0]))


def _step(model, y, i, u):
    dt = -np.log(u[:, 0]) / model.lam
    y_flow = model.flow(dt, y, i)
    j = model.next_regime(i, u[:, 1])
    y_new = model.jump(y_flow, u[:, 2:])
    return y_new, j, dt


def simulate_ensemble(
    model: PdmpModel,
    x0,
    horizon: float,
    keys,
    *,
    start_position: int = 0,
    max_jumps: int = DEFAULT_MAX_JUMPS,
) -> Ensemble:
    """Simulate one replica per row of ``keys`` (shape (N, 2)) up to ``horizon``.

    ``x0`` is a HybridState (shared start) or a ``(ys, regimes)`` pair of
    per-replica starts.
    """
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    keys = np.asarray(keys, dtype=np.uint64).reshape(-1, 2)
    n = keys.shape[0]
    y, i = _initial_arrays(model, x0, n)
    if len(y) != n:
        raise ModelError("number of initial states does not match number of streams")
    t = np.zeros(n)
    col_t, col_y, col_i = [t.copy()], [y.copy()], [i.copy()]
    counts = np.ones(n, dtype=np.int64)
    active = np.arange(n)
    nu = model.n_uniforms
    step = 0
    while active.size:
        if step >= max_jumps:
            raise RunawayError(f"more than {max_jumps} jumps before horizon {horizon}")
        u = block_uniforms(keys[active], start_position + step, nu)
        y_new, j_new, dt = _step(model, y[active], i[active], u)
        t_new = t[active] + dt
        keep = t_new <= horizon
        active = active[keep]
        t[active] = t_new[keep]
        y[active] = y_new[keep]
        i[active] = j_new[keep]
        counts[active] += 1
        ct = np.full(n, np.inf)
        ct[active] = t[active]
        cy = np.full((n, model.dim), np.nan)
        cy[active] = y[active]
        ci = np.zeros(n, dtype=np.int64)
        ci[active] = i[active]
        col_t.append(ct)
        col_y.append(cy)
        col_i.append(ci)
        step += 1
    # the final column is all padding
    return Ensemble(
        np.stack(col_t[:-1], axis=1),
        np.stack(col_y[:-1], axis=1),
        np.stack(col_i[:-1], axis=1),
        counts,
        float(horizon),
        keys,
    )


def simulate(
    model: PdmpModel,
    x0: HybridState,
    horizon: float,
    rng: RngStream,
    *,
    max_jumps: int = DEFAULT_MAX_JUMPS,
) -> Trajectory:
    """Simulate one path on [0, horizon] from the stream's current position.

    The stream position advances by the number of steps drawn (jumps plus
    the one overshooting the horizon).
    """
    ens = simulate_ensemble(model, x0, horizon, rng.key[None, :],
                            start_position=rng.position, max_jumps=max_jumps)
    traj = ens.trajectory(0)
    rng.position += traj.n_jumps + 1
    return Trajectory(traj.taus, traj.ys, traj.regimes, traj.horizon, rng.token)


def eval_at(traj: Trajectory, model: PdmpModel, t: float) -> HybridState:
    """State at time t: flow from the last jump at or before t."""
    if not 0 <= t <= traj.horizon:
        raise ValueError(f"t={t} outside [0, {traj.horizon}]")
    n = int(np.searchsorted(traj.taus, t, side="right")) - 1
    dt = np.array([t - traj.taus[n]])
    y = model.flow(dt, traj.ys[n][None, :], np.array([traj.regimes[n]]))
    return HybridState(y[0], int(traj.regimes[n]))


def _last_jump_index(taus, times):
    out = np.empty((taus.shape[0], len(times)), dtype=np.int64)
    for r, row in enumerate(taus):
        out[r] = np.searchsorted(row, times, side="right") - 1
    return out


def states_at(ens: Ensemble, model: PdmpModel, times):
    """States of every replica at each time; returns (ys (N, G, d), regimes (N, G))."""
    times = np.atleast_1d(np.asarray(times, float))
    if np.any(times < 0) or np.any(times > ens.horizon):
        raise ValueError("evaluation times outside [0, horizon]")
    idx = _last_jump_index(ens.taus, times)
    rows = np.arange(ens.n_rep)[:, None]
    base_t = ens.taus[rows, idx]
    base_y = ens.ys[rows, idx]
    base_i = ens.regimes[rows, idx]
    dt = times[None, :] - base_t
    y = model.flow(dt.ravel(), base_y.reshape(-1, model.dim), base_i.ravel())
    return y.reshape(ens.n_rep, len(times), model.dim), base_i


def final_states(ens: Ensemble, model: PdmpModel):
    """States at the horizon, (ys (N, d), regimes (N,))."""
    last = ens.counts - 1
    rows = np.arange(ens.n_rep)
    dt = ens.horizon - ens.taus[rows, last]
    y = model.flow(dt, ens.ys[rows, last], ens.regimes[rows, last])
    return y, ens.regimes[rows, last].copy()


def _simpson_pieces(model, f, y0, reg, a, b, h_max):
    """Composite Simpson of f(S_reg(s, y0)) over s in [a, b], per piece.

    Returns (integrals, error estimates). Interval counts are multiples of 4
    so the half-resolution rule reuses every other node for the error.
    """
    length = b - a
    m = np.maximum(QUAD_MIN_INTERVALS, np.ceil(length / h_max)).astype(np.int64)
    m = ((m + 3) // 4) * 4
    vals = np.zeros(len(a))
    errs = np.zeros(len(a))
    npts = m + 1
    ends = np.cumsum(npts)
    start = 0
    while start < len(a):
        base = ends[start - 1] if start else 0
        stop = int(np.searchsorted(ends, base + _POINTS_PER_CHUNK, side="right"))
        stop = max(stop, start + 1)
        sl = slice(start, stop)
        mm = m[sl]
        pts = mm + 1
        piece = np.repeat(np.arange(stop - start), pts)
        first = np.concatenate([[0], np.cumsum(pts)[:-1]])
        k = np.arange(pts.sum()) - np.repeat(first, pts)
        h = (length[sl] / mm)[piece]
        s = a[sl][piece] + k * h
        y = model.flow(s, y0[sl][piece], reg[sl][piece])
        fv = f(y, reg[sl][piece])
        mk = mm[piece]
        w = np.where((k == 0) | (k == mk), 1.0, np.where(k % 2 == 1, 4.0, 2.0))
        fine = np.bincount(piece, weights=w * fv * h / 3.0, minlength=stop - start)
        even = k % 2 == 0
        k2 = k // 2
        w2 = np.where((k2 == 0) | (k2 == mk // 2), 1.0, np.where(k2 % 2 == 1, 4.0, 2.0))
        coarse = np.bincount(piece[even], weights=(w2 * fv * 2 * h / 3.0)[even], minlength=stop - start)
        vals[sl] = fine
        errs[sl] = np.abs(fine - coarse) / 15.0
        start = stop
    return vals, errs


def path_integrals(ens: Ensemble, model: PdmpModel, f, breakpoints, h_max: float = QUAD_STEP):
    """Integrals of f(Psi(s)) over consecutive windows, for every replica.

    ``breakpoints`` is an increasing array b_0 < ... < b_G inside
    [0, horizon]. Returns (values (N, G), error estimates (N, G)); the
    integrand is integrated separately on every piece between jumps.
    """
    b = np.asarray(breakpoints, float)
    if b.ndim != 1 or len(b) < 2 or np.any(np.diff(b) < 0):
        raise ValueError("breakpoints must be an increasing array of length >= 2")
    if b[0] < 0 or b[-1] > ens.horizon * (1 + 1e-12):
        raise ValueError("breakpoints outside [0, horizon]")
    n, k = ens.taus.shape
    g = len(b) - 1
    # merge jump times and breakpoints per row; ties put jumps first
    allt = np.concatenate([ens.taus, np.broadcast_to(b, (n, len(b)))], axis=1)
    is_tau = np.concatenate([np.ones((n, k), bool), np.zeros((n, len(b)), bool)], axis=1)
    order = np.argsort(allt, axis=1, kind="stable")
    st = np.take_along_axis(allt, order, axis=1)
    stau = np.take_along_axis(is_tau, order, axis=1)
    seg = np.cumsum(stau, axis=1) - 1
    win = np.cumsum(~stau, axis=1) - 1
    p0 = st[:, :-1]
    p1 = st[:, 1:]
    seg0 = seg[:, :-1]
    win0 = win[:, :-1]
    valid = np.isfinite(p1) & (p1 > p0) & (win0 >= 0) & (win0 < g) & (seg0 >= 0)
    rr, cc = np.nonzero(valid)
    sidx = seg0[rr, cc]
    tau0 = ens.taus[rr, sidx]
    a = p0[rr, cc] - tau0
    bb = p1[rr, cc] - tau0
    vals, errs = _simpson_pieces(model, f, ens.ys[rr, sidx], ens.regimes[rr, sidx], a, bb, h_max)
    flat = rr * g + win0[rr, cc]
    out = np.bincount(flat, weights=vals, minlength=n * g).reshape(n, g)
    err = np.bincount(flat, weights=errs, minlength=n * g).reshape(n, g)
    return out, err


def path_integral(traj: Trajectory, model: PdmpModel, f, t0: float, t1: float,
                  h_max: float = QUAD_STEP):
    """Integral of f(Psi(s)) over [t0, t1] along one trajectory.

    Returns (value, estimated quadrature error).
    """
    if not 0 <= t0 <= t1 <= traj.horizon:
        raise ValueError(f"need 0 <= t0 <= t1 <= horizon, got {t0}, {t1}")
    if t0 == t1:
        return 0.0, 0.0
    ens = Ensemble(traj.taus[None, :], traj.ys[None, :, :], traj.regimes[None, :],
                   np.array([len(traj.taus)]), traj.horizon, np.zeros((1, 2), np.uint64))
    v, e = path_integrals(ens, model, f, [t0, t1], h_max)
    return float(v[0, 0]), float(e[0, 0])
