"""Empirical measures and the exact Fortet-Mourier distance.

For finitely supported measures the supremum over functions with
``max(|f|_inf, Lip(f)) <= 1`` is a linear program in the values of f on the
support: maximize ``sum_k f_k (mu_k - nu_k)`` subject to ``|f_k| <= 1`` and
``|f_k - f_l| <= rho(x_k, x_l)``. Any feasible vector extends to the whole
space (McShane extension followed by truncation to [-1, 1]), so the LP
optimum *is* the distance, not an approximation of it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .model import HybridMetric, HybridState
from .rng import RngStream

__all__ = ["EmpiricalMeasure", "fm_distance", "FMResult", "subsample", "SupportCapError", "DEFAULT_CAP"]

DEFAULT_CAP = 2000
_PRUNE_MAX = 400
_LEG_TOL = 1e-9


class SupportCapError(ValueError):
    """Combined support exceeds the configured LP size cap."""


@dataclass(frozen=True)
class EmpiricalMeasure:
    """Weighted point set on Y x I (ys: (n, d), regimes: (n,), weights: (n,))."""

    ys: np.ndarray
    regimes: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        ys = np.atleast_2d(np.asarray(self.ys, float))
        regimes = np.asarray(self.regimes, dtype=np.int64).reshape(-1)
        w = np.asarray(self.weights, float).reshape(-1)
        if not (len(ys) == len(regimes) == len(w)) or len(w) == 0:
            raise ValueError("measure needs matching nonempty points, regimes and weights")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, not 1")
        object.__setattr__(self, "ys", ys)
        object.__setattr__(self, "regimes", regimes)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, ys, regimes) -> EmpiricalMeasure:
        ys = np.asarray(ys, float)
        if ys.ndim == 1:
            ys = ys[:, None]
        n = len(ys)
        return cls(ys, regimes, np.full(n, 1.0 / n))

    @classmethod
    def dirac(cls, x: HybridState) -> EmpiricalMeasure:
        return cls(x.array()[None, :], [x.i], [1.0])

    def __len__(self) -> int:
        return len(self.weights)

    @property
    def points(self) -> list[HybridState]:
        return [HybridState(y, int(i)) for y, i in zip(self.ys, self.regimes)]

    def mean(self, values) -> float:
        return float(np.dot(self.weights, values))

    def to_csv(self, path) -> None:
        d = self.ys.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"y{k}" for k in range(d)] + ["regime", "weight"])
            for y, i, wt in zip(self.ys, self.regimes, self.weights):
                w.writerow([repr(float(v)) for v in y] + [int(i), repr(float(wt))])

    @classmethod
    def from_csv(cls, path, normalize: bool = True) -> EmpiricalMeasure:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
        header, body = rows[0], rows[1:]
        if header[-2:] != ["regime", "weight"]:
            raise ValueError(f"{path}: expected columns y..., regime, weight")
        data = np.array([[float(v) for v in r] for r in body])
        w = data[:, -1]
        if normalize:
            w = w / w.sum()
        return cls(data[:, :-2], data[:, -2].astype(np.int64), w)


@dataclass(frozen=True)
class FMResult:
    value: float
    ys: np.ndarray
    regimes: np.ndarray
    f: np.ndarray  # optimal test function on the merged support

    def __float__(self) -> float:
        return self.value

    def certificate_to_csv(self, path) -> None:
        d = self.ys.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"y{k}" for k in range(d)] + ["regime", "f"])
            for y, i, fv in zip(self.ys, self.regimes, self.f):
                w.writerow([repr(float(v)) for v in y] + [int(i), repr(float(fv) + 0.0)])


def _signed_support(mu: EmpiricalMeasure, nu: EmpiricalMeasure):
    """Merge both supports into distinct points carrying mu - nu."""
    ys = np.vstack([mu.ys, nu.ys])
    regimes = np.concatenate([mu.regimes, nu.regimes])
    w = np.concatenate([mu.weights, -nu.weights])
    keys = np.column_stack([ys, regimes.astype(float)])
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    net = np.bincount(inv.reshape(-1), weights=w, minlength=len(uniq))
    return uniq[:, :-1], uniq[:, -1].astype(np.int64), net


def _active_pairs(D: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pairs whose Lipschitz constraint is not implied by others.

    A pair is implied when its distance is >= 2 (sup bound) or when some
    third point lies metrically between the two. Both legs of such a path
    must be non-negligible, so every implying pair is strictly shorter and
    near-duplicate points cannot prune each other's constraints.
    """
    n = len(D)
    iu, ju = np.triu_indices(n, k=1)
    keep = D[iu, ju] < 2.0
    if 2 < n <= _PRUNE_MAX:
        via = np.full_like(D, np.inf)
        floor = _LEG_TOL * D
        for k in range(n):
            a = D[:, k][:, None]
            b = D[k][None, :]
            ok = (a > floor) & (b > floor)
            np.minimum(via, np.where(ok, a + b, np.inf), out=via)
        keep &= via[iu, ju] > D[iu, ju]
    return iu[keep], ju[keep]


def fm_distance(
    mu: EmpiricalMeasure,
    nu: EmpiricalMeasure,
    metric: HybridMetric,
    *,
    cap: int = DEFAULT_CAP,
    certificate: bool = False,
):
    """Fortet-Mourier distance between two empirical measures.

    Returns a float, or an :class:`FMResult` carrying the optimal test
    function when ``certificate`` is true.
    """
    ys, regimes, net = _signed_support(mu, nu)
    n_union = len(net)
    if n_union > cap:
        raise SupportCapError(f"combined support {n_union} exceeds cap {cap}")
    live = np.abs(net) > 0
    f_full = np.zeros(n_union)
    if live.sum() == 0:
        res = FMResult(0.0, ys, regimes, f_full)
        return res if certificate else 0.0
    sy, sr, w = ys[live], regimes[live], net[live]
    n = len(w)
    D = metric.pairwise(sy, sr)
    I, J = _active_pairs(D)
    m = len(I)
    rows = np.repeat(np.arange(2 * m), 2)
    cols = np.column_stack([I, J, J, I]).reshape(-1) if m else np.zeros(0, int)
    vals = np.tile([1.0, -1.0], 2 * m)
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(2 * m, n))
    b = np.repeat(D[I, J], 2)
    out = linprog(
        -w, A_ub=A if m else None, b_ub=b if m else None, bounds=(-1.0, 1.0),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if out.status != 0:
        raise RuntimeError(f"FM linear program failed: {out.message}")
    f = np.clip(out.x, -1.0, 1.0)
    value = float(max(0.0, np.dot(w, f)))
    if not certificate:
        return value
    f_full[live] = f
    return FMResult(value, ys, regimes, f_full)


def subsample(mu: EmpiricalMeasure, m: int, rng: RngStream) -> EmpiricalMeasure:
    """m i.i.d. draws from mu, returned with uniform weights."""
    if m < 1:
        raise ValueError("subsample size must be >= 1")
    idx = rng.generator().choice(len(mu), size=m, replace=True, p=mu.weights)
    return EmpiricalMeasure(mu.ys[idx], mu.regimes[idx], np.full(m, 1.0 / m))
