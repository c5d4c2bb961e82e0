"""Ordination baselines: principal coordinates, metric and non-metric MDS.

Each embedding column can be used directly as a univariate trait for
:func:`kinfrac.models.normal_reml_fit`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.spatial.distance import pdist, squareform

from .diversity import RankDeficientError, gower_center
from .numerics import seeded_rng

__all__ = [
    "Embedding",
    "pcoa",
    "metric_mds",
    "nonmetric_mds",
    "monotone_regression",
    "raw_stress",
    "kruskal_stress",
]

MAX_ITER = 300
TOL = 1e-8
NMDS_RESTARTS = 3


@dataclass
class Embedding:
    coords: np.ndarray
    method: str
    eigenvalues: np.ndarray | None = None
    stress: float | None = None
    iterations: int = 0
    converged: bool = True
    stress_history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.coords.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.coords[:, j].copy()

    def to_tsv(self, ids) -> str:
        buf = io.StringIO()
        buf.write("sample\t" + "\t".join(f"coord_{j + 1}" for j in range(self.d)) + "\n")
        for sid, row in zip(ids, self.coords):
            buf.write(sid + "\t" + "\t".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()

    def metadata(self) -> dict:
        out = {"method": self.method, "d": self.d, "iterations": self.iterations,
               "converged": self.converged, **self.meta}
        if self.eigenvalues is not None:
            out["eigenvalues"] = [float(v) for v in self.eigenvalues]
        if self.stress is not None:
            out["stress"] = float(self.stress)
        return out


def _fix_signs(V: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Flip columns so that their first non-negligible entry is positive."""
    V = V.copy()
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.flatnonzero(np.abs(col) > tol * max(np.abs(col).max(), 1e-300))
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return V


def pcoa(M, d: int, rtol: float = 1e-8) -> Embedding:
    """Principal coordinates ``sqrt(lambda_j) v_j`` of a Gower matrix.

    ``d`` may not exceed the numerical rank of ``M`` (eigenvalues above
    ``rtol`` times the largest in magnitude).
    """
    M = np.asarray(M, dtype=float)
    if d < 1:
        raise ValueError("d must be at least 1")
    lam, V = np.linalg.eigh((M + M.T) / 2)
    lam, V = lam[::-1], V[:, ::-1]
    scale = np.abs(lam).max() if lam.size else 0.0
    rank = int(np.sum(lam > rtol * scale)) if scale > 0 else 0
    if d > rank:
        raise RankDeficientError(f"requested {d} coordinates but M has numerical rank {rank}")
    V = _fix_signs(V[:, :d])
    coords = V * np.sqrt(lam[:d])
    pos = lam[lam > 0].sum()
    return Embedding(coords, "pcoa", eigenvalues=lam[:d].copy(),
                     meta={"trace": float(np.trace(M)), "rank": rank,
                           "explained": [float(v / pos) for v in lam[:d]]})


def raw_stress(X: np.ndarray, delta: np.ndarray) -> float:
    """``sum_{i<j} (|x_i - x_j| - delta_ij)^2`` with ``delta`` in condensed form."""
    return float(np.sum((pdist(X) - delta) ** 2))


def kruskal_stress(dist: np.ndarray, disp: np.ndarray) -> float:
    den = float(np.sum(dist**2))
    return float(np.sqrt(np.sum((dist - disp) ** 2) / den)) if den > 0 else 0.0


def monotone_regression(y, w=None, increasing: bool = True) -> np.ndarray:
    """Least-squares monotone fit by pool-adjacent-violators."""
    return isotonic_regression(np.asarray(y, dtype=float), weights=w, increasing=increasing).x


def _guttman(X: np.ndarray, target: np.ndarray) -> np.ndarray:
    """One majorization step ``X <- B(X) X / n`` for unit weights."""
    n = X.shape[0]
    dist = squareform(pdist(X))
    with np.errstate(divide="ignore", invalid="ignore"):
        B = -np.where(dist > 0, target / dist, 0.0)
    np.fill_diagonal(B, 0.0)
    np.fill_diagonal(B, -B.sum(axis=1))
    return B @ X / n


def _check_u(U, d: int) -> np.ndarray:
    U = np.asarray(U, dtype=float)
    if d < 1:
        raise ValueError("d must be at least 1")
    if U.ndim != 2 or U.shape[0] != U.shape[1]:
        raise ValueError("dissimilarity matrix must be square")
    return U


def _pcoa_start(U: np.ndarray, d: int) -> np.ndarray:
    n = U.shape[0]
    try:
        return pcoa(gower_center(U).M, d).coords
    except RankDeficientError:
        # pad with zero columns when the Gower matrix is too low-rank
        X = np.zeros((n, d))
        lam, V = np.linalg.eigh(gower_center(U).M)
        k = min(d, int(np.sum(lam > 0)))
        if k:
            X[:, :k] = V[:, ::-1][:, :k] * np.sqrt(lam[::-1][:k])
        return X


def metric_mds(U, d: int, *, max_iter: int = MAX_ITER, tol: float = TOL, init=None) -> Embedding:
    """SMACOF minimization of raw stress, started from principal coordinates.

    Stops when the relative stress decrease falls below ``tol``. The stress
    sequence is non-increasing.
    """
    U = _check_u(U, d)
    delta = squareform(U, checks=False)
    X = np.array(init, dtype=float) if init is not None else _pcoa_start(U, d)
    tU = squareform(delta)
    s = raw_stress(X, delta)
    hist = [s]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if s <= 1e-14 * max(1.0, float(np.sum(delta**2))):
            converged = True
            break
        X = _guttman(X, tU)
        s_new = raw_stress(X, delta)
        hist.append(s_new)
        done = s - s_new <= tol * s
        s = s_new
        if done:
            converged = True
            break
    return Embedding(X, "mmds", stress=s, iterations=it, converged=converged,
                     stress_history=hist, meta={"max_iter": max_iter, "tol": tol, "init": "pcoa"
                                                if init is None else "user"})


def _nmds_run(delta, X, max_iter, tol):
    npairs = delta.size
    best = (np.inf, X, 0)
    prev = np.inf
    hist = []
    converged = False
    for it in range(1, max_iter + 1):
        dist = pdist(X)
        # primary approach: ties in delta may be broken by the current distances
        order = np.lexsort((dist, delta))
        disp = np.empty_like(dist)
        disp[order] = monotone_regression(dist[order])
        s1 = kruskal_stress(dist, disp)
        hist.append(s1)
        if s1 < best[0]:
            best = (s1, X, it)
        if s1 <= 1e-12 or (np.isfinite(prev) and abs(prev - s1) <= tol * prev):
            converged = True
            break
        prev = s1
        ss = float(np.sum(disp**2))
        if ss == 0:
            break
        disp *= np.sqrt(npairs / ss)
        X = _guttman(X, squareform(disp))
    return best, it, converged, hist


def nonmetric_mds(U, d: int, *, max_iter: int = MAX_ITER, tol: float = TOL,
                  restarts: int = NMDS_RESTARTS, seed: int = 0) -> Embedding:
    """Non-metric MDS by alternating monotone regression and majorization.

    Runs from the principal-coordinate start and ``restarts`` random starts
    (stream ``(seed, r)``); returns the configuration with the lowest
    Kruskal stress-1.
    """
    U = _check_u(U, d)
    n = U.shape[0]
    delta = squareform(U, checks=False)
    starts = [_pcoa_start(U, d)]
    spread = float(np.sqrt(np.mean(delta**2))) or 1.0
    for r in range(restarts):
        starts.append(seeded_rng(seed, r).standard_normal((n, d)) * spread)
    best = None
    for k, X0 in enumerate(starts):
        (s1, X, _), it, conv, hist = _nmds_run(delta, X0, max_iter, tol)
        if best is None or s1 < best[0] - 1e-15:
            best = (s1, X, it, conv, hist, k)
    s1, X, it, conv, hist, k = best
    return Embedding(X, "nmds", stress=s1, iterations=it, converged=conv, stress_history=hist,
                     meta={"max_iter": max_iter, "tol": tol, "restarts": restarts,
                           "seed": seed, "best_start": "pcoa" if k == 0 else f"random{k - 1}",
                           "stress_kind": "kruskal-1", "ties": "primary"})
