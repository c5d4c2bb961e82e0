"""Glue between data, dissimilarities and model fits.

The estimator classes here are plain picklable callables so that
permutation and bootstrap rounds can run in worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diversity import gower_center
from .models import (
    CohortStructure,
    NormalFit,
    WishartFit,
    _identifiable,
    _normal_from_surface,
    _project_kernels,
    _Surface,
    _wishart_from_surface,
    _z_logdet,
    boxcox_response,
    logit_response,
    normal_reml_fit,
    project_sym,
    wishart_fit_gower,
)
from .ordination import metric_mds, nonmetric_mds, pcoa

__all__ = [
    "METHODS",
    "trait",
    "WishartPermFit",
    "NormalPermFit",
    "BootstrapEstimator",
    "fit_method",
]

METHODS = ("wishart", "logit", "boxcox", "pc1", "pc2", "pc3", "mmds", "nmds")


def trait(method: str, *, U=None, M=None, theta_e=None, seed: int = 0) -> np.ndarray:
    """Univariate response for a non-Wishart method.

    ``theta_e`` (per-sample node abundance) feeds ``logit``/``boxcox``; the
    ordination methods use ``U`` (and ``M``, derived from ``U`` if missing).
    """
    if method in ("logit", "boxcox"):
        if theta_e is None:
            raise ValueError(f"{method} needs node abundances")
        theta_e = np.asarray(theta_e, dtype=float)
        if np.all(np.abs(theta_e - 1.0) < 1e-12):
            raise ValueError(f"{method} is undefined at the root: node abundance is 1 "
                             "for every sample")
        if method == "logit":
            return logit_response(theta_e)
        return boxcox_response(theta_e).y
    if U is None:
        raise ValueError(f"{method} needs a dissimilarity matrix")
    if method in ("pc1", "pc2", "pc3"):
        j = int(method[2])
        if M is None:
            M = gower_center(U).M
        return pcoa(M, j).coords[:, j - 1]
    if method == "mmds":
        return metric_mds(U, 1).coords[:, 0]
    if method == "nmds":
        return nonmetric_mds(U, 1, seed=seed).coords[:, 0]
    raise ValueError(f"unknown method {method!r}")


class WishartPermFit:
    """``A -> h`` for a fixed Gower matrix, reusing the projection of ``M``."""

    def __init__(self, M, cohort: CohortStructure, *, restarts: int = 1, seed: int = 0):
        self.L = cohort.projector().L
        self.Z = project_sym(self.L, np.asarray(M, dtype=float))
        self.ldZ = _z_logdet(self.Z, True)
        self.C = cohort.C
        self.restarts, self.seed = restarts, seed

    def fit(self, A, C=None) -> WishartFit:
        K = _project_kernels(self.L, A, self.C if C is None else C)
        return _wishart_from_surface(_Surface(K, self.Z), _identifiable(K), self.ldZ,
                                     restarts=self.restarts, seed=self.seed)

    def __call__(self, A, C=None) -> float:
        return self.fit(A, C).h


class NormalPermFit:
    """``A -> h`` for a fixed univariate trait."""

    def __init__(self, y, cohort: CohortStructure, *, restarts: int = 1, seed: int = 0):
        y = np.asarray(y, dtype=float)
        self.L = cohort.projector().L
        self.r = self.L @ y
        self.yy = float(y @ y)
        self.C = cohort.C
        self.restarts, self.seed = restarts, seed

    def fit(self, A, C=None) -> NormalFit:
        K = _project_kernels(self.L, A, self.C if C is None else C)
        return _normal_from_surface(_Surface(K, self.r), _identifiable(K),
                                    restarts=self.restarts, seed=self.seed,
                                    ref_norm2=self.yy)

    def __call__(self, A, C=None) -> float:
        return self.fit(A, C).h


def fit_method(method: str, cohort: CohortStructure, *, U=None, theta_e=None,
               restarts: int = 5, seed: int = 0, require_pd: bool = True):
    """Fit one method on one dataset; returns a Wishart or normal fit."""
    if method == "wishart":
        if U is None:
            raise ValueError("wishart needs a dissimilarity matrix")
        M = gower_center(U).M
        return wishart_fit_gower(M, cohort, restarts=restarts, seed=seed, require_pd=require_pd)
    y = trait(method, U=U, theta_e=theta_e, seed=seed)
    return normal_reml_fit(y, cohort, restarts=restarts, seed=seed)


@dataclass
class BootstrapEstimator:
    """Refit a method on resampled families.

    Root-UniFrac is pairwise, so the dissimilarity matrix of the resampled
    samples is the matching sub-block of ``U``; node abundances and
    ordinations are recomputed on the resampled data. A singular ``Z``
    (duplicated samples) still yields an estimate of ``h``.
    """

    method: str
    cohort: CohortStructure
    U: np.ndarray | None = None
    theta_e: np.ndarray | None = None
    restarts: int = 1
    seed: int = 0

    def __call__(self, families) -> float:
        cb, idx = self.cohort.resample(families)
        U = None if self.U is None else self.U[np.ix_(idx, idx)]
        th = None if self.theta_e is None else self.theta_e[idx]
        return fit_method(self.method, cb, U=U, theta_e=th, restarts=self.restarts,
                          seed=self.seed, require_pd=False).h
