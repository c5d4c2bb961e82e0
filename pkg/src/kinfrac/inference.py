"""Permutation p-values and family-bootstrap intervals for heritability."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .numerics import seeded_rng

__all__ = [
    "PermutationResult",
    "BootstrapResult",
    "permutation_pvalue",
    "permutation_test",
    "bootstrap_ci",
]

log = logging.getLogger(__name__)


@dataclass
class PermutationResult:
    h_hat: float
    h_perm: np.ndarray
    p_value: float
    n_perm: int
    n_failed: int = 0
    add_one: bool = False

    def to_dict(self, rounds: bool = False) -> dict:
        out = {"h_hat": float(self.h_hat), "p_value": float(self.p_value),
               "n_perm": self.n_perm, "n_failed": self.n_failed, "add_one": self.add_one}
        if rounds:
            out["h_perm"] = [float(h) for h in self.h_perm]
        return out


@dataclass
class BootstrapResult:
    h_hat: float
    h_boot: np.ndarray
    se: float
    ci: tuple[float, float]
    alpha: float
    ci_clipped: tuple[float, float] = (0.0, 1.0)
    clipped: bool = False
    n_failed: int = 0
    notes: list = field(default_factory=list)

    def to_dict(self, rounds: bool = False) -> dict:
        out = {"h_hat": float(self.h_hat), "se": float(self.se),
               "ci": [float(c) for c in self.ci],
               "ci_clipped": [float(c) for c in self.ci_clipped],
               "clipped": self.clipped, "alpha": self.alpha,
               "n_boot": int(self.h_boot.size), "n_failed": self.n_failed,
               "notes": list(self.notes)}
        if rounds:
            out["h_boot"] = [float(h) for h in self.h_boot]
        return out


def permutation_pvalue(h_hat: float, h_perm, add_one: bool = False) -> float:
    """Share of completed rounds with ``h_perm > h_hat`` (strict)."""
    h_perm = np.asarray(h_perm, dtype=float)
    done = h_perm[np.isfinite(h_perm)]
    if done.size == 0:
        return float("nan")
    hits = int(np.sum(done > h_hat))
    if add_one:
        return (hits + 1) / (done.size + 1)
    return hits / done.size


def _h(result) -> float:
    return float(getattr(result, "h", result))


def _perm_round(args):
    fit, A, C, perm = args
    Ap = A[np.ix_(perm, perm)]
    try:
        if C is None:
            return _h(fit(Ap))
        return _h(fit(Ap, C[np.ix_(perm, perm)]))
    except Exception as exc:  # a failed round is recorded, not fatal
        log.warning("permutation round failed: %s", exc)
        return float("nan")


def _map(fn, items, threads: int):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * threads))))
    return [fn(x) for x in items]


def permutation_test(
    fit: Callable,
    A,
    n_perm: int,
    seed: int,
    *,
    C=None,
    permute_c: bool = False,
    add_one: bool = False,
    permutations: Sequence[np.ndarray] | None = None,
    threads: int = 1,
) -> PermutationResult:
    """Test ``h = 0`` by refitting with rows and columns of A permuted.

    ``fit(A)`` (or ``fit(A, C)`` when ``permute_c``) returns ``h`` or an object
    with an ``h`` attribute. Round ``i`` draws its permutation from stream
    ``(seed, i)`` unless ``permutations`` is given. With ``threads > 1`` the
    rounds run in worker processes, so ``fit`` must be picklable.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if permute_c and C is None:
        raise ValueError("permute_c needs C")
    if permutations is None:
        if n_perm < 1:
            raise ValueError("n_perm must be at least 1")
        permutations = [seeded_rng(seed, i).permutation(n) for i in range(n_perm)]
    h_hat = _h(fit(A) if not permute_c else fit(A, np.asarray(C, dtype=float)))
    Cp = np.asarray(C, dtype=float) if permute_c else None
    h_perm = np.array(_map(_perm_round, [(fit, A, Cp, p) for p in permutations], threads))
    failed = int(np.sum(~np.isfinite(h_perm)))
    if failed > 0.01 * len(permutations):
        warnings.warn(f"{failed} of {len(permutations)} permutation rounds failed", stacklevel=2)
    return PermutationResult(h_hat, h_perm, permutation_pvalue(h_hat, h_perm, add_one),
                             len(permutations), failed, add_one)


def _boot_round(args):
    estimator, families, seed, b, max_retries = args
    nf = len(families)
    for attempt in range(max_retries + 1):
        rng = seeded_rng(seed, (b, attempt))
        draw = rng.integers(0, nf, size=nf)
        try:
            return _h(estimator([families[i] for i in draw]))
        except Exception as exc:
            log.info("bootstrap round %d attempt %d failed: %s", b, attempt, exc)
    return float("nan")


def bootstrap_ci(
    estimator: Callable,
    families: Sequence[np.ndarray],
    n_boot: int,
    alpha: float = 0.05,
    seed: int = 0,
    *,
    h_hat: float | None = None,
    max_retries: int = 10,
    threads: int = 1,
) -> BootstrapResult:
    """Normal-approximation interval from resampling whole families.

    ``estimator(families)`` refits on the listed families (index arrays into
    the original samples, repeats allowed) and returns ``h``. The interval is
    ``h_hat + z * se`` with ``se`` the standard deviation of the bootstrap
    estimates.
    """
    families = [np.asarray(f) for f in families]
    if len(families) < 2:
        raise ValueError("need at least two families to bootstrap")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if h_hat is None:
        h_hat = _h(estimator(families))
    h_boot = np.array(_map(_boot_round, [(estimator, families, seed, b, max_retries)
                                         for b in range(n_boot)], threads))
    ok = h_boot[np.isfinite(h_boot)]
    notes = []
    failed = int(h_boot.size - ok.size)
    if failed:
        notes.append(f"{failed} bootstrap rounds failed after retries")
    se = float(np.std(ok, ddof=1)) if ok.size > 1 else float("nan")
    if se == 0:
        warnings.warn("bootstrap estimates are all equal; interval is degenerate", stacklevel=2)
        notes.append("zero bootstrap spread")
    lo = h_hat + stats.norm.ppf(alpha / 2) * se
    hi = h_hat + stats.norm.ppf(1 - alpha / 2) * se
    clipped = (float(np.clip(lo, 0, 1)), float(np.clip(hi, 0, 1)))
    return BootstrapResult(float(h_hat), h_boot, se, (float(lo), float(hi)), alpha,
                           clipped, clipped != (lo, hi), failed, notes)
