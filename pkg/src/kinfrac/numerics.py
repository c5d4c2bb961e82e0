"""Numerical kernels shared by the model fits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import optimize
from scipy.linalg import lapack
from scipy.special import gammaln, psi

__all__ = [
    "NotPositiveDefiniteError",
    "NonFiniteObjectiveError",
    "OptimResult",
    "logdet_psd",
    "chol_inverse",
    "log_multivariate_gamma",
    "multivariate_digamma",
    "minimize",
    "fd_gradient_check",
    "seeded_rng",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    def __init__(self, pivot: int):
        super().__init__(f"matrix is not positive definite (leading minor {pivot} fails)")
        self.pivot = pivot


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, x):
        super().__init__(f"objective is not finite at {np.array2string(np.asarray(x))}")
        self.x = np.array(x, copy=True)


def _potrf(S: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(S, lower=1, clean=1)
    if info != 0:
        raise NotPositiveDefiniteError(int(info))
    return c


def logdet_psd(S) -> tuple[float, np.ndarray]:
    """Log-determinant of a symmetric positive definite matrix.

    Returns ``(logdet, L)`` with ``L`` the lower Cholesky factor.
    """
    S = np.asarray(S, dtype=float)
    c = _potrf(S)
    return 2.0 * float(np.sum(np.log(np.diag(c)))), c


def chol_inverse(c: np.ndarray) -> np.ndarray:
    """Symmetric inverse from a lower Cholesky factor."""
    inv, info = lapack.dpotri(c, lower=1)
    if info != 0:
        raise NotPositiveDefiniteError(int(info))
    low = np.tril(inv)
    return low + np.tril(low, -1).T


def log_multivariate_gamma(p: int, a: float) -> float:
    if a <= (p - 1) / 2:
        raise ValueError(f"multivariate gamma of order {p} needs a > {(p - 1) / 2}, got {a}")
    j = np.arange(1, p + 1)
    return float(p * (p - 1) / 4 * np.log(np.pi) + gammaln(a + (1 - j) / 2).sum())


def multivariate_digamma(p: int, a: float) -> float:
    """d/da of :func:`log_multivariate_gamma`."""
    if a <= (p - 1) / 2:
        raise ValueError(f"multivariate digamma of order {p} needs a > {(p - 1) / 2}, got {a}")
    j = np.arange(1, p + 1)
    return float(psi(a + (1 - j) / 2).sum())


@dataclass
class OptimResult:
    argmin: np.ndarray
    value: float
    iterations: int
    converged: bool
    grad_norm: float
    message: str = ""
    n_evals: int = 0


def _projected_grad(x, g, bounds):
    g = np.array(g, dtype=float)
    if bounds is None:
        return g
    for i, (lo, hi) in enumerate(bounds):
        if lo is not None and x[i] <= lo and g[i] > 0:
            g[i] = 0.0
        if hi is not None and x[i] >= hi and g[i] < 0:
            g[i] = 0.0
    return g


def minimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    *,
    starts: Sequence = (),
    bounds=None,
    max_iter: int = 500,
    gtol: float = 1e-6,
    gscale: float | None = None,
    memory: int = 10,
) -> OptimResult:
    """Limited-memory quasi-Newton minimization with optional box bounds.

    ``fun`` returns ``(value, gradient)``. The gradient tolerance is relative:
    ``gtol * gscale``, with ``gscale`` defaulting to ``max(1, |grad f(x0)|_inf)``
    of each start. Each entry of ``starts`` is an extra
    starting point; the lowest final value wins.
    """
    best: OptimResult | None = None
    for x_start in [x0, *starts]:
        x_start = np.asarray(x_start, dtype=float)
        n_evals = 0

        def wrapped(x):
            nonlocal n_evals
            n_evals += 1
            v, g = fun(x)
            if not np.isfinite(v) or not np.all(np.isfinite(g)):
                raise NonFiniteObjectiveError(x)
            return float(v), np.asarray(g, dtype=float)

        v0, g0 = wrapped(x_start)
        gn0 = float(np.max(np.abs(_projected_grad(x_start, g0, bounds)))) if g0.size else 0.0
        tol = gtol * (gscale if gscale is not None else max(1.0, gn0))
        if gn0 <= tol:
            res = OptimResult(x_start, v0, 0, True, gn0, "initial point is stationary", n_evals)
        else:
            r = optimize.minimize(
                wrapped, x_start, jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": max_iter, "maxcor": memory, "gtol": tol,
                         "ftol": 1e-15, "maxls": 40},
            )
            _, g = wrapped(r.x)
            gn = float(np.max(np.abs(_projected_grad(r.x, g, bounds))))
            res = OptimResult(np.asarray(r.x), float(r.fun), int(r.nit), gn <= tol, gn,
                              str(r.message), n_evals)
        if best is None or res.value < best.value:
            best = res
    return best


def fd_gradient_check(fun, x, h: float = 1e-5) -> float:
    """Max componentwise discrepancy between analytic and central-difference gradients.

    Discrepancies are scaled by the larger of the two gradients' inf-norms, so
    the result is a relative error. The step for coordinate ``i`` is
    ``h * max(1, |x_i|)``.
    """
    if not h > 0:
        raise ValueError("finite-difference step must be positive")
    x = np.asarray(x, dtype=float)
    _, g = fun(x)
    g = np.asarray(g, dtype=float)
    fd = np.empty_like(x)
    for i in range(x.size):
        step = h * max(1.0, abs(x[i]))
        xp, xm = x.copy(), x.copy()
        xp[i] += step
        xm[i] -= step
        fd[i] = (fun(xp)[0] - fun(xm)[0]) / (2 * step)
    scale = max(np.max(np.abs(fd)), np.max(np.abs(g)), np.finfo(float).tiny)
    return float(np.max(np.abs(g - fd)) / scale)


def seeded_rng(seed: int, stream=0) -> np.random.Generator:
    """Independent deterministic stream keyed by ``(seed, stream)``.

    ``stream`` may be an int or a tuple of ints (e.g. ``(cell, round)``).
    """
    key = tuple(stream) if isinstance(stream, (tuple, list)) else (stream,)
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))
