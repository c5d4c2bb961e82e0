"""ACE variance-component fits: normal REML for a univariate trait and the
Wishart model for a projected Gower matrix.

Both likelihoods depend on the variance components only through
``log|S| + d log tr(S^{-1} Z)`` once the overall scale is profiled out
(``d = n - m``; for a univariate trait ``Z = (Ly)(Ly)'``). The fits therefore
optimize the three log-variances on that scale-free surface, then recover the
scale (and, for the Wishart model, the degrees of freedom) in closed form or
by a one-dimensional root search. The result is the joint maximizer.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .diversity import Projector, kernel_projector
from .numerics import (
    NotPositiveDefiniteError,
    chol_inverse,
    log_multivariate_gamma,
    logdet_psd,
    minimize,
    multivariate_digamma,
    seeded_rng,
)

__all__ = [
    "FitError",
    "CohortStructure",
    "AceComponents",
    "NormalFit",
    "WishartFit",
    "heritability",
    "normal_reml_loglik",
    "wishart_loglik",
    "normal_reml_fit",
    "wishart_fit",
    "wishart_fit_gower",
    "logit_response",
    "boxcox_response",
    "BoxCoxResult",
]

FLOOR = 1e-8
COMPONENTS = ("A", "C", "E")


class FitError(RuntimeError):
    pass


# --- cohort ------------------------------------------------------------------

_ZYG_A = {"MZ": 1.0, "DZ": 0.5, "NA": 0.0, "NONE": 0.0, "": 0.0}


@dataclass(frozen=True)
class CohortStructure:
    sample_ids: tuple[str, ...]
    family_ids: tuple[str, ...]
    zygosity: dict
    X: np.ndarray
    A: np.ndarray
    C: np.ndarray

    @property
    def n(self) -> int:
        return len(self.sample_ids)

    @property
    def m(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_families(cls, sample_ids, family_ids, zygosity, X=None) -> "CohortStructure":
        """Build A and C from family membership.

        ``zygosity`` maps family id to ``"MZ"``, ``"DZ"`` or ``"NA"``. Members of
        one family share a household (C = 1); A is 1 for MZ, 1/2 for DZ and 0
        for unrelated co-residents. ``X`` defaults to an intercept.
        """
        sample_ids = tuple(sample_ids)
        family_ids = tuple(family_ids)
        n = len(sample_ids)
        if len(family_ids) != n:
            raise ValueError("one family id per sample required")
        fam = np.array(family_ids, dtype=object)
        same = fam[:, None] == fam[None, :]
        C = same.astype(float)
        rel = np.zeros(n)
        for i, f in enumerate(family_ids):
            z = str(zygosity.get(f, "NA")).upper()
            if z not in _ZYG_A:
                raise ValueError(f"family {f!r}: unknown zygosity {z!r}")
            rel[i] = _ZYG_A[z]
        A = np.where(same, rel[:, None], 0.0)
        np.fill_diagonal(A, 1.0)
        if X is None:
            X = np.ones((n, 1))
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise ValueError("covariate rows do not match samples")
        return cls(sample_ids, family_ids, dict(zygosity), X, A, C)

    @classmethod
    def twins(cls, n_mz: int, n_dz: int) -> "CohortStructure":
        """MZ pairs first, then DZ pairs; samples ``2f`` and ``2f+1`` are family ``f``."""
        fams, zyg = [], {}
        for f in range(n_mz + n_dz):
            fid = f"F{f + 1}"
            zyg[fid] = "MZ" if f < n_mz else "DZ"
            fams += [fid, fid]
        ids = [f"S{i + 1}" for i in range(len(fams))]
        return cls.from_families(ids, fams, zyg)

    def families(self) -> list[np.ndarray]:
        """Sample indices per family, in order of first appearance."""
        order: dict[str, list[int]] = {}
        for i, f in enumerate(self.family_ids):
            order.setdefault(f, []).append(i)
        return [np.array(v) for v in order.values()]

    def resample(self, families: Sequence[np.ndarray]) -> tuple["CohortStructure", np.ndarray]:
        """Cohort made of the given (possibly repeated) families.

        Each drawn family becomes a new independent family; A and C keep their
        within-family blocks and are zero across families. Returns the new
        cohort and the original sample index of each new sample.
        """
        idx = np.concatenate(families)
        n = idx.size
        A = np.zeros((n, n))
        C = np.zeros((n, n))
        fam_ids, sids, zyg = [], [], {}
        pos = 0
        for b, members in enumerate(families):
            k = len(members)
            sl = slice(pos, pos + k)
            A[sl, sl] = self.A[np.ix_(members, members)]
            C[sl, sl] = self.C[np.ix_(members, members)]
            fid = f"B{b + 1}"
            zyg[fid] = self.zygosity.get(self.family_ids[members[0]], "NA")
            fam_ids += [fid] * k
            sids += [f"{self.sample_ids[i]}#{b + 1}" for i in members]
            pos += k
        return CohortStructure(tuple(sids), tuple(fam_ids), zyg, self.X[idx], A, C), idx

    def projector(self) -> Projector:
        return kernel_projector(self.X)


# --- components and results ----------------------------------------------------

@dataclass(frozen=True)
class AceComponents:
    sigma2_A: float
    sigma2_C: float
    sigma2_E: float

    def __post_init__(self):
        vals = self.as_array()
        if np.any(vals < 0) or not np.all(np.isfinite(vals)):
            raise ValueError("variance components must be finite and non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.sigma2_A, self.sigma2_C, self.sigma2_E], dtype=float)

    @property
    def total(self) -> float:
        return float(self.as_array().sum())

    def scaled(self, c: float) -> "AceComponents":
        return AceComponents(*(c * self.as_array()))


def heritability(components: AceComponents) -> float:
    """Share of total variance due to the additive genetic component."""
    total = components.sigma2_A + components.sigma2_C + components.sigma2_E
    if not total > 0:
        raise ValueError("total variance must be positive")
    return components.sigma2_A / total


@dataclass
class NormalFit:
    components: AceComponents
    loglik: float
    h: float
    converged: bool
    grad_norm: float
    degenerate: bool = False
    identifiable: bool = True
    n_restarts: int = 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = "normal_reml"
        return out


@dataclass
class WishartFit:
    components: AceComponents
    q: float
    loglik: float
    h: float
    converged: bool
    grad_norm: float
    identifiable: bool = True
    n_restarts: int = 1
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["model"] = "wishart"
        return out


# --- likelihood kernels --------------------------------------------------------

def _project_kernels(L: np.ndarray, A: np.ndarray, C: np.ndarray) -> np.ndarray:
    d = L.shape[0]
    out = np.empty((3, d, d))
    for v, V in enumerate((A, C)):
        W = L @ V @ L.T
        out[v] = (W + W.T) / 2
    out[2] = np.eye(d)
    return out


def _identifiable(K: np.ndarray) -> bool:
    flat = K.reshape(3, -1)
    s = np.linalg.svd(flat, compute_uv=False)
    return bool(s[-1] > 1e-8 * s[0])


def _cov(sig: np.ndarray, K: np.ndarray) -> np.ndarray:
    return np.tensordot(sig, K, axes=1)


class _Surface:
    """Scale-free objective ``log|S| + d log tr(S^{-1} Z)`` in log-variances.

    ``Z`` is either a ``d x d`` matrix or, for a univariate trait, the
    projected vector ``r`` with ``Z = r r'``.
    """

    def __init__(self, K: np.ndarray, data: np.ndarray):
        self.K = K
        self.d = K.shape[1]
        self.rank1 = data.ndim == 1
        self.data = data
        self.diagK = np.array([np.trace(k) for k in K])
        self.trZ = float(data @ data) if self.rank1 else float(np.trace(data))

    def terms(self, sig):
        """``(log|S|, tr(S^-1 Z), [tr(S^-1 K_v)], [tr(S^-1 K_v S^-1 Z)])``."""
        S = _cov(sig, self.K)
        ld, c = logdet_psd(S)
        Sinv = chol_inverse(c)
        tr = np.array([np.vdot(Sinv, self.K[0]), np.vdot(Sinv, self.K[1]), np.trace(Sinv)])
        if self.rank1:
            w = Sinv @ self.data
            T = float(self.data @ w)
            quad = np.array([w @ self.K[0] @ w, w @ self.K[1] @ w, w @ w])
        else:
            W = Sinv @ self.data
            T = float(np.trace(W))
            B = W @ Sinv
            quad = np.array([np.vdot(B, self.K[0]), np.vdot(B, self.K[1]), np.trace(B)])
        return ld, T, tr, quad

    def __call__(self, t):
        return _scale_free(self, np.exp(t))


def _scale_free(surf, sig):
    try:
        ld, T, tr, quad = surf.terms(sig)
    except np.linalg.LinAlgError:
        return np.inf, np.zeros(3)
    if not T > 0:
        return np.inf, np.zeros(3)
    return ld + surf.d * np.log(T), sig * (tr - surf.d * quad / T)


def normal_reml_loglik(y, L, cohort: CohortStructure, components) -> tuple[float, np.ndarray]:
    """REML log-likelihood of ``Ly ~ N(0, L Sigma L')`` and its gradient in
    ``(sigma2_A, sigma2_C, sigma2_E)``."""
    Lm = np.asarray(L, dtype=float)
    r = Lm @ np.asarray(y, dtype=float)
    surf = _Surface(_project_kernels(Lm, cohort.A, cohort.C), r)
    return _normal_ll(surf, _as_sig(components))


def _normal_ll(surf, sig):
    d = surf.d
    ld, T, tr, quad = surf.terms(sig)
    val = -0.5 * d * np.log(2 * np.pi) - 0.5 * ld - 0.5 * T
    return float(val), -0.5 * tr + 0.5 * quad


def wishart_loglik(Z, L, cohort: CohortStructure, q: float, components) -> tuple[float, np.ndarray]:
    """Wishart ``W(L Sigma L', q)`` log-density of ``Z`` and its gradient in
    ``(sigma2_A, sigma2_C, sigma2_E, q)``."""
    Lm = np.asarray(L, dtype=float)
    Z = np.asarray(Z, dtype=float)
    surf = _Surface(_project_kernels(Lm, cohort.A, cohort.C), Z)
    ldZ, _ = logdet_psd(Z)
    return _wishart_ll(surf, ldZ, _as_sig(components), q)


def _wishart_ll(surf, ldZ: float, sig, q: float):
    d = surf.d
    ld, T, tr, quad = surf.terms(sig)
    val = (-0.5 * q * ld - 0.5 * T + 0.5 * (q - d - 1) * ldZ
           - 0.5 * q * d * np.log(2) - log_multivariate_gamma(d, q / 2))
    g_q = -0.5 * ld + 0.5 * ldZ - 0.5 * d * np.log(2) - 0.5 * multivariate_digamma(d, q / 2)
    return float(val), np.array([*(-0.5 * q * tr + 0.5 * quad), g_q])


def _as_sig(components) -> np.ndarray:
    if isinstance(components, AceComponents):
        return components.as_array()
    return np.asarray(components, dtype=float)


# --- fitting -------------------------------------------------------------------

def _direction(surf, q0: float, restarts: int, seed: int, max_iter: int, gtol: float):
    """Optimize the scale-free surface from a moment-matched and random starts.

    Variables are the components divided by the moment-matched total scale,
    box-bounded below by ``FLOOR``. Returns ``(results, scale)``.
    """
    trZ = surf.trZ
    if not trZ > 0:
        return None
    scale = trZ / (q0 * surf.diagK.sum() / 3)

    def fun(u):
        g, grad_t = surf(np.log(u * scale))
        return g, grad_t / u

    rng = seeded_rng(seed, 0)
    starts = [rng.dirichlet(np.ones(3)).clip(FLOOR) for _ in range(restarts - 1)]
    bounds = [(FLOOR, None)] * 3
    # the objective sums d log-scale terms; tolerance scales with d
    results = [minimize(fun, x, bounds=bounds, max_iter=max_iter, gtol=gtol, gscale=float(surf.d))
               for x in [np.full(3, 1 / 3), *starts]]
    return results, scale


def _solve_q(d: int, ld_dir: float, T: float, ldZ: float) -> float:
    """Degrees of freedom maximizing the scale-profiled Wishart likelihood."""

    def score(x):
        q = d - 1 + np.exp(x)
        return (-0.5 * (d * np.log(T / (q * d)) + ld_dir) + 0.5 * ldZ
                - 0.5 * d * np.log(2) - 0.5 * multivariate_digamma(d, q / 2))

    lo, hi = -30.0, np.log(d + 1.0)
    while score(hi) > 0:
        hi += 2.0
        if hi > 60:
            return float(d - 1 + np.exp(hi))
    while score(lo) < 0:
        lo -= 10.0
        if lo < -700:
            return float(d - 1 + np.exp(lo))
    x = optimize.brentq(score, lo, hi, xtol=1e-12, rtol=1e-14)
    return float(d - 1 + np.exp(x))


def _final_grad_norm(grad_t: np.ndarray, at_floor: np.ndarray) -> float:
    g = grad_t.copy()
    # maximization: a component pinned at its floor may have a negative score
    pinned = g[:3]
    pinned[at_floor & (pinned < 0)] = 0.0
    return float(np.max(np.abs(g)))


def _surface(cohort: CohortStructure, data, *, A=None, C=None, L=None, projected=False):
    """Objective surface for ``data`` under the cohort's (or the given) A and C.

    ``data`` is a trait vector ``y`` or an unprojected Gower matrix ``M``; with
    ``projected=True`` it is already ``L y`` or ``L M L'``. Returns the surface
    and an identifiability flag.
    """
    A = cohort.A if A is None else np.asarray(A, dtype=float)
    C = cohort.C if C is None else np.asarray(C, dtype=float)
    data = np.asarray(data, dtype=float)
    Lm = np.asarray(L if L is not None else cohort.projector(), dtype=float)
    K = _project_kernels(Lm, A, C)
    if not projected:
        data = Lm @ data if data.ndim == 1 else project_sym(Lm, data)
    return _Surface(K, data), _identifiable(K)


def project_sym(L, M):
    Z = L @ M @ L.T
    return (Z + Z.T) / 2


def normal_reml_fit(y, cohort: CohortStructure, L=None, *, A=None, restarts: int = 5,
                    seed: int = 0, max_iter: int = 500, gtol: float = 1e-6) -> NormalFit:
    """REML fit of the univariate ACE model.

    ``A`` overrides the cohort's relationship matrix (permutation tests).
    """
    y = np.asarray(y, dtype=float)
    if y.shape != (cohort.n,) or not np.all(np.isfinite(y)):
        raise ValueError("y must be a finite vector with one entry per sample")
    surf, ident = _surface(cohort, y, A=A, L=L)
    return _normal_from_surface(surf, ident, restarts=restarts, seed=seed, max_iter=max_iter,
                                gtol=gtol, ref_norm2=float(y @ y))


def _normal_from_surface(surf, ident, *, restarts=5, seed=0, max_iter=500, gtol=1e-6,
                         ref_norm2=None) -> NormalFit:
    if not ident:
        warnings.warn("A, C and E are aliased after projection; only the total "
                      "variance is identified", stacklevel=3)
    d = surf.d
    yy = surf.trZ
    if yy == 0 or (ref_norm2 is not None and yy <= 1e-20 * ref_norm2):
        warnings.warn("projected response is zero; variance components are at their floor",
                      stacklevel=3)
        comps = AceComponents(FLOOR, FLOOR, FLOOR)
        return NormalFit(comps, np.nan, heritability(comps), False, np.nan,
                         degenerate=True, identifiable=ident, n_restarts=restarts)
    results, scale = _direction(surf, 1.0, restarts, seed, max_iter, gtol)
    best = min(results, key=lambda r_: r_.value)
    sig_dir = best.argmin * scale
    _, T, _, _ = surf.terms(sig_dir)
    sig = sig_dir * T / d
    val, g = _normal_ll(surf, sig)
    gn = _final_grad_norm(g * sig, best.argmin <= FLOOR)
    comps = AceComponents(*sig)
    return NormalFit(comps, val, heritability(comps), best.converged, gn,
                     identifiable=ident, n_restarts=restarts)


def wishart_fit(Z, L, cohort: CohortStructure, *, A=None, restarts: int = 5, seed: int = 0,
                max_iter: int = 500, gtol: float = 1e-6, require_pd: bool = True) -> WishartFit:
    """Maximum-likelihood fit of ``Z ~ W(L Sigma L', q)``.

    With ``require_pd=False`` a singular (positive semidefinite) ``Z`` is
    accepted: the variance components and ``h`` are still estimated, but ``q``
    and the log-likelihood are undefined and reported as NaN.
    """
    Lm = np.asarray(L, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.shape != (Lm.shape[0], Lm.shape[0]):
        raise ValueError(f"Z has shape {Z.shape}, expected {(Lm.shape[0],) * 2}")
    ldZ = _z_logdet(Z, require_pd)
    surf, ident = _surface(cohort, Z, A=A, L=Lm, projected=True)
    return _wishart_from_surface(surf, ident, ldZ, restarts=restarts, seed=seed,
                                 max_iter=max_iter, gtol=gtol)


def wishart_fit_gower(M, cohort: CohortStructure, *, A=None, restarts: int = 5, seed: int = 0,
                      max_iter: int = 500, gtol: float = 1e-6, require_pd: bool = True,
                      ldZ: float | None = None, L=None) -> WishartFit:
    """Wishart fit from the unprojected Gower matrix ``M``.

    Same as ``wishart_fit(L M L', L, cohort)``. ``ldZ`` (``log|L M L'|``) may
    be passed in when refitting the same ``M`` many times.
    """
    M = np.asarray(M, dtype=float)
    if M.shape != (cohort.n, cohort.n):
        raise ValueError(f"M has shape {M.shape}, expected {(cohort.n,) * 2}")
    Lm = np.asarray(L if L is not None else cohort.projector(), dtype=float)
    surf, ident = _surface(cohort, M, A=A, L=Lm)
    if ldZ is None:
        ldZ = _z_logdet(surf.data, require_pd)
    return _wishart_from_surface(surf, ident, ldZ, restarts=restarts, seed=seed,
                                 max_iter=max_iter, gtol=gtol)


def _z_logdet(Z, require_pd: bool):
    try:
        return logdet_psd(Z)[0]
    except NotPositiveDefiniteError as exc:
        if require_pd:
            raise FitError(
                f"Z is not positive definite (pivot {exc.pivot}); the Wishart model needs "
                "a full-rank Z, use normal_reml_fit for a univariate response"
            ) from exc
        return None


def _wishart_from_surface(surf, ident, ldZ, *, restarts=5, seed=0, max_iter=500,
                          gtol=1e-6) -> WishartFit:
    d = surf.d
    if not ident:
        warnings.warn("A, C and E are aliased after projection; only the total "
                      "variance is identified", stacklevel=3)
    out = _direction(surf, d + 1.0, restarts, seed, max_iter, gtol)
    if out is None:
        raise FitError("Z has zero trace")
    results, scale = out
    best_val = min(r.value for r in results)
    cands = []
    for res in results:
        if res.value - best_val > 1e-10 * max(1.0, abs(best_val)):
            continue
        sig_dir = res.argmin * scale
        ld_dir, T, _, _ = surf.terms(sig_dir)
        q = _solve_q(d, ld_dir, T, ldZ) if ldZ is not None else np.nan
        cands.append((q, res, sig_dir, T))
    cands.sort(key=lambda c: (np.nan_to_num(c[0], nan=np.inf), c[1].value))
    q, best, sig_dir, T = cands[0]
    notes = []
    if ldZ is None:
        sig = sig_dir * T / (d * (d + 1.0))
        comps = AceComponents(*sig)
        notes.append("Z singular: q and log-likelihood undefined")
        return WishartFit(comps, np.nan, np.nan, heritability(comps), best.converged, np.nan,
                          identifiable=ident, n_restarts=restarts, notes=notes)
    sig = sig_dir * T / (q * d)
    val, g = _wishart_ll(surf, ldZ, sig, q)
    g_t = np.append(g[:3] * sig, g[3] * (q - d + 1))
    gn = _final_grad_norm(g_t, best.argmin <= FLOOR)
    if q > 1e20:
        notes.append("q diverged: Z is proportional to the fitted scale matrix")
    comps = AceComponents(*sig)
    return WishartFit(comps, q, val, heritability(comps), best.converged, gn,
                      identifiable=ident, n_restarts=restarts, notes=notes)


# --- univariate responses ----------------------------------------------------

def logit_response(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if np.any(theta <= 0) or np.any(theta >= 1):
        raise ValueError("logit needs proportions strictly inside (0, 1); "
                         "add pseudo counts before transforming")
    return np.log(theta / (1 - theta))


@dataclass
class BoxCoxResult:
    y: np.ndarray
    lmbda: float
    degenerate: bool = False


BOXCOX_GRID = np.round(np.arange(-2.0, 2.0 + 1e-9, 0.05), 10)


def boxcox_response(x, grid=BOXCOX_GRID) -> BoxCoxResult:
    """Box-Cox transform with the exponent maximizing the profile likelihood on ``grid``.

    Ties go to the exponent closest to 1.
    """
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0) or not np.all(np.isfinite(x)):
        raise ValueError("Box-Cox needs strictly positive input")
    grid = np.asarray(grid, dtype=float)
    if np.ptp(x) == 0:
        warnings.warn("constant input: Box-Cox profile is flat, using lambda = 1", stacklevel=2)
        lam = 1.0
        return BoxCoxResult(stats.boxcox(x, lmbda=lam), lam, degenerate=True)
    llf = np.array([stats.boxcox_llf(lam, x) for lam in grid])
    top = np.flatnonzero(llf >= llf.max() - 1e-12 * max(1.0, abs(llf.max())))
    lam = float(grid[top[np.argmin(np.abs(grid[top] - 1.0))]])
    return BoxCoxResult(stats.boxcox(x, lmbda=lam), lam)
