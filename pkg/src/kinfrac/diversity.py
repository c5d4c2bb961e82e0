"""Root-UniFrac dissimilarities, Gower centering and fixed-effect projection."""

from __future__ import annotations

import io
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .abundance import BranchProportions
from .phylo import PhyloTree

__all__ = [
    "RankDeficientError",
    "DissimilarityMatrix",
    "GowerMatrix",
    "Projector",
    "root_unifrac",
    "gower_center",
    "kernel_projector",
    "project",
    "check_distinct_branch",
    "is_positive_definite",
    "read_matrix_tsv",
]


class RankDeficientError(ValueError):
    pass


def _ids(ids, n):
    return tuple(ids) if ids is not None else tuple(f"S{i + 1}" for i in range(n))


@dataclass(frozen=True)
class DissimilarityMatrix:
    U: np.ndarray
    ids: tuple[str, ...] | None = None

    def __post_init__(self):
        U = np.asarray(self.U, dtype=float)
        if U.ndim != 2 or U.shape[0] != U.shape[1]:
            raise ValueError("dissimilarity matrix must be square")
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "ids", _ids(self.ids, U.shape[0]))

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.U, dtype=dtype)

    @property
    def n(self) -> int:
        return self.U.shape[0]

    def to_tsv(self) -> str:
        return matrix_to_tsv(self.U, self.ids)


@dataclass(frozen=True)
class GowerMatrix:
    M: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.M, dtype=dtype)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Ascending eigenvalues."""
        return np.linalg.eigvalsh(self.M)

    @property
    def min_eigenvalue(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def max_eigenvalue(self) -> float:
        return float(self.eigenvalues[-1])

    def numerical_rank(self, rtol: float = 1e-8) -> int:
        ev = self.eigenvalues
        scale = max(abs(ev[0]), abs(ev[-1]))
        if scale == 0:
            return 0
        return int(np.sum(np.abs(ev) > rtol * scale))


@dataclass(frozen=True)
class Projector:
    """Orthonormal rows spanning the null space of ``X'``."""

    L: np.ndarray
    m: int

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.L, dtype=dtype)

    @property
    def d(self) -> int:
        return self.L.shape[0]

    def sandwich(self, S: np.ndarray) -> np.ndarray:
        """``L S L'``, symmetrized."""
        out = self.L @ S @ self.L.T
        return (out + out.T) / 2


def root_unifrac(P, tree: PhyloTree | None = None, subset=None, *, lengths=None) -> DissimilarityMatrix:
    """Pairwise ``sqrt(sum_k b_k |p_ik - p_jk|)`` over ``subset`` (default all branches).

    Branch lengths come from ``tree`` or, for array-level use, from ``lengths``.
    """
    ids = P.sample_ids if isinstance(P, BranchProportions) else None
    P = np.asarray(P, dtype=float)
    if lengths is None:
        if tree is None:
            raise ValueError("need a tree or explicit branch lengths")
        lengths = tree.branch_lengths
    b = np.asarray(lengths, dtype=float)
    if P.ndim != 2 or P.shape[1] != b.shape[0]:
        raise ValueError(
            f"branch proportions have {P.shape[-1]} columns but the tree has {b.shape[0]} branches"
        )
    if subset is not None:
        subset = np.asarray(subset, dtype=int)
        if subset.size and (subset.min() < 0 or subset.max() >= b.shape[0]):
            raise ValueError("branch subset out of range")
        P = P[:, subset]
        b = b[subset]
    n = P.shape[0]
    keep = b > 0
    P, b = P[:, keep], b[keep]
    sq = np.zeros((n, n))
    for k in range(b.shape[0]):
        col = P[:, k]
        sq += b[k] * np.abs(col[:, None] - col[None, :])
    return DissimilarityMatrix(np.sqrt(sq), ids)


def gower_center(U) -> GowerMatrix:
    """``M = J D J`` with ``D = -U**2 / 2`` and ``J = I - 11'/n``."""
    U = np.asarray(U, dtype=float)
    D = -0.5 * U**2
    # double centering without forming J
    M = D - D.mean(axis=0, keepdims=True) - D.mean(axis=1, keepdims=True) + D.mean()
    return GowerMatrix((M + M.T) / 2)


def kernel_projector(X, rtol: float = 1e-10) -> Projector:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, m = X.shape
    if m >= n:
        raise RankDeficientError(f"need fewer covariates ({m}) than samples ({n})")
    U, s, _ = np.linalg.svd(X, full_matrices=True)
    rank = int(np.sum(s > rtol * max(s[0], 1e-300) * n)) if s.size else 0
    if rank < m:
        raise RankDeficientError(f"covariate matrix has rank {rank} < {m} columns")
    return Projector(np.ascontiguousarray(U[:, m:].T), m)


def project(M, L) -> np.ndarray:
    """``Z = L M L'`` symmetrized."""
    M = np.asarray(M, dtype=float)
    Lm = np.asarray(L, dtype=float)
    if Lm.shape[1] != M.shape[0] or M.shape[0] != M.shape[1]:
        raise ValueError(f"cannot project {M.shape} matrix with {Lm.shape} projector")
    Z = Lm @ M @ Lm.T
    return (Z + Z.T) / 2


def is_positive_definite(S) -> bool:
    try:
        np.linalg.cholesky(np.asarray(S))
    except np.linalg.LinAlgError:
        return False
    return True


def check_distinct_branch(P, tol: float = 1e-12) -> int | None:
    """A branch whose per-sample proportions are pairwise separated, if any.

    Separation is measured relative to ``max |p|``.
    """
    P = np.asarray(P, dtype=float)
    if P.shape[0] < 2:
        return 0 if P.shape[1] else None
    scale = np.abs(P).max()
    if scale == 0:
        return None
    gaps = np.diff(np.sort(P, axis=0), axis=0).min(axis=0)
    hits = np.flatnonzero(gaps > tol * scale)
    if hits.size == 0:
        return None
    return int(hits[0])


def warn_if_not_distinct(P, tol: float = 1e-12) -> int | None:
    k = check_distinct_branch(P, tol)
    if k is None:
        warnings.warn(
            "no branch separates all samples; positive definiteness of the "
            "projected Gower matrix is not guaranteed",
            stacklevel=2,
        )
    return k


def matrix_to_tsv(values: np.ndarray, ids: Sequence[str]) -> str:
    buf = io.StringIO()
    buf.write("\t" + "\t".join(ids) + "\n")
    for i, sid in enumerate(ids):
        buf.write(sid + "\t" + "\t".join(repr(float(v)) for v in values[i]) + "\n")
    return buf.getvalue()


def read_matrix_tsv(path: str | Path) -> DissimilarityMatrix:
    lines = [l for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]
    if not lines:
        raise ValueError(f"{path}: empty matrix file")
    ids = [c.strip() for c in lines[0].split("\t")[1:]]
    rows, row_ids = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split("\t")
        if len(cells) != len(ids) + 1:
            raise ValueError(f"{path}:{lineno}: expected {len(ids) + 1} fields")
        row_ids.append(cells[0].strip())
        try:
            rows.append([float(c) for c in cells[1:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    if row_ids != ids:
        raise ValueError(f"{path}: row ids do not match column ids")
    U = np.array(rows)
    if not np.allclose(U, U.T, atol=1e-12) or np.any(np.diag(U) != 0) or np.any(U < 0):
        raise ValueError(f"{path}: not a valid dissimilarity matrix")
    return DissimilarityMatrix(U, tuple(ids))
