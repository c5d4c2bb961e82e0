"""OTU count tables, relative abundances and per-branch abundance mass."""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .phylo import PhyloTree

__all__ = [
    "TableError",
    "OtuTable",
    "RelAbundance",
    "BranchProportions",
    "load_otu_table",
    "to_relative",
    "branch_proportions",
    "filter_prevalence",
]


class TableError(ValueError):
    pass


def _check_unique(ids: Sequence[str], what: str):
    seen = set()
    for i in ids:
        if i in seen:
            raise TableError(f"duplicate {what} id {i!r}")
        seen.add(i)


@dataclass(frozen=True)
class OtuTable:
    """Counts in sample-major order (``n x R``)."""

    sample_ids: tuple[str, ...]
    otu_ids: tuple[str, ...]
    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.shape != (len(self.sample_ids), len(self.otu_ids)):
            raise TableError(f"counts shape {counts.shape} does not match ids")
        if not np.issubdtype(counts.dtype, np.integer):
            raise TableError("counts must be integers")
        if np.any(counts < 0):
            raise TableError("negative count")
        _check_unique(self.sample_ids, "sample")
        _check_unique(self.otu_ids, "OTU")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "otu_ids", tuple(self.otu_ids))
        object.__setattr__(self, "counts", counts.astype(np.int64, copy=False))

    @property
    def depths(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def to_tsv(self) -> str:
        buf = io.StringIO()
        buf.write("#OTU ID\t" + "\t".join(self.sample_ids) + "\n")
        for j, otu in enumerate(self.otu_ids):
            buf.write(otu + "\t" + "\t".join(str(int(c)) for c in self.counts[:, j]) + "\n")
        return buf.getvalue()


@dataclass(frozen=True)
class RelAbundance:
    sample_ids: tuple[str, ...]
    otu_ids: tuple[str, ...]
    theta: np.ndarray

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.shape != (len(self.sample_ids), len(self.otu_ids)):
            raise TableError("theta shape does not match ids")
        if np.any(theta < 0) or np.any(theta > 1):
            raise TableError("relative abundances must lie in [0, 1]")
        if not np.allclose(theta.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise TableError("relative abundance rows must sum to 1")
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "otu_ids", tuple(self.otu_ids))
        object.__setattr__(self, "theta", theta)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.theta, dtype=dtype)

    def node_abundance(self, otus) -> np.ndarray:
        """Per-sample total abundance of the given OTUs."""
        otus = set(otus)
        cols = [j for j, o in enumerate(self.otu_ids) if o in otus]
        return self.theta[:, cols].sum(axis=1)


@dataclass(frozen=True)
class BranchProportions:
    """``P[i, k]``: abundance of sample ``i`` under branch ``k``."""

    sample_ids: tuple[str, ...]
    P: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.P, dtype=dtype)

    @property
    def K(self) -> int:
        return self.P.shape[1]


def load_otu_table(source) -> OtuTable:
    """Read a tab-separated table with OTUs as rows and samples as columns.

    ``source`` may be a path, a file object or the table text itself. Lines
    starting with ``#`` are comments, except a ``#OTU ID`` line which is the
    header (classic QIIME layout).
    """
    if hasattr(source, "read"):
        text = source.read()
    elif isinstance(source, Path) or (isinstance(source, str) and "\n" not in source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = source

    header = None
    otu_ids: list[str] = []
    rows: list[list[int]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#") and not (header is None and line.startswith("#OTU ID")):
            continue
        cells = line.split("\t")
        if header is None:
            header = [c.strip() for c in cells[1:]]
            if not header:
                raise TableError(f"line {lineno}: header has no sample columns")
            _check_unique(header, "sample")
            continue
        if len(cells) != len(header) + 1:
            raise TableError(
                f"line {lineno}: expected {len(header) + 1} fields, got {len(cells)}"
            )
        vals = []
        for c in cells[1:]:
            c = c.strip()
            try:
                v = int(c)
            except ValueError:
                try:
                    f = float(c)
                except ValueError:
                    raise TableError(f"line {lineno}: non-integer count {c!r}") from None
                if not f.is_integer():
                    raise TableError(f"line {lineno}: non-integer count {c!r}")
                v = int(f)
            if v < 0:
                raise TableError(f"line {lineno}: negative count {c!r}")
            vals.append(v)
        otu_ids.append(cells[0].strip())
        rows.append(vals)
    if header is None:
        raise TableError("empty OTU table")
    counts = np.array(rows, dtype=np.int64).reshape(len(rows), len(header)).T
    return OtuTable(tuple(header), tuple(otu_ids), counts)


def to_relative(table: OtuTable, pseudo: float = 1.0) -> RelAbundance:
    """``theta[i, r] = (x[i, r] + pseudo) / (N_i + R * pseudo)``."""
    if pseudo < 0:
        raise ValueError("pseudo count must be non-negative")
    x = table.counts.astype(float) + pseudo
    tot = x.sum(axis=1, keepdims=True)
    bad = np.flatnonzero(tot[:, 0] <= 0)
    if bad.size:
        raise TableError(
            f"sample {table.sample_ids[bad[0]]!r} has no reads; use a positive pseudo count"
        )
    theta = x / tot
    return RelAbundance(table.sample_ids, table.otu_ids, theta)


def branch_proportions(rel: RelAbundance, tree: PhyloTree) -> BranchProportions:
    """Sum relative abundance over the leaves below each branch.

    Tree leaves missing from the table count as zero abundance.
    """
    leaf_col = {lab: j for j, lab in enumerate(tree.leaf_labels)}
    missing = [o for o in rel.otu_ids if o not in leaf_col]
    if missing:
        raise TableError(f"OTU(s) absent from tree: {', '.join(missing[:5])}")
    theta_leaf = np.zeros((len(rel.sample_ids), len(leaf_col)))
    theta_leaf[:, [leaf_col[o] for o in rel.otu_ids]] = rel.theta
    P = theta_leaf @ tree.clade_matrix[: tree.K].T.astype(float)
    np.clip(P, 0.0, 1.0, out=P)
    return BranchProportions(rel.sample_ids, P)


def filter_prevalence(table: OtuTable, min_fraction: float) -> OtuTable:
    """Keep OTUs observed (count > 0) in at least ``min_fraction`` of samples."""
    keep = (table.counts > 0).mean(axis=0) >= min_fraction
    return OtuTable(
        table.sample_ids,
        tuple(o for o, k in zip(table.otu_ids, keep) if k),
        table.counts[:, keep],
    )
