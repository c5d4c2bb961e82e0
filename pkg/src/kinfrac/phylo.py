"""Rooted phylogenetic trees: Newick parsing and branch bookkeeping.

Nodes are numbered in post-order, so every child has a smaller index than its
parent and the root is the last node. Branch ``k`` is the edge joining node
``k`` to its parent; the branch ids are therefore ``0 .. K-1`` with
``K = n_nodes - 1``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "NewickError",
    "PhyloTree",
    "parse_newick",
    "read_newick",
    "branch_subset",
    "descendant_leaves",
]


class NewickError(ValueError):
    """Malformed Newick input or a tree violating the structural invariants."""


@dataclass(frozen=True)
class PhyloTree:
    parents: tuple[int, ...]
    lengths: np.ndarray
    labels: tuple[str | None, ...]
    warnings: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        n = len(self.parents)
        if n == 0:
            raise NewickError("empty tree")
        roots = [i for i, p in enumerate(self.parents) if p < 0]
        if roots != [n - 1]:
            raise NewickError("tree must have exactly one root, stored last")
        for i, p in enumerate(self.parents[:-1]):
            if not i < p < n:
                raise NewickError(f"node {i} has invalid parent {p}")
        lengths = np.asarray(self.lengths, dtype=float)
        if lengths.shape != (n,):
            raise NewickError("one branch length per node required")
        if np.any(lengths[:-1] < 0) or not np.all(np.isfinite(lengths[:-1])):
            raise NewickError("branch lengths must be finite and non-negative")
        lengths.setflags(write=False)
        object.__setattr__(self, "lengths", lengths)
        seen = set()
        for i in self.leaf_nodes:
            lab = self.labels[i]
            if not lab:
                raise NewickError(f"leaf node {i} has no label")
            if lab in seen:
                raise NewickError(f"duplicate leaf label {lab!r}")
            seen.add(lab)

    @property
    def n_nodes(self) -> int:
        return len(self.parents)

    @property
    def root(self) -> int:
        return self.n_nodes - 1

    @property
    def K(self) -> int:
        """Number of branches."""
        return self.n_nodes - 1

    @property
    def branch_lengths(self) -> np.ndarray:
        """Lengths ``b_k`` indexed by branch id."""
        return self.lengths[:-1]

    @cached_property
    def children(self) -> tuple[tuple[int, ...], ...]:
        kids: list[list[int]] = [[] for _ in range(self.n_nodes)]
        for i, p in enumerate(self.parents):
            if p >= 0:
                kids[p].append(i)
        return tuple(tuple(k) for k in kids)

    @cached_property
    def leaf_nodes(self) -> tuple[int, ...]:
        kids = [0] * self.n_nodes
        for p in self.parents:
            if p >= 0:
                kids[p] += 1
        return tuple(i for i in range(self.n_nodes) if kids[i] == 0)

    @cached_property
    def internal_nodes(self) -> tuple[int, ...]:
        leaves = set(self.leaf_nodes)
        return tuple(i for i in range(self.n_nodes) if i not in leaves)

    @cached_property
    def leaf_index(self) -> dict[str, int]:
        """Leaf label -> node id."""
        return {self.labels[i]: i for i in self.leaf_nodes}

    @property
    def leaf_labels(self) -> list[str]:
        """Leaf labels in left-to-right (Newick) order."""
        return [self.labels[i] for i in self.leaf_nodes]

    def node_name(self, node: int) -> str:
        lab = self.labels[node]
        return lab if lab else f"node{node}"

    @cached_property
    def clade_matrix(self) -> np.ndarray:
        """Boolean ``n_nodes x n_leaves``; row ``v`` marks the leaves under ``v``.

        Columns follow :attr:`leaf_labels`.
        """
        col = {node: j for j, node in enumerate(self.leaf_nodes)}
        out = np.zeros((self.n_nodes, len(col)), dtype=bool)
        for v in range(self.n_nodes):
            if v in col:
                out[v, col[v]] = True
            p = self.parents[v]
            if p >= 0:
                out[p] |= out[v]
        out.setflags(write=False)
        return out

    def clade(self, node: int) -> frozenset[str]:
        leaves = self.leaf_labels
        return frozenset(leaves[j] for j in np.flatnonzero(self.clade_matrix[node]))

    def find_node(self, name: str) -> int:
        """Node id for a label (leaf or internal) or a synthetic ``node<i>`` name."""
        for i, lab in enumerate(self.labels):
            if lab == name:
                return i
        m = re.fullmatch(r"node(\d+)", name)
        if m and int(m.group(1)) < self.n_nodes:
            return int(m.group(1))
        raise KeyError(f"no node named {name!r}")

    def to_newick(self) -> str:
        def fmt_label(lab: str | None) -> str:
            if not lab:
                return ""
            if re.search(r"[\s(),:;\[\]']", lab):
                return "'" + lab.replace("'", "''") + "'"
            return lab

        def rec(v: int) -> str:
            kids = self.children[v]
            s = "(" + ",".join(rec(c) for c in kids) + ")" if kids else ""
            s += fmt_label(self.labels[v])
            if v != self.root:
                s += ":" + repr(float(self.lengths[v]))
            return s

        return rec(self.root) + ";"


# --- parsing -----------------------------------------------------------------

_NUMBER = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")


class _Tokens:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip(self):
        t = self.text
        while self.pos < len(t):
            c = t[self.pos]
            if c.isspace():
                self.pos += 1
            elif c == "[":
                end = t.find("]", self.pos)
                if end < 0:
                    raise NewickError(f"unterminated comment at offset {self.pos}")
                if t.startswith("[&&NHX", self.pos):
                    raise NewickError("NHX extensions are not supported")
                self.pos = end + 1
            else:
                break

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def take(self, ch: str):
        if self.peek() != ch:
            got = self.peek() or "end of input"
            raise NewickError(f"expected {ch!r} at offset {self.pos}, got {got!r}")
        self.pos += 1

    def label(self) -> str | None:
        self.skip()
        t = self.text
        if self.pos < len(t) and t[self.pos] == "'":
            out = []
            i = self.pos + 1
            while True:
                j = t.find("'", i)
                if j < 0:
                    raise NewickError(f"unterminated quoted label at offset {self.pos}")
                out.append(t[i:j])
                if t.startswith("''", j):
                    out.append("'")
                    i = j + 2
                else:
                    self.pos = j + 1
                    return "".join(out)
        start = self.pos
        while self.pos < len(t) and t[self.pos] not in "(),:;[" and not t[self.pos].isspace():
            self.pos += 1
        lab = t[start:self.pos]
        return lab or None

    def length(self) -> float:
        self.skip()
        m = _NUMBER.match(self.text, self.pos)
        if not m:
            raise NewickError(f"invalid branch length at offset {self.pos}")
        self.pos = m.end()
        return float(m.group(0))


def parse_newick(text: str) -> PhyloTree:
    """Parse a single Newick tree terminated by ``;``.

    Quoted labels, internal labels, bracket comments and scientific-notation
    lengths are accepted. Missing branch lengths become 0 and are listed in
    ``tree.warnings``.
    """
    tok = _Tokens(text)
    parents: list[int] = []
    lengths: list[float] = []
    labels: list[str | None] = []
    missing: list[str] = []

    # Iterative post-order construction; each frame collects child node ids.
    def new_node(children: list[int]) -> int:
        idx = len(parents)
        parents.append(-1)
        lengths.append(0.0)
        labels.append(None)
        for c in children:
            parents[c] = idx
        return idx

    def finish(idx: int, is_root: bool):
        labels[idx] = tok.label()
        if tok.peek() == ":":
            tok.pos += 1
            val = tok.length()
            if val < 0:
                raise NewickError(f"negative branch length {val} at node {labels[idx] or idx}")
            lengths[idx] = val
        elif not is_root:
            missing.append(labels[idx] or f"node{idx}")

    stack: list[list[int]] = []
    depth_open = 0
    if tok.peek() != "(":
        # single-leaf tree
        idx = new_node([])
        finish(idx, True)
    else:
        while True:
            c = tok.peek()
            if c == "(":
                tok.pos += 1
                depth_open += 1
                stack.append([])
                continue
            if c == "":
                raise NewickError("unbalanced parentheses: unexpected end of input")
            if c in ",)":
                raise NewickError(f"empty subtree at offset {tok.pos}")
            # a leaf
            leaf = new_node([])
            finish(leaf, False)
            stack[-1].append(leaf)
            while True:
                c = tok.peek()
                if c == ",":
                    tok.pos += 1
                    break
                if c == ")":
                    tok.pos += 1
                    depth_open -= 1
                    kids = stack.pop()
                    node = new_node(kids)
                    finish(node, not stack)
                    if not stack:
                        break
                    stack[-1].append(node)
                    continue
                raise NewickError(
                    f"unbalanced parentheses or stray text at offset {tok.pos}"
                )
            if not stack:
                break
    tok.take(";")
    tok.skip()
    if tok.pos != len(text):
        raise NewickError(f"trailing text after ';' at offset {tok.pos}")

    root = len(parents) - 1
    if lengths[root]:
        lengths[root] = 0.0
    warns = tuple(f"missing branch length set to 0: {m}" for m in missing)
    return PhyloTree(tuple(parents), np.array(lengths), tuple(labels), warns)


def read_newick(path: str | Path) -> PhyloTree:
    return parse_newick(Path(path).read_text(encoding="utf-8"))


def descendant_leaves(tree: PhyloTree, branch: int) -> frozenset[str]:
    if not 0 <= branch < tree.K:
        raise IndexError(f"branch id {branch} out of range 0..{tree.K - 1}")
    return tree.clade(branch)


def branch_subset(tree: PhyloTree, otus: Iterable[str]) -> np.ndarray:
    """Branches whose every descendant leaf lies in ``otus``, as sorted ids."""
    otus = set(otus)
    unknown = otus - set(tree.leaf_index)
    if unknown:
        raise KeyError(f"unknown leaf label(s): {', '.join(sorted(unknown))}")
    member = np.array([lab in otus for lab in tree.leaf_labels], dtype=bool)
    clades = tree.clade_matrix[: tree.K]
    inside = ~np.any(clades & ~member, axis=1)
    return np.flatnonzero(inside)
