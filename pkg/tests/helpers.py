"""Random instance generators shared by the test modules."""

import numpy as np

from kinfrac.abundance import RelAbundance, branch_proportions
from kinfrac.diversity import gower_center, root_unifrac
from kinfrac.phylo import parse_newick


def random_newick(rng, n_leaves):
    """Random rooted binary tree with positive branch lengths."""
    nodes = [f"L{i}:{rng.uniform(0.01, 1.0):.6f}" for i in range(n_leaves)]
    while len(nodes) > 1:
        i, j = sorted(rng.choice(len(nodes), 2, replace=False))
        b = nodes.pop(j)
        a = nodes.pop(i)
        nodes.append(f"({a},{b}):{rng.uniform(0.01, 1.0):.6f}")
    return nodes[0].rsplit(":", 1)[0] + ";"


def random_instance(rng, leaves=(3, 15), samples=(3, 25)):
    """Tree, strictly positive relative abundances and their Gower matrix."""
    tree = parse_newick(random_newick(rng, int(rng.integers(leaves[0], leaves[1] + 1))))
    n = int(rng.integers(samples[0], samples[1] + 1))
    R = len(tree.leaf_labels)
    theta = rng.dirichlet(np.ones(R), size=n)
    rel = RelAbundance([f"s{i}" for i in range(n)], tree.leaf_labels, theta)
    P = branch_proportions(rel, tree)
    U = root_unifrac(P, tree)
    return tree, rel, P, U, gower_center(U)


ACCEPTANCE: list[str] = []


def report(number: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
