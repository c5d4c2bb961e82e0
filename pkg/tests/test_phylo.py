import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfrac.phylo import NewickError, branch_subset, descendant_leaves, parse_newick

from helpers import random_newick


def test_two_leaf_tree():
    t = parse_newick("(A:1,B:1);")
    assert sorted(t.leaf_labels) == ["A", "B"]
    assert t.K == 2
    np.testing.assert_array_equal(t.branch_lengths, [1.0, 1.0])


def test_three_leaf_lengths():
    t = parse_newick("((A:1,B:2):0.5,C:3);")
    assert len(t.leaf_labels) == 3 and t.K == 4
    assert sorted(t.branch_lengths) == [0.5, 1.0, 2.0, 3.0]


@pytest.mark.parametrize("text", ["(A:1,A:2);", "((A:1,B:1),C:1;", "(A:-1,B:1);",
                                  "(A:1,B:1);junk", "(A:1,B:1)"])
def test_malformed(text):
    with pytest.raises(NewickError):
        parse_newick(text)


def test_duplicate_label_message():
    with pytest.raises(NewickError, match="duplicate"):
        parse_newick("(A:1,A:2);")


def test_missing_lengths_default_to_zero_with_warning():
    t = parse_newick("((A,B),C);")
    assert np.all(t.branch_lengths == 0)
    assert t.warnings


def test_dialect_features():
    t = parse_newick("('leaf one':1e-1,(B:2.5E0,C:1)inner:0.5)root;")
    assert "leaf one" in t.leaf_labels
    assert t.find_node("inner") in t.internal_nodes
    assert sorted(t.branch_lengths) == [0.1, 0.5, 1.0, 2.5]


def test_nhx_rejected():
    with pytest.raises(NewickError):
        parse_newick("(A:1[&&NHX:S=human],B:1);")


def test_multifurcation_accepted():
    t = parse_newick("(A:1,B:1,C:1,D:1);")
    assert t.K == 4


def test_branch_subset_examples():
    t = parse_newick("((A:1,B:1):1,C:1);")
    assert len(branch_subset(t, t.leaf_labels)) == t.K
    ks = branch_subset(t, {"A"})
    assert len(ks) == 1 and descendant_leaves(t, int(ks[0])) == {"A"}
    assert branch_subset(t, set()).size == 0
    ks = branch_subset(t, {"A", "B"})
    assert {descendant_leaves(t, int(k)) for k in ks} == {
        frozenset("A"), frozenset("B"), frozenset("AB")}


def test_branch_subset_unknown_label():
    t = parse_newick("(A:1,B:1);")
    with pytest.raises(KeyError, match="Q"):
        branch_subset(t, {"Q"})


def test_descendant_leaves():
    t = parse_newick("((A:1,B:1):1,C:1);")
    leaf_a = t.leaf_index["A"]
    assert descendant_leaves(t, leaf_a) == {"A"}
    internal = [k for k in range(t.K) if k not in t.leaf_nodes]
    assert descendant_leaves(t, internal[0]) == {"A", "B"}
    with pytest.raises(IndexError):
        descendant_leaves(t, t.K)


def test_post_order_numbering():
    t = parse_newick("((A:1,B:1):1,(C:1,D:1):1);")
    for i, p in enumerate(t.parents[:-1]):
        assert p > i


trees = st.builds(lambda seed, n: parse_newick(random_newick(np.random.default_rng(seed), n)),
                  st.integers(0, 2**32 - 1), st.integers(2, 20))


@settings(max_examples=60, deadline=None)
@given(trees)
def test_children_partition_parent(t):
    for v in t.internal_nodes:
        kids = t.children[v]
        sets = [t.clade(c) for c in kids]
        assert sum(len(s) for s in sets) == len(t.clade(v))
        assert frozenset().union(*sets) == t.clade(v)


@settings(max_examples=60, deadline=None)
@given(trees, st.data())
def test_branch_subset_monotone(t, data):
    labels = t.leaf_labels
    small = set(data.draw(st.lists(st.sampled_from(labels), unique=True)))
    big = small | set(data.draw(st.lists(st.sampled_from(labels), unique=True)))
    assert set(branch_subset(t, small)) <= set(branch_subset(t, big))
    assert len(branch_subset(t, labels)) == t.K


@settings(max_examples=60, deadline=None)
@given(trees)
def test_newick_round_trip(t):
    t2 = parse_newick(t.to_newick())
    assert t2.parents == t.parents
    np.testing.assert_array_equal(t2.branch_lengths, t.branch_lengths)
    assert t2.leaf_labels == t.leaf_labels
