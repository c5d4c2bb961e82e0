import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kinfrac.abundance import RelAbundance, to_relative
from kinfrac.sim import (
    ConfigError,
    PowerStudyConfig,
    SimConfig,
    _test_one,
    figure1_tree,
    gen_twin_abundances,
    load_study_config,
    power_study,
    sequencing_noise_study,
    study_nodes,
    subsample_depth,
)
from kinfrac.numerics import seeded_rng

FIG1_COUNTS = {"T1": (6, 4), "T2": (6, 3), "T3": (6, 1), "T4": (6, 0), "T5": (5, 0),
               "T6": (2, 0), "T7": (3, 0), "T8": (2, 0), "T9": (0, 2)}


def test_config_validation():
    cfg = SimConfig(gamma0=0.4)
    assert cfg.gamma1 == 0.2
    np.testing.assert_allclose(np.diag(cfg.cov), 2.0)
    for bad in ({"rho0": 1.0}, {"gamma0": 1.5}, {"n_mz": -1}, {"shrunk": (12,)}):
        with pytest.raises((ConfigError, ValueError)):
            SimConfig(**bad)


def test_layout_and_cohort():
    rel, c = gen_twin_abundances(SimConfig(n_mz=3, n_dz=2), seeded_rng(0))
    assert rel.theta.shape == (10, 10)
    assert c.A[0, 1] == 1 and c.A[6, 7] == 0.5 and c.A[1, 2] == 0
    assert c.C[6, 7] == 1
    np.testing.assert_array_equal(c.X, np.ones((10, 1)))


def test_gamma_zero_is_identity():
    base, _ = gen_twin_abundances(SimConfig(gamma0=0.0), seeded_rng(1))
    manual = seeded_rng(1).multivariate_normal(np.zeros(10), 2 * np.eye(10), size=200,
                                               method="cholesky")
    theta = np.exp(manual) / np.exp(manual).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(base.theta, theta, rtol=1e-12)


def test_gamma_one_geometric_mean():
    cfg = SimConfig(n_mz=4, n_dz=4, gamma0=1.0)
    before, _ = gen_twin_abundances(replace(cfg, gamma0=0.0), seeded_rng(2))
    after, _ = gen_twin_abundances(cfg, seeded_rng(2))
    t = before.theta
    cols = list(cfg.shrunk)
    for f in range(8):
        i, j = 2 * f, 2 * f + 1
        g = 1.0 if f < 4 else 0.5
        geo = np.sqrt(t[i, cols] * t[j, cols])
        raw_i, raw_j = t[i].copy(), t[j].copy()
        raw_i[cols] = geo**g * t[i, cols] ** (1 - g)
        raw_j[cols] = geo**g * t[j, cols] ** (1 - g)
        np.testing.assert_allclose(after.theta[i], raw_i / raw_i.sum(), rtol=1e-12)
        np.testing.assert_allclose(after.theta[j], raw_j / raw_j.sum(), rtol=1e-12)
        if f < 4:
            np.testing.assert_allclose(raw_i[cols], raw_j[cols], rtol=1e-12)


def test_marginal_variance_of_log_abundance():
    # var(log a_r - log a_s) = 2 sigma0^2 (1 - rho0), unaffected by normalization
    rel, _ = gen_twin_abundances(SimConfig(n_mz=2000, n_dz=0), seeded_rng(3))
    lr = np.log(rel.theta[:, 0]) - np.log(rel.theta[:, 5])
    assert np.var(lr) == pytest.approx(4.0, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 0.9), st.integers(0, 2**31))
def test_simplex_preserved(g, rho, seed):
    rel, _ = gen_twin_abundances(SimConfig(n_mz=5, n_dz=5, gamma0=g, rho0=rho), seeded_rng(seed))
    np.testing.assert_allclose(rel.theta.sum(axis=1), 1, atol=1e-12)
    assert np.all(rel.theta > 0)


def test_subsample_examples():
    rel = RelAbundance(["a"], ["x", "y", "z"], np.array([[1.0, 0.0, 0.0]]))
    t = subsample_depth(rel, 37, seeded_rng(0))
    np.testing.assert_array_equal(t.counts, [[37, 0, 0]])
    big, _ = gen_twin_abundances(SimConfig(n_mz=2, n_dz=2), seeded_rng(1))
    t = subsample_depth(big, 10**6, seeded_rng(2))
    assert np.max(np.abs(to_relative(t, 0).theta - big.theta)) < 0.005
    np.testing.assert_array_equal(t.depths, 10**6)
    np.testing.assert_array_equal(subsample_depth(big, 500, seeded_rng(3)).counts,
                                  subsample_depth(big, 500, seeded_rng(3)).counts)
    with pytest.raises(ValueError):
        subsample_depth(big, 0, seeded_rng(0))


def test_subsample_converges():
    rel, _ = gen_twin_abundances(SimConfig(n_mz=10, n_dz=10), seeded_rng(4))
    err = []
    for xi in (100, 1000, 10000, 100000):
        errs = [np.max(np.abs(to_relative(subsample_depth(rel, xi, seeded_rng(5, (xi, r))), 0).theta
                              - rel.theta)) for r in range(5)]
        err.append(np.mean(errs))
    assert np.all(np.diff(err) < 0)


def test_figure1_node_counts():
    tree = figure1_tree()
    assert len(tree.leaf_labels) == 10
    nodes = study_nodes(tree, None, [f"OTU{i}" for i in range(1, 7)])
    got = {nd.name: (nd.n_shrunk, nd.n_other) for nd in nodes}
    for k, v in FIG1_COUNTS.items():
        assert got[k] == v
    assert [nd.is_root for nd in nodes if nd.name == "T1"] == [True]


def test_study_nodes_post_order_fallback():
    from kinfrac.phylo import parse_newick
    tree = parse_newick("(((A:1,B:1):1,C:1):1,D:1);")
    nodes = study_nodes(tree)
    assert [n.name for n in nodes] == ["T1", "T2", "T3"]
    assert set(nodes[0].otus) == {"A", "B"} and nodes[-1].is_root
    with pytest.raises(ConfigError):
        study_nodes(tree, ["T9"])


def test_early_stop_gives_same_decision():
    rng = np.random.default_rng(0)
    for _ in range(200):
        h = rng.uniform()
        hp = rng.uniform(size=50)
        a = _test_one(lambda: h, lambda i: hp[i], 50, 0.05, True)
        b = _test_one(lambda: h, lambda i: hp[i], 50, 0.05, False)
        assert a["reject"] == b["reject"]
        if not a["p_is_lower_bound"]:
            assert a["p"] == b["p"]
        assert b["p"] == np.mean(hp > h)


def test_test_one_counts_failures():
    def perm(i):
        if i % 3 == 0:
            raise ValueError("bad")
        return 0.0
    r = _test_one(lambda: 0.5, perm, 9, 0.05, False)
    assert r["n_failed"] == 3 and r["n_perm_used"] == 6 and r["p"] == 0


def _small_cfg(**kw):
    base = dict(sim=SimConfig(n_mz=6, n_dz=6), gamma0=(0.5,), nodes=("T1", "T4", "T9"),
                methods=("wishart", "logit", "pc1"), n_sim=3, n_perm=5, seed=3)
    base.update(kw)
    return PowerStudyConfig(**base)


def test_power_study_small(tmp_path):
    cfg = _small_cfg()
    t = power_study(cfg, out_dir=tmp_path)
    res = t.cell(0.5, 0.0)["results"]
    assert res["T1"]["logit"]["rate"] is None and res["T1"]["logit"]["n_na"] == 3
    for node in ("T4", "T9"):
        for m in cfg.methods:
            r = res[node][m]
            assert 0 <= r["rate"] <= 1 and r["n"] == 3
            assert r["ci95"][0] <= r["rate"] <= r["ci95"][1]
    tsv = (tmp_path / "power_table.tsv").read_text()
    assert tsv.splitlines()[1].startswith("T1\t(6,4)") and "NA" in tsv
    js = json.loads((tmp_path / "power_table.json").read_text())
    assert js["n_sim"] == 3 and js["n_perm"] == 5
    again = power_study(cfg)
    assert again.to_tsv() == t.to_tsv()
    assert again.cells == t.cells


def test_power_study_resume(tmp_path, monkeypatch):
    cfg = _small_cfg(gamma0=(0.0, 0.5), methods=("wishart",), nodes=("T4",))
    first = power_study(cfg, out_dir=tmp_path)
    import kinfrac.sim as sim

    def boom(job):
        raise AssertionError("recomputed a finished cell")

    monkeypatch.setattr(sim, "_run_round", boom)
    second = power_study(cfg, out_dir=tmp_path, resume=True)
    assert second.to_tsv() == first.to_tsv()
    (tmp_path / "cells" / "gamma0.5_rho0.json").unlink()
    monkeypatch.undo()
    third = power_study(cfg, out_dir=tmp_path, resume=True)
    assert third.to_tsv() == first.to_tsv()


def test_power_study_threads_match(tmp_path):
    cfg = _small_cfg(methods=("wishart",), nodes=("T4",))
    assert power_study(cfg, threads=2).cells == power_study(cfg).cells


def test_sequencing_noise_study_shape():
    rel, c = gen_twin_abundances(SimConfig(n_mz=5, n_dz=5, gamma0=0.5), seeded_rng(0))
    out = sequencing_noise_study(rel, c, figure1_tree(), [1000, 100000], 3, seed=1)
    assert set(out["h"]) == {1000, 100000}
    assert all(len(v) == 3 for v in out["h"].values())
    assert 0 <= out["h_true"] <= 1
    again = sequencing_noise_study(rel, c, figure1_tree(), [1000, 100000], 3, seed=1)
    np.testing.assert_array_equal(again["h"][1000], out["h"][1000])


def test_load_study_config(tmp_path):
    (tmp_path / "t.nwk").write_text(figure1_tree().to_newick())
    p = tmp_path / "study.cfg"
    p.write_text("# grid\ngamma0 = 0, 0.2\nrho0 = 0\nnodes = T2, T4\n"
                 "methods = wishart, logit\nn_sim = 7\nn_perm = 11\nshrunk = 1,2,3\n"
                 "tree = t.nwk\nseed = 5\n")
    cfg = load_study_config(p)
    assert cfg.gamma0 == (0.0, 0.2) and cfg.nodes == ("T2", "T4")
    assert cfg.sim.shrunk == (0, 1, 2) and cfg.n_sim == 7 and cfg.seed == 5
    assert len(cfg.load_tree().leaf_labels) == 10
    p.write_text("nodes = all\n")
    assert load_study_config(p).nodes is None


@pytest.mark.parametrize("text", ["gamma0 = 2\n", "bogus = 1\n", "n_sim = x\n", "just words\n",
                                  "methods = wishart, lasso\n", "rho0 = 1\n"])
def test_bad_config(tmp_path, text):
    p = tmp_path / "bad.cfg"
    p.write_text(text)
    with pytest.raises(ConfigError):
        load_study_config(p)
