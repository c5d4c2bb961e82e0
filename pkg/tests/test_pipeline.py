import numpy as np
import pytest

from kinfrac.diversity import gower_center
from kinfrac.models import CohortStructure, normal_reml_fit, wishart_fit_gower
from kinfrac.numerics import seeded_rng
from kinfrac.ordination import metric_mds, pcoa
from kinfrac.pipeline import BootstrapEstimator, NormalPermFit, WishartPermFit, fit_method, trait

from helpers import random_instance


def _data(seed=0, n_fam=10):
    rng = np.random.default_rng(seed)
    c = CohortStructure.twins(n_fam // 2, n_fam - n_fam // 2)
    _, rel, _, U, G = random_instance(rng, leaves=(8, 10), samples=(c.n, c.n))
    return c, rel, U.U, G.M


def test_trait_methods():
    c, rel, U, M = _data()
    th = rel.theta[:, :3].sum(axis=1)
    np.testing.assert_allclose(trait("logit", theta_e=th), np.log(th / (1 - th)))
    np.testing.assert_allclose(trait("pc2", U=U), pcoa(M, 2).coords[:, 1])
    np.testing.assert_allclose(trait("mmds", U=U), metric_mds(U, 1).coords[:, 0])
    with pytest.raises(ValueError, match="root"):
        trait("logit", theta_e=np.ones(4))
    with pytest.raises(ValueError):
        trait("lasso", U=U)


def test_perm_fits_match_direct_fits():
    c, rel, U, M = _data(1)
    p = seeded_rng(0, 0).permutation(c.n)
    A = c.A[np.ix_(p, p)]
    w = WishartPermFit(M, c, restarts=5)
    assert w(A) == pytest.approx(wishart_fit_gower(M, c, A=A).h, abs=1e-10)
    y = trait("pc1", U=U)
    nf = NormalPermFit(y, c, restarts=5)
    assert nf(A) == pytest.approx(normal_reml_fit(y, c, A=A).h, abs=1e-10)


def test_fit_method_dispatch():
    c, rel, U, M = _data(2)
    assert fit_method("wishart", c, U=U).h == wishart_fit_gower(M, c).h
    with pytest.raises(ValueError):
        fit_method("wishart", c)


def test_bootstrap_estimator_uses_sub_block():
    c, rel, U, M = _data(3)
    fams = c.families()
    draw = [fams[0], fams[0], fams[2], fams[7], fams[7], fams[9]]
    est = BootstrapEstimator("wishart", c, U=U)
    cb, idx = c.resample(draw)
    want = wishart_fit_gower(gower_center(U[np.ix_(idx, idx)]).M, cb, restarts=1,
                             require_pd=False).h
    assert est(draw) == want
