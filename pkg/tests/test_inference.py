import numpy as np
import pytest
from scipy import stats

from kinfrac.inference import bootstrap_ci, permutation_pvalue, permutation_test
from kinfrac.models import CohortStructure, normal_reml_fit
from kinfrac.pipeline import NormalPermFit


def test_pvalue_examples():
    assert permutation_pvalue(0.25, [0.1, 0.2, 0.3]) == pytest.approx(1 / 3)
    assert permutation_pvalue(0.25, [0.1, 0.2, 0.24]) == 0
    # ties do not count
    assert permutation_pvalue(0.25, [0.25, 0.3]) == 0.5
    assert permutation_pvalue(0.25, [0.1, 0.2, 0.3], add_one=True) == pytest.approx(0.5)
    assert permutation_pvalue(0.25, [np.nan, 0.3]) == 1.0


def _twin_trait(seed, comps=(1.0, 0.2, 0.5), n_mz=15, n_dz=15):
    rng = np.random.default_rng(seed)
    c = CohortStructure.twins(n_mz, n_dz)
    S = comps[0] * c.A + comps[1] * c.C + comps[2] * np.eye(c.n)
    return c, rng.multivariate_normal(np.zeros(c.n), S, method="cholesky")


def test_identity_permutation_reproduces_h():
    c, y = _twin_trait(0)
    fit = NormalPermFit(y, c)
    res = permutation_test(fit, c.A, 0, 0, permutations=[np.arange(c.n)])
    assert res.h_perm[0] == res.h_hat
    assert res.p_value == 0


def test_permutation_matches_manual_loop():
    c, y = _twin_trait(1)
    fit = NormalPermFit(y, c)
    res = permutation_test(fit, c.A, 8, seed=3)
    from kinfrac.numerics import seeded_rng
    manual = []
    for i in range(8):
        p = seeded_rng(3, i).permutation(c.n)
        manual.append(normal_reml_fit(y, c, A=c.A[np.ix_(p, p)], restarts=1).h)
    np.testing.assert_allclose(res.h_perm, manual, atol=1e-12)
    assert res.p_value == np.mean(np.array(manual) > res.h_hat)


def test_permutation_reproducible_and_thread_independent():
    c, y = _twin_trait(2)
    fit = NormalPermFit(y, c)
    a = permutation_test(fit, c.A, 6, seed=9)
    b = permutation_test(fit, c.A, 6, seed=9, threads=2)
    np.testing.assert_array_equal(a.h_perm, b.h_perm)
    assert a.p_value == b.p_value


def test_permutation_relabeling_invariance():
    c, y = _twin_trait(3)
    rng = np.random.default_rng(0)
    perms = [rng.permutation(c.n) for _ in range(6)]
    sigma = rng.permutation(c.n)
    inv = np.argsort(sigma)
    c2 = CohortStructure(tuple(np.array(c.sample_ids)[sigma]), tuple(np.array(c.family_ids)[sigma]),
                         c.zygosity, c.X[sigma], c.A[np.ix_(sigma, sigma)],
                         c.C[np.ix_(sigma, sigma)])
    perms2 = [inv[p[sigma]] for p in perms]
    a = permutation_test(NormalPermFit(y, c), c.A, 0, 0, permutations=perms)
    b = permutation_test(NormalPermFit(y[sigma], c2), c2.A, 0, 0, permutations=perms2)
    np.testing.assert_allclose(a.h_perm, b.h_perm, atol=1e-7)
    assert a.p_value == b.p_value


def test_failed_rounds_are_excluded_with_warning():
    calls = {"n": 0}

    def fit(A):
        calls["n"] += 1
        if calls["n"] % 2 == 0:
            raise RuntimeError("boom")
        return 0.1 * (calls["n"] % 3)

    with pytest.warns(UserWarning, match="failed"):
        res = permutation_test(fit, np.eye(4), 6, seed=0)
    assert res.n_failed == 3
    assert 0 <= res.p_value <= 1


def test_permute_c_flag():
    seen = []

    def fit(A, C):
        seen.append(C.copy())
        return 0.0

    C = np.kron(np.eye(2), np.ones((2, 2)))
    permutation_test(fit, np.eye(4), 3, seed=1, C=C, permute_c=True)
    assert any(not np.array_equal(s, C) for s in seen[1:])
    with pytest.raises(ValueError):
        permutation_test(fit, np.eye(4), 3, seed=1, permute_c=True)


class _Estimator:
    def __init__(self, c, y):
        self.c, self.y = c, y

    def __call__(self, families):
        cb, idx = self.c.resample(families)
        return normal_reml_fit(self.y[idx], cb, restarts=1).h


_estimator = _Estimator


def test_bootstrap_formula_and_reproducibility():
    c, y = _twin_trait(4)
    est = _estimator(c, y)
    a = bootstrap_ci(est, c.families(), 20, alpha=0.05, seed=5)
    b = bootstrap_ci(est, c.families(), 20, alpha=0.05, seed=5, threads=2)
    np.testing.assert_array_equal(a.h_boot, b.h_boot)
    se = np.std(a.h_boot, ddof=1)
    assert a.se == pytest.approx(se, rel=1e-14)
    z = stats.norm.ppf(0.975)
    assert z == pytest.approx(1.959964, abs=1e-6)
    assert a.ci[0] == pytest.approx(a.h_hat - z * se, rel=1e-14)
    assert a.ci[1] == pytest.approx(a.h_hat + z * se, rel=1e-14)
    assert a.ci[0] <= a.ci[1]


def test_bootstrap_identical_families_degenerate():
    families = [np.array([0, 1])] * 5
    with pytest.warns(UserWarning, match="degenerate"):
        res = bootstrap_ci(lambda fams: 0.4, families, 10, seed=0)
    assert res.se == 0 and res.ci == (0.4, 0.4)


def test_bootstrap_clips_low_h():
    c, y = _twin_trait(6, comps=(0.0, 0.5, 1.0))
    res = bootstrap_ci(_estimator(c, y), c.families(), 30, seed=2)
    assert res.ci[0] < 0
    assert res.clipped and res.ci_clipped[0] == 0.0
    assert res.ci_clipped[1] == min(1.0, res.ci[1])


def test_bootstrap_retries_then_fails():
    state = {"n": 0}

    def est(fams):
        state["n"] += 1
        if state["n"] == 1:
            return 0.3
        if len({id(f) for f in fams}) < len(fams):
            raise RuntimeError("duplicate family")
        return 0.3 + 0.01 * state["n"]

    fams = [np.array([i]) for i in range(6)]
    res = bootstrap_ci(est, fams, 4, seed=0, max_retries=2)
    assert res.n_failed == 4 and np.all(np.isnan(res.h_boot))


def test_bootstrap_input_checks():
    with pytest.raises(ValueError):
        bootstrap_ci(lambda f: 0.1, [np.array([0])], 5)
    with pytest.raises(ValueError):
        bootstrap_ci(lambda f: 0.1, [np.array([0]), np.array([1])], 5, alpha=1.5)
