import numpy as np
import pytest
from scipy import stats

from riaftbart.data import SurvivalDataset, fit_centering
from riaftbart.random_effects import (RandomEffectsState, alpha_conditional, b_conditional, draw_all_b, draw_alpha,
                                      draw_b, draw_tau2, init_random_effects, tau2_conditional)

N_DRAWS = 50_000


def test_b_zero_sum():
    m, v = b_conditional(0.0, 5, 1.0, 2.0, 1.0)
    assert m == 0.0 and abs(v - 2 / 11) < 1e-15


def test_b_flat_limit():
    r = np.array([0.3, 1.2, -0.4, 2.0])
    m, _ = b_conditional(r.sum(), r.size, 1.0, 1e12, 1.0)
    assert abs(m - r.mean()) / abs(r.mean()) < 1e-6


def test_b_moment_oracle():
    rng = np.random.default_rng(0)
    st = RandomEffectsState(np.zeros(1), alpha=1.0, tau2=2.0)
    r = np.full(5, 2.0)  # sum 10
    d = np.array([draw_b(r, st, 1.0, rng) for _ in range(N_DRAWS)])
    assert abs(d.mean() - 20 / 11) / (20 / 11) < 0.02
    assert abs(d.var() - 2 / 11) / (2 / 11) < 0.02


def test_draw_all_b_matches_scalar_conditional():
    rng = np.random.default_rng(1)
    cl = np.repeat([0, 1, 2], [4, 6, 10])
    resid = rng.normal(size=20)
    nk = np.bincount(cl)
    st = RandomEffectsState(np.zeros(3), alpha=0.5, tau2=3.0)
    d = np.array([draw_all_b(resid, cl, nk, st, 0.7, rng) for _ in range(20_000)])
    for k in range(3):
        m, v = b_conditional(resid[cl == k].sum(), nk[k], 0.7, 3.0, 0.5)
        assert abs(d[:, k].mean() - m) < 4 * np.sqrt(v / 20_000)
        assert abs(d[:, k].var() - v) / v < 0.05


def test_alpha_zero_b_reduced_form():
    st = RandomEffectsState(np.zeros(4), 1.0, 1.0)
    assert alpha_conditional(st, "reduced") == (1.0, 1.0)
    assert alpha_conditional(st, "exact") == (3.0, 1.0)


def test_alpha_median_oracle():
    rng = np.random.default_rng(2)
    st = RandomEffectsState(np.array([1.0, 1.0]), 1.0, 1.0)  # sum b^2 = 2 -> IG(1, 2)
    d = np.array([draw_alpha(st, rng, "reduced") for _ in range(N_DRAWS)])
    med = stats.invgamma(1, scale=2).median()
    assert abs(np.median(d) - med) / med < 0.02
    assert np.all(d > 0)
    d = np.array([draw_alpha(st, rng, "exact") for _ in range(N_DRAWS)])
    med = stats.invgamma(2, scale=2).median()  # K = 2 adds K/2 to the shape
    assert abs(np.median(d) - med) / med < 0.02


def test_tau2_zero_b():
    st = RandomEffectsState(np.zeros(6), alpha=7.0, tau2=1.0)
    assert tau2_conditional(st) == (4.0, 1.0)


def test_tau2_moment_oracle():
    rng = np.random.default_rng(3)
    b = np.sqrt(np.array([1.5, 1.5, 1.5, 1.5]))  # sum b^2 = 6
    st = RandomEffectsState(b, alpha=3.0, tau2=1.0)
    assert tau2_conditional(st) == pytest.approx((3.0, 2.0))
    d = np.array([draw_tau2(st, rng) for _ in range(N_DRAWS)])
    assert abs(d.mean() - 1.0) < 0.02
    assert np.all(d > 0)


def test_expanded_gibbs_preserves_prior():
    # With no data the (b, tau2, alpha) Gibbs cycle must leave the joint prior invariant.
    rng = np.random.default_rng(4)
    K = 5
    st = RandomEffectsState(np.zeros(K), 1.0, 1.0)
    cl, nk = np.zeros(0, int), np.zeros(K)
    keep = []
    for s in range(60_000):
        st.b = draw_all_b(np.zeros(0), cl, nk, st, 1.0, rng)
        st.tau2 = draw_tau2(st, rng)
        st.alpha = draw_alpha(st, rng, "exact")
        if s >= 1000 and s % 20 == 0:
            keep.append((st.alpha, st.tau2))
    keep = np.array(keep)
    ig = stats.invgamma(1, scale=1)
    assert stats.kstest(keep[:, 0], ig.cdf).pvalue > 0.01
    assert stats.kstest(keep[:, 1], ig.cdf).pvalue > 0.01


def _dataset(resid_by_cluster, mu=0.0):
    logt = np.concatenate(resid_by_cluster) + mu
    cl = np.concatenate([np.full(len(r), k + 1) for k, r in enumerate(resid_by_cluster)])
    n = logt.size
    return SurvivalDataset(np.zeros((n, 0)), np.resize([1, 2], n), np.exp(logt), np.ones(n, int), cl)


def test_init_two_clusters():
    d = _dataset([[-1.5, -0.5], [0.5, 1.5]])
    st, s0 = init_random_effects(d, fit_centering(d))
    np.testing.assert_allclose(st.b, [-1.0, 1.0], atol=1e-12)
    assert abs(st.tau2 - 1.0) < 1e-12 and st.alpha == 1.0
    assert abs(s0 - np.std([-1.5, -0.5, 0.5, 1.5])) < 1e-12


def test_init_single_cluster_zero():
    d = _dataset([[-1.0, 1.0, -1.0, 1.0]], mu=3.0)
    st, _ = init_random_effects(d, fit_centering(d))
    assert abs(st.b[0]) < 1e-12
    assert st.tau2 == 1e-4  # floor


def test_init_centred_shift_signs():
    rng = np.random.default_rng(6)
    hits = 0
    for _ in range(100):
        shift = rng.permutation([-0.5, -0.5, 0.5, 0.5])
        cl = np.repeat(np.arange(1, 5), 20)
        logt = 1 + shift[cl - 1] + 0.3 * rng.normal(size=80)
        d = SurvivalDataset(np.zeros((80, 0)), np.resize([1, 2], 80), np.exp(logt), np.ones(80, int), cl)
        st, _ = init_random_effects(d, fit_centering(d))
        hits += np.all(np.sign(st.b) == np.sign(shift))
    assert hits >= 90


def test_rank_deficient_design_drops_columns():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(40, 1))
    X = np.column_stack([x, 2 * x, np.ones(40)])
    cl = np.repeat([1, 2], 20)
    logt = 1 + x[:, 0] + 0.1 * rng.normal(size=40)
    d = SurvivalDataset(X, np.resize([1, 2], 40), np.exp(logt), np.ones(40, int), cl)
    _, s0 = init_random_effects(d, fit_centering(d), design=X)
    assert s0 < 0.2  # the slope is still fitted


def test_state_rejects_nonpositive():
    with pytest.raises(ValueError):
        RandomEffectsState(np.zeros(2), alpha=0.0)
