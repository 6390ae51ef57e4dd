import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from riaftbart import effects
from riaftbart.exceptions import DataError
from riaftbart.sampler import PosteriorStore


def make_store(f_cf, b=None, sigma2=None, a=None, cluster=None, labels=None):
    f_cf = np.asarray(f_cf, dtype=float)
    D, J, N = f_cf.shape
    cluster = np.ones(N, int) if cluster is None else np.asarray(cluster)
    K = int(cluster.max())
    return PosteriorStore(
        f_cf=f_cf, b=np.zeros((D, K)) if b is None else np.asarray(b, float),
        sigma2=np.ones(D) if sigma2 is None else np.asarray(sigma2, float), tau2=np.ones(D), alpha=np.ones(D),
        chain=np.zeros(D, int), a=np.resize(np.arange(1, J + 1), N) if a is None else np.asarray(a), cluster=cluster,
        trt_labels=labels or tuple(str(j) for j in range(1, J + 1)), cluster_labels=tuple(str(k) for k in range(1, K + 1)),
        mu_aft=0.0, sigma_aft=1.0,
    )


@pytest.fixture
def random_store():
    rng = np.random.default_rng(0)
    return make_store(rng.normal(size=(40, 3, 25)), b=rng.normal(size=(40, 2)), sigma2=rng.uniform(0.5, 2, 40),
                      cluster=np.resize([1, 2], 25))


def test_identity_pair_zero(random_store):
    e = effects.cate(random_store, "2", "2")
    assert e.estimate == 0 and e.lower == 0 and e.upper == 0


def test_treatment_blind_ensemble_zero():
    f = np.random.default_rng(1).normal(size=(10, 1, 15))
    e = effects.cate(make_store(np.repeat(f, 3, axis=1)), "1", "3")
    assert e.estimate == 0.0 and np.all(e.draws == 0)


def test_antisymmetry_and_transitivity(random_store):
    e12, e21 = effects.cate(random_store, "1", "2"), effects.cate(random_store, "2", "1")
    np.testing.assert_array_equal(e12.draws, -e21.draws)
    e23, e13 = effects.cate(random_store, "2", "3"), effects.cate(random_store, "1", "3")
    np.testing.assert_allclose(e12.draws + e23.draws, e13.draws, atol=1e-12)


def test_catt_equals_cate_when_all_on_reference():
    f = np.random.default_rng(2).normal(size=(10, 2, 12))
    s = make_store(f, a=np.ones(12, int))
    np.testing.assert_allclose(effects.catt(s, "1", "2").draws, effects.cate(s, "1", "2").draws, rtol=0, atol=1e-13)
    assert effects.catt(s, "1", "1").estimate == 0
    with pytest.raises(DataError):
        effects.catt(s, "2", "1")


def test_catt_brute_force():
    # effect 1 + x, with x larger on arm 1: catt > cate, both equal the potential-outcome averages
    rng = np.random.default_rng(3)
    n = 400
    a = np.resize([1, 2], n)
    x = rng.normal(size=n) + (a == 1)
    f = np.stack([1 + x, np.zeros(n)])[None]
    s = make_store(np.repeat(f, 4, axis=0), a=a)
    assert abs(effects.cate(s, "1", "2").estimate - np.mean(1 + x)) < 1e-12
    assert abs(effects.catt(s, "1", "2").estimate - np.mean(1 + x[a == 1])) < 1e-12
    assert effects.catt(s, "1", "2").estimate > effects.cate(s, "1", "2").estimate + 0.3


def test_interval_ordering(random_store):
    e = effects.cate(random_store, "1", "3", level=0.9)
    assert e.lower <= e.estimate <= e.upper
    assert e.row()["pair"] == "1:3"


def test_survival_at_zero_and_median():
    s = make_store(np.zeros((3, 2, 5)))
    c = effects.counterfactual_survival(s, "1", [0.0, 1e-300, 1.0])
    np.testing.assert_array_equal(c.values[:, 0], 1.0)
    np.testing.assert_allclose(c.values[:, 1], 1.0)
    np.testing.assert_array_equal(c.values[:, 2], 0.5)
    with pytest.raises(ValueError):
        effects.counterfactual_survival(s, "1", [-1.0, 1.0])


def test_lognormal_curve_oracle():
    f = np.full((4, 2, 6), 0.7)
    b = np.full((4, 1), -0.2)
    s = make_store(f, b=b, sigma2=np.full(4, 0.36))
    grid = np.linspace(0.01, 10, 200)
    c = effects.counterfactual_survival(s, "2", grid)
    ref = 1 - stats.norm.cdf((np.log(grid) - 0.5) / 0.6)
    np.testing.assert_allclose(c.values, np.broadcast_to(ref, c.values.shape), atol=1e-12, rtol=0)


def test_curves_monotone(random_store):
    c = effects.counterfactual_survival(random_store, "3", effects.time_grid(20, 300))
    assert np.all(np.diff(c.values, axis=1) <= 0)
    assert np.all(c.values[:, 0] == 1)


def test_rmst_constant_curves():
    g = effects.time_grid(5.0, 11)
    assert np.all(effects.rmst(effects.SurvivalCurve("1", g, np.ones((2, 11))), 5.0) == 5.0)
    vals = []
    for n in (11, 101, 1001):
        g = effects.time_grid(5.0, n)
        v = np.zeros((1, n))
        v[0, 0] = 1.0
        vals.append(effects.rmst(effects.SurvivalCurve("1", g, v), 5.0)[0])
    assert vals[0] > vals[1] > vals[2] and vals[2] < 1e-2


def test_rmst_fine_quadrature_oracle():
    s = make_store(np.zeros((1, 1, 1)))
    grid = np.arange(0, 5.0005, 0.001)
    r = effects.rmst(effects.counterfactual_survival(s, "1", grid), 5.0)[0]
    oracle, _ = integrate.quad(lambda t: stats.norm.sf(np.log(t)) if t > 0 else 1.0, 0, 5, limit=200)
    assert abs(r - oracle) / oracle < 1e-3
    assert abs(effects.rmst_lognormal(0.0, 1.0, 5.0) - oracle) < 1e-9


def test_rmst_needs_covering_grid():
    with pytest.raises(ValueError):
        effects.rmst(effects.SurvivalCurve("1", np.linspace(0, 2, 5), np.ones((1, 5))), 3.0)


def test_rmst_closes_partial_panel():
    g = np.linspace(0, 4, 5)
    r = effects.rmst(effects.SurvivalCurve("1", g, np.ones((1, 5))), 2.5)
    assert abs(r[0] - 2.5) < 1e-14


def test_rmst_methods_agree(random_store):
    t = effects.rmst_effect(random_store, "1", "2", 8.0, grid_size=4096)
    e = effects.rmst_effect(random_store, "1", "2", 8.0, method="exact")
    np.testing.assert_allclose(t.draws, e.draws, atol=2e-3)


def test_rmst_within_horizon(random_store):
    c = effects.counterfactual_survival(random_store, "1", effects.time_grid(6.0, 512))
    r = effects.rmst(c, 6.0)
    assert np.all((r >= 0) & (r <= 6.0))


def test_survival_effect_bounds(random_store):
    e = effects.survival_prob_effect(random_store, "1", "3", 2.0)
    assert np.all(np.abs(e.draws) <= 1)
    assert effects.survival_prob_effect(random_store, "2", "2", 2.0).estimate == 0


def test_estimate_dispatch(random_store):
    with pytest.raises(ValueError):
        effects.estimate(random_store, "1", "2", "rmst")
    with pytest.raises(ValueError):
        effects.estimate(random_store, "1", "2", "hazard", 1.0)
    assert effects.estimate(random_store, "1", "2").scale == "logtime"


def test_write_outputs(tmp_path, random_store):
    ests = [effects.cate(random_store, "1", "2"), effects.cate(random_store, "1", "3")]
    p = effects.write_effects(ests, tmp_path / "e.csv")
    assert len(p.read_text().splitlines()) == 3
    c = effects.counterfactual_survival(random_store, "1", effects.time_grid(3, 10))
    p = effects.write_curves([c], tmp_path / "c.csv")
    assert len(p.read_text().splitlines()) == 11


@settings(max_examples=40, deadline=None)
@given(st.floats(-3, 3), st.floats(0.1, 3), st.floats(0.05, 50))
def test_lognormal_rmst_matches_quadrature(mu, sigma, t_star):
    oracle, _ = integrate.quad(lambda t: special.ndtr(-(np.log(t) - mu) / sigma) if t > 0 else 1.0, 0, t_star,
                               limit=200, epsabs=1e-12)
    assert abs(effects.rmst_lognormal(mu, sigma, t_star) - oracle) < 1e-7 * max(1.0, t_star)
