import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, stats

from riaftbart.augmentation import TAIL_SWITCH, draw_truncated_normal, impute_censored


def test_no_truncation_limit():
    rng = np.random.default_rng(0)
    d = draw_truncated_normal(np.zeros(20_000), 1.0, -40.0, rng)
    assert stats.kstest(d, "norm").pvalue > 0.01


def test_half_normal_mills_ratio():
    rng = np.random.default_rng(1)
    d = draw_truncated_normal(np.zeros(50_000), 1.0, 0.0, rng)
    target = stats.norm.pdf(0) / stats.norm.sf(0)
    assert abs(d.mean() - target) / target < 0.01
    assert np.all(d > 0)


def test_far_tail():
    rng = np.random.default_rng(2)
    d = draw_truncated_normal(np.zeros(50_000), 1.0, 8.0, rng)
    assert np.all(np.isfinite(d)) and np.all(d > 8)
    num, _ = integrate.quad(lambda x: x * np.exp(-(x * x - 64) / 2), 8, 30)
    den, _ = integrate.quad(lambda x: np.exp(-(x * x - 64) / 2), 8, 30)
    assert abs(d.mean() - num / den) / (num / den) < 0.01


@pytest.mark.parametrize("a", [TAIL_SWITCH - 0.5, TAIL_SWITCH, TAIL_SWITCH + 0.5])
def test_branch_switch_is_seamless(a):
    rng = np.random.default_rng(3)
    d = draw_truncated_normal(np.zeros(20_000), 1.0, a, rng)
    assert stats.kstest(d, stats.truncnorm(a, np.inf).cdf).pvalue > 0.01


def test_scalar_returns_float():
    x = draw_truncated_normal(1.0, 2.0, 0.5, np.random.default_rng(4))
    assert isinstance(x, float) and x > 0.5


def test_rejects_nonpositive_sd():
    with pytest.raises(ValueError):
        draw_truncated_normal(0.0, 0.0, 0.0, np.random.default_rng(0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-50, 50), st.floats(1e-3, 10), st.floats(-30, 30))
def test_strictly_above_bound(mean, sd, offset):
    lower = mean + offset * sd
    d = draw_truncated_normal(np.full(50, mean), sd, lower, np.random.default_rng(5))
    assert np.all(d > lower) and np.all(np.isfinite(d))


def test_no_censoring_copies_observed():
    z = np.array([0.1, -0.4, 2.0])
    out = impute_censored(z, np.ones(3, int), np.zeros(3), 1.0, np.random.default_rng(6))
    np.testing.assert_array_equal(out, z)


def test_censored_row_at_mean_goes_up():
    z = np.array([0.3])
    out = impute_censored(z, np.array([0]), z.copy(), 0.5, np.random.default_rng(7))
    assert out[0] > z[0]


def test_fixed_parameter_imputation_distribution():
    rng = np.random.default_rng(8)
    z = np.array([0.2, 1.0])
    delta = np.array([1, 0])
    mean, s2 = np.array([0.0, 0.4]), 0.81
    d = np.array([impute_censored(z, delta, mean, s2, rng)[1] for _ in range(20_000)])
    a = (1.0 - 0.4) / 0.9
    assert stats.kstest(d, stats.truncnorm(a, np.inf, loc=0.4, scale=0.9).cdf).pvalue > 0.01
