import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crtimpute.rngkit import (
    as_generator, draw_gamma, draw_inverse_wishart, draw_mvn, draw_scaled_inv_chisq, make_stream,
)

N = 100_000


def test_same_key_same_draws():
    a = make_stream(42, 0, 0, "datagen").uniform(100)
    b = make_stream(42, 0, 0, "datagen").uniform(100)
    assert np.array_equal(a, b)


@pytest.mark.parametrize("other", [(42, 0, 1, "datagen"), (42, 0, 0, "missing"), (42, 1, 0, "datagen"),
                                   (43, 0, 0, "datagen")])
def test_any_key_change_changes_draws(other):
    a = make_stream(42, 0, 0, "datagen").uniform(100)
    b = make_stream(*other).uniform(100)
    assert not np.any(a == b)


@given(st.integers(0, 2**64 - 1), st.integers(0, 500), st.integers(0, 5000), st.sampled_from(["a", "impute-MMI"]))
@settings(max_examples=30, deadline=None)
def test_stream_is_pure_function_of_key(seed, s, r, tag):
    first = make_stream(seed, s, r, tag)
    first.uniform(7)  # consuming one stream does not affect a freshly made one
    assert np.array_equal(make_stream(seed, s, r, tag).standard_normal(5),
                          make_stream(seed, s, r, tag).standard_normal(5))


def test_spawn_independent_of_parent_state():
    s = make_stream(1, 2, 3, "impute")
    child_before = s.spawn("m0").uniform(10)
    s.uniform(1000)
    assert np.array_equal(child_before, s.spawn("m0").uniform(10))
    assert not np.array_equal(s.spawn("m0").uniform(10), s.spawn("m1").uniform(10))


def test_as_generator_accepts_seed_and_generator():
    g = np.random.default_rng(3)
    assert as_generator(g) is g
    assert np.array_equal(as_generator(5).random(3), np.random.default_rng(5).random(3))


def test_mvn_degenerate_cov_returns_mean():
    out = draw_mvn([1.0, 2.0], np.zeros((2, 2)), make_stream(0, 0, 0, "t"))
    assert np.array_equal(out, [1.0, 2.0])


def test_mvn_moments():
    cov = np.array([[1.0, 0.5], [0.5, 1.0]])
    x = draw_mvn([0.0, 0.0], cov, make_stream(0, 0, 0, "t"), size=N)
    assert np.allclose(np.cov(x.T), cov, atol=0.03)
    assert np.allclose(x.mean(axis=0), 0.0, atol=4 * np.sqrt(1 / N))


def test_mvn_univariate_variance():
    x = draw_mvn([0.0], [[4.0]], make_stream(0, 0, 0, "t"), size=N)
    assert 3.9 <= x.var() <= 4.1


def test_mvn_clips_tiny_negative_eigenvalue():
    cov = np.array([[1.0, 1.0], [1.0, 1.0]]) - 1e-12 * np.eye(2)
    draw_mvn([0, 0], cov, make_stream(0, 0, 0, "t"))


@pytest.mark.parametrize("cov", [[[1.0, 0.0], [0.5, 1.0]], [[1.0, 2.0], [2.0, 1.0]]])
def test_mvn_rejects_invalid_cov(cov):
    with pytest.raises(ValueError, match="invalid covariance"):
        draw_mvn([0, 0], cov, make_stream(0, 0, 0, "t"))


def test_inverse_wishart_mean_and_pd():
    draws = draw_inverse_wishart(10, np.eye(2), make_stream(0, 0, 0, "t"), size=N)
    assert np.allclose(draws.mean(axis=0), np.eye(2) / 7, atol=0.01)
    np.linalg.cholesky(draws)  # every draw positive definite


def test_inverse_wishart_univariate_is_scaled_inverse_chisq():
    d = draw_inverse_wishart(5, [[2.0]], make_stream(0, 0, 0, "t"), size=N)[:, 0, 0]
    assert abs(d.mean() - 2 / 3) < 0.02
    # same law as 2 / chi2_5: compare quantiles with an independent sample
    ref = 2.0 / make_stream(1, 0, 0, "t").generator.chisquare(5, N)
    q = [0.1, 0.25, 0.5, 0.75, 0.9]
    assert np.allclose(np.quantile(d, q), np.quantile(ref, q), rtol=0.03)


def test_inverse_wishart_improper():
    with pytest.raises(ValueError, match="improper inverse-Wishart"):
        draw_inverse_wishart(1.0, np.eye(2), make_stream(0, 0, 0, "t"))


def test_inverse_wishart_moment_check_4se():
    # Var of the (0,0) entry of IW_p(df, I) with p=2: 2 / ((df-p-1)^2 (df-p-3))
    df = 12
    d = draw_inverse_wishart(df, np.eye(2), make_stream(7, 0, 0, "t"), size=N)[:, 0, 0]
    mean, var = 1 / (df - 3), 2 / ((df - 3) ** 2 * (df - 5))
    assert abs(d.mean() - mean) < 4 * np.sqrt(var / N)


def test_scaled_inv_chisq():
    s = make_stream(0, 0, 0, "t")
    big = draw_scaled_inv_chisq(1e6, 3.0, s, size=1000)
    assert np.mean((big >= 2.97) & (big <= 3.03)) > 0.99
    x = draw_scaled_inv_chisq(10, 1.0, s, size=N)
    assert abs(x.mean() - 1.25) < 0.02
    assert np.all(x > 0)
    with pytest.raises(ValueError):
        draw_scaled_inv_chisq(0, 1.0, s)
    with pytest.raises(ValueError):
        draw_scaled_inv_chisq(3, -1.0, s)


def test_scaled_inv_chisq_moment_check_4se():
    df, scale = 12.0, 2.0
    x = draw_scaled_inv_chisq(df, scale, make_stream(3, 0, 0, "t"), size=N)
    mean = df * scale / (df - 2)
    var = 2 * df**2 * scale**2 / ((df - 2) ** 2 * (df - 4))
    assert abs(x.mean() - mean) < 4 * np.sqrt(var / N)


def test_gamma():
    g = draw_gamma(4.0, 5.0, make_stream(0, 0, 0, "t"), size=N)
    assert 19.8 <= g.mean() <= 20.2
    assert 0.49 <= g.std() / g.mean() <= 0.51
    assert np.all(g > 0)
    assert abs(g.mean() - 20) < 4 * np.sqrt(100 / N)
    with pytest.raises(ValueError):
        draw_gamma(0.0, 1.0, make_stream(0, 0, 0, "t"))
