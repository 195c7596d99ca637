import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats

from crtimpute.pooling import DF_CAP, rubin_pool

finite = st.floats(-1e3, 1e3, allow_nan=False)
positive = st.floats(1e-3, 1e3, allow_nan=False)


@st.composite
def pool_inputs(draw):
    m = draw(st.integers(2, 20))
    q = draw(st.lists(finite, min_size=m, max_size=m))
    u = draw(st.lists(positive, min_size=m, max_size=m))
    return np.array(q), np.array(u)


def test_hand_case():
    p = rubin_pool([1, 2, 3], [1, 1, 1])
    assert p.q_bar == 2 and p.W == 1 and p.B == 1
    assert p.T == pytest.approx(7 / 3, abs=1e-15)
    assert p.df == pytest.approx(6.125, abs=1e-12)
    half = stats.t.ppf(0.975, 6.125) * np.sqrt(7 / 3)
    assert p.ci == pytest.approx((2 - half, 2 + half))


def test_identical_estimates_cap_df():
    p = rubin_pool([0.7] * 5, [0.2] * 5)
    assert p.B == 0 and p.T == pytest.approx(0.2) and p.df == DF_CAP
    assert p.q_bar == 0.7
    assert p.ci[1] - p.q_bar == pytest.approx(stats.norm.ppf(0.975) * np.sqrt(0.2), rel=1e-5)


def test_symmetric_two_imputations():
    p = rubin_pool([0.0, 0.0], [4.0, 4.0])
    assert p.q_bar == 0 and p.T == 4
    assert p.ci[0] == -p.ci[1]
    assert p.ci[1] == pytest.approx(stats.t.ppf(0.975, p.df) * 2)


def test_errors():
    with pytest.raises(ValueError, match="M >= 2"):
        rubin_pool([1.0], [1.0])
    with pytest.raises(ValueError):
        rubin_pool([1.0, 2.0], [1.0, -1.0])


@given(pool_inputs())
@settings(max_examples=200, deadline=None)
def test_invariants(inp):
    q, u = inp
    p = rubin_pool(q, u)
    M = len(q)
    assert p.T == pytest.approx(p.W + (1 + 1 / M) * p.B, rel=1e-12)
    assert p.T >= p.W and p.B >= 0 and p.df > 0
    half = stats.t.ppf(0.975, p.df) * np.sqrt(p.T)
    assert p.ci[0] == pytest.approx(p.q_bar - half, rel=1e-9, abs=1e-9)
    assert p.ci[1] == pytest.approx(p.q_bar + half, rel=1e-9, abs=1e-9)


@given(pool_inputs(), st.floats(-100, 100))
@settings(max_examples=100, deadline=None)
def test_translation_equivariance(inp, c):
    q, u = inp
    a, b = rubin_pool(q, u), rubin_pool(q + c, u)
    assert b.q_bar == pytest.approx(a.q_bar + c, abs=1e-9)
    assert b.ci[0] == pytest.approx(a.ci[0] + c, abs=1e-7)
    assert b.W == a.W
    assert b.B == pytest.approx(a.B, rel=1e-6, abs=1e-9)
    assert b.df == pytest.approx(a.df, rel=1e-5)


@given(pool_inputs(), st.floats(0.1, 10))
@settings(max_examples=100, deadline=None)
def test_scale_equivariance(inp, s):
    q, u = inp
    a, b = rubin_pool(q, u), rubin_pool(q * s, u * s * s)
    assert b.q_bar == pytest.approx(a.q_bar * s, rel=1e-9, abs=1e-9)
    assert b.T == pytest.approx(a.T * s * s, rel=1e-9)
    assert b.df == pytest.approx(a.df, rel=1e-6)


@given(pool_inputs(), st.integers(0, 19), st.floats(0, 100))
@settings(max_examples=100, deadline=None)
def test_variance_monotonicity(inp, i, extra):
    q, u = inp
    assume(i < len(q))
    bigger = u.copy()
    bigger[i] += extra
    assert rubin_pool(q, bigger).T >= rubin_pool(q, u).T


def test_barnard_rubin_df_is_smaller():
    q, u = [1.0, 1.4, 0.8, 1.1], [0.2, 0.25, 0.22, 0.21]
    classical = rubin_pool(q, u)
    small = rubin_pool(q, u, df_com=8)
    assert small.df < classical.df and small.df < 8
    assert small.T == classical.T


def test_negligible_between_variance_hits_df_cap():
    p = rubin_pool([0.0, 2e-99], [1.0, 1.0])
    assert p.df == 1e7 and np.isfinite(p.ci).all()
