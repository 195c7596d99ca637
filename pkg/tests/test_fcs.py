import numpy as np
import pytest
from scipy import stats

from crtimpute.datagen import TrialDataset
from crtimpute.fcs import FcsModelSpec, ImputationError, bayes_norm_draw, fcs_impute, fixed_cluster_draw
from crtimpute.pooling import rubin_pool
from crtimpute.rngkit import make_stream

from conftest import blank, complete_data, incomplete_data, scenario


def test_bayes_norm_zero_residual_returns_ols():
    Z = np.column_stack([np.ones(6), np.arange(6.0)])
    y = 1.5 - 0.5 * np.arange(6.0)
    beta, sigma = bayes_norm_draw(Z, y, np.random.default_rng(0))
    assert sigma == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(beta, (1.5, -0.5), atol=1e-12)


def test_bayes_norm_intercept_only_hand_case():
    Z, y = np.ones((3, 1)), np.array([1.0, 2.0, 3.0])
    gen = np.random.default_rng(1)
    draws = np.array([bayes_norm_draw(Z, y, gen) for _ in range(20000)], dtype=object)
    beta = np.array([d[0][0] for d in draws])
    sigma2 = np.array([d[1] ** 2 for d in draws], dtype=float)
    # sigma*^2 = SSE / chi2_2 with SSE = 2, so 1/sigma*^2 ~ chi2_2 / 2 has mean 1
    assert np.mean(1.0 / sigma2) == pytest.approx(1.0, abs=0.03)
    assert np.median(beta) == pytest.approx(2.0, abs=0.03)


def test_bayes_norm_is_deterministic_for_a_stream():
    rng = np.random.default_rng(3)
    Z, y = rng.normal(size=(20, 3)), rng.normal(size=20)
    a = bayes_norm_draw(Z, y, make_stream(1, 2, 3, "x"))
    b = bayes_norm_draw(Z, y, make_stream(1, 2, 3, "x"))
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]


def test_bayes_norm_drops_collinear_trailing_column():
    rng = np.random.default_rng(4)
    z = rng.normal(size=30)
    Z = np.column_stack([np.ones(30), z, 2 * z])
    beta, _ = bayes_norm_draw(Z, z + rng.normal(size=30), rng, protected=2)
    assert beta[2] == 0.0


def test_bayes_norm_protected_collinearity_raises():
    z = np.arange(10.0)
    with pytest.raises(ImputationError, match="singular imputation design"):
        bayes_norm_draw(np.column_stack([np.ones(10), np.zeros(10)]), z, np.random.default_rng(0), protected=2)


def test_bayes_norm_too_few_rows():
    with pytest.raises(ImputationError, match="too few observed rows"):
        bayes_norm_draw(np.eye(3), np.ones(3), np.random.default_rng(0))


def test_structured_fixed_cluster_draw_matches_dense_in_distribution():
    rng = np.random.default_rng(5)
    J, n = 4, 30
    cluster = rng.integers(0, J, size=n)
    cluster[:J] = np.arange(J)
    v = rng.normal(size=n)
    y = 0.3 * cluster + v + rng.normal(size=n)
    dummies = (cluster[:, None] == np.arange(1, J)[None, :]).astype(float)
    Z = np.column_stack([np.ones(n), v, dummies])
    s_gen, d_gen = np.random.default_rng(6), np.random.default_rng(7)
    structured, dense = [], []
    for _ in range(4000):
        alpha, gamma, _ = fixed_cluster_draw(cluster, v[:, None], y, J, s_gen)
        structured.append([alpha[2], gamma[0]])
        beta, _ = bayes_norm_draw(Z, y, d_gen)
        dense.append([beta[0] + beta[3], beta[1]])  # cluster 2 = intercept + its indicator
    structured, dense = np.array(structured), np.array(dense)
    for k in range(2):
        assert stats.ks_2samp(structured[:, k], dense[:, k]).pvalue > 1e-3


def test_fixed_cluster_draw_drop_uses_reference_cluster():
    rng = np.random.default_rng(8)
    cluster = np.repeat([0, 1, 3], 10)
    y = rng.normal(size=30)
    alpha, _, _ = fixed_cluster_draw(cluster, rng.normal(size=(30, 1)), y, 4, rng, on_empty="drop")
    assert alpha[2] == alpha[0]
    shifted = np.repeat([1, 2], 10)
    alpha, _, _ = fixed_cluster_draw(shifted, rng.normal(size=(20, 1)), y[:20], 3, rng, on_empty="drop")
    assert alpha[0] == alpha[2]
    with pytest.raises(ImputationError, match="empty cluster under FMI"):
        fixed_cluster_draw(cluster, rng.normal(size=(30, 1)), y, 4, rng)


def test_no_missing_values_gives_identical_copies():
    d = complete_data()
    for variant in ("SMI", "FMI"):
        out = fcs_impute(d, FcsModelSpec(variant, M=4), make_stream(1, 0, 0, "fcs"))
        assert out.M == 4
        assert all(np.array_equal(c.y, d.y) for c in out)


@pytest.mark.parametrize("variant", ["SMI", "FMI"])
def test_observed_cells_preserved(variant):
    d = incomplete_data(scenario(mechanism="individual"))
    out = fcs_impute(d, FcsModelSpec(variant, M=3, on_empty_cluster="drop"), make_stream(2, 0, 0, "fcs"))
    for c in out:
        assert np.array_equal(c.y[d.r], d.y[d.r])
        assert not np.isnan(c.y).any()


@pytest.mark.parametrize("variant", ["SMI", "FMI"])
def test_exact_linear_relation_is_reproduced(variant):
    rng = np.random.default_rng(9)
    d = complete_data()
    y = d.y.copy()
    y[:, 1] = 2.0 * y[:, 0]
    d = d.with_y(y)
    mask = np.zeros((d.n, 2), dtype=bool)
    mask[:, 1] = rng.uniform(size=d.n) < 0.3
    mask[np.arange(d.n) % 10 == 0, 1] = False  # keep each cluster observed
    out = fcs_impute(blank(d, mask), FcsModelSpec(variant, M=2), make_stream(3, 0, 0, "fcs"))
    for c in out:
        assert np.allclose(c.y[mask[:, 1], 1], 2.0 * c.y[mask[:, 1], 0], atol=1e-6)


def test_between_imputation_variability():
    d = incomplete_data(scenario(mechanism="individual"))
    out = fcs_impute(d, FcsModelSpec("SMI", M=5), make_stream(4, 0, 0, "fcs"))
    cell = np.flatnonzero(~d.r[:, 0])[0]
    assert np.unique([c.y[cell, 0] for c in out]).size == 5


def test_smi_ignores_cluster_labels_fmi_does_not():
    d = incomplete_data(scenario(mechanism="individual"))
    perm = np.random.default_rng(10).permutation(d.n_clusters)
    shuffled = TrialDataset(perm[d.cluster], d.arm, d.x, d.w, d.y, d.r)
    spec = FcsModelSpec("SMI", M=2)
    a = fcs_impute(d, spec, make_stream(5, 0, 0, "fcs"))
    b = fcs_impute(shuffled, spec, make_stream(5, 0, 0, "fcs"))
    assert all(np.array_equal(x.y, y.y) for x, y in zip(a, b))
    spec = FcsModelSpec("FMI", M=2, on_empty_cluster="drop")
    a = fcs_impute(d, spec, make_stream(5, 0, 0, "fcs"))
    b = fcs_impute(shuffled, spec, make_stream(5, 0, 0, "fcs"))
    assert not all(np.array_equal(x.y, y.y) for x, y in zip(a, b))


def test_structured_and_dense_fmi_agree_in_distribution():
    d = incomplete_data(scenario("few_large", mechanism="individual"))
    cell = np.flatnonzero(~d.r[:, 0])[0]
    values = {}
    for structured in (True, False):
        spec = FcsModelSpec("FMI", M=300, n_cycles=5, structured=structured)
        values[structured] = np.array([c.y[cell, 0] for c in fcs_impute(d, spec, make_stream(6, 0, int(structured), "f"))])
    assert stats.ks_2samp(values[True], values[False]).pvalue > 1e-3


def _with_empty_cluster():
    d = incomplete_data(scenario(mechanism="individual"))
    mask = np.zeros((d.n, 2), dtype=bool)
    mask[d.cluster == 0, 0] = True
    return blank(d, mask)


def test_empty_cluster_under_fmi_raises():
    with pytest.raises(ImputationError, match="empty cluster under FMI"):
        fcs_impute(_with_empty_cluster(), FcsModelSpec("FMI", M=2), make_stream(7, 0, 0, "fcs"))


def test_empty_cluster_drop_paths_agree_in_distribution():
    d = _with_empty_cluster()
    cell = np.flatnonzero(d.cluster == 0)[0]
    values = {}
    for structured in (True, False):
        spec = FcsModelSpec("FMI", M=300, n_cycles=5, structured=structured, on_empty_cluster="drop")
        values[structured] = np.array([c.y[cell, 0] for c in fcs_impute(d, spec, make_stream(8, 0, int(structured), "f"))])
    assert stats.ks_2samp(values[True], values[False]).pvalue > 1e-3


def test_too_few_observed_rows():
    d = complete_data()
    mask = np.zeros((d.n, 2), dtype=bool)
    mask[3:, 0] = True
    with pytest.raises(ImputationError, match="too few observed rows"):
        fcs_impute(blank(d, mask), FcsModelSpec("SMI"), make_stream(9, 0, 0, "fcs"))


def test_spec_validation():
    with pytest.raises(ValueError):
        FcsModelSpec("XMI")
    with pytest.raises(ValueError):
        FcsModelSpec("SMI", n_cycles=2)


@pytest.mark.slow
def test_smi_consistent_under_mcar():
    est = []
    for rep in range(500):
        cfg = scenario("many_small", icc=(0.01, 0.01), seed=300 + rep)
        d = complete_data(cfg, rep)
        r = np.random.default_rng(rep).uniform(size=(d.n, 2)) >= 0.2
        out = fcs_impute(blank(d, ~r), FcsModelSpec("SMI", M=5, n_cycles=5), make_stream(cfg.master_seed, 0, rep, "fcs"))
        diffs = [c.y[c.arm == 1, 0].mean() - c.y[c.arm == 0, 0].mean() for c in out]
        est.append(rubin_pool(diffs, np.ones(len(diffs))).q_bar)
    est = np.array(est)
    # arm-mean difference includes the arm imbalance in W, which has mean zero across replicates
    assert abs(est.mean() - 1.0) < 2 * est.std(ddof=1) / np.sqrt(est.size)
