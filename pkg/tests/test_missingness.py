import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate, special, stats

from crtimpute.datagen import Design, TrialDataset, generate_dataset
from crtimpute.missingness import (
    MissingnessSpec, calibrate_alpha0, expected_rate, impose_missingness, make_missingness_spec, scenario_settings,
)
from crtimpute.rngkit import make_stream

from conftest import complete_data, scenario


def quad_rate(alpha0, eta, variance):
    sd = np.sqrt(variance)
    f = lambda z: special.expit(alpha0 + eta * sd * z) * stats.norm.pdf(z)  # noqa: E731
    return integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)[0]


def synthetic(n, rng, arm=None) -> TrialDataset:
    # large clusters so the empty-cluster redraw never fires; W is drawn per row
    # (not a valid trial layout, but it gives the linear predictor its nominal variance)
    cluster = np.arange(n) // 1000
    arm = np.zeros(n, dtype=np.int8) if arm is None else arm
    return TrialDataset(cluster, arm, rng.standard_normal(n), rng.standard_normal(n), rng.standard_normal((n, 2)),
                        np.ones((n, 2), dtype=bool))


def test_eta_zero_is_logit():
    assert calibrate_alpha0("individual", 0.0, 0.2) == pytest.approx(special.logit(0.2), abs=1e-10)
    assert calibrate_alpha0("individual", 0.0, 0.2) == pytest.approx(-1.3863, abs=1e-4)


def test_eta_one_matches_independent_quadrature():
    a = calibrate_alpha0("individual", 1.0, 0.2)
    assert a == pytest.approx(-1.66, abs=0.015)
    assert quad_rate(a, 1.0, 1.0) == pytest.approx(0.2, abs=1e-8)


@given(st.sampled_from(["individual", "cluster", "both", "treatment"]), st.floats(0.0, 3.0),
       st.floats(0.02, 0.6))
@settings(max_examples=40, deadline=None)
def test_calibration_reproduces_target(mechanism, eta, target):
    a = calibrate_alpha0(mechanism, eta, target)
    v = 1.0 if mechanism in ("individual", "cluster") else 2.0
    assert quad_rate(a, eta, v) == pytest.approx(target, abs=1e-4)
    assert expected_rate(a, eta, v) == pytest.approx(target, abs=1e-6)


def test_both_mechanism_monte_carlo(rng):
    # eta=2 on X+W: linear-predictor variance 8
    a = calibrate_alpha0("both", 2.0, 0.3)
    x, w = rng.standard_normal((2, 1_000_000))
    rate = special.expit(a + 2.0 * (x + w)).mean()
    assert rate == pytest.approx(0.30, abs=0.01)


def test_calibration_failure():
    with pytest.raises(ValueError, match="calibration failed"):
        calibrate_alpha0("individual", 40.0, 1e-12)
    with pytest.raises(ValueError):
        calibrate_alpha0("individual", 1.0, 1.5)


def test_constant_probability_rate(rng):
    d = synthetic(1_000_000, rng)
    spec = MissingnessSpec("individual", np.array([0.0, 0.0]), np.full((2, 2), special.logit(0.2)),
                           np.full((2, 2), 0.2))
    out = impose_missingness(d, spec, make_stream(0, 0, 0, "m"))
    assert np.allclose(1 - out.r.mean(axis=0), 0.2, atol=0.001)


@pytest.mark.parametrize("eta,nr,control,intervention", [
    ("low", "equal", (0.20, 0.20), (0.35, 0.35)),
    ("high", "different", (0.15, 0.10), (0.35, 0.30)),
])
def test_treatment_differential_rates(rng, eta, nr, control, intervention):
    n = 200_000
    arm = (np.arange(n) >= n // 2).astype(np.int8)
    d = synthetic(n, rng, arm)
    spec = make_missingness_spec(scenario(mechanism="treatment", eta=eta, nonresponse=nr))
    out = impose_missingness(d, spec, make_stream(1, 0, 0, "m"))
    miss = ~out.r
    assert np.allclose(miss[arm == 0].mean(axis=0), control, atol=0.01)
    assert np.allclose(miss[arm == 1].mean(axis=0), intervention, atol=0.01)


@pytest.mark.parametrize("mechanism", ["individual", "cluster", "both"])
@pytest.mark.parametrize("nr,target", [("equal", (0.2, 0.2)), ("different", (0.3, 0.1))])
def test_non_differential_rates(rng, mechanism, nr, target):
    d = synthetic(100_000, rng)
    spec = make_missingness_spec(scenario(mechanism=mechanism, eta="high", nonresponse=nr))
    assert np.array_equal(spec.alpha0[0], spec.alpha0[1])
    out = impose_missingness(d, spec, make_stream(2, 0, 0, "m"))
    assert np.allclose(1 - out.r.mean(axis=0), target, atol=0.01)


def test_scenario_settings_tables():
    etas, targets = scenario_settings("treatment", "high", "equal")
    assert tuple(etas) == (1.5, 3.0)
    assert targets.tolist() == [[0.10, 0.10], [0.30, 0.30]]
    etas, targets = scenario_settings("cluster", "low", "different")
    assert tuple(etas) == (1.0, 1.0)
    assert targets.tolist() == [[0.3, 0.1], [0.3, 0.1]]


def test_missing_cells_are_blank_and_covariates_untouched():
    full = complete_data()
    cfg = scenario()
    out = impose_missingness(full, make_missingness_spec(cfg), make_stream(0, 0, 0, "m"))
    assert np.array_equal(np.isnan(out.y), ~out.r)
    assert np.array_equal(out.y[out.r], full.y[out.r])
    assert np.array_equal(out.x, full.x) and np.array_equal(out.w, full.w) and np.array_equal(out.arm, full.arm)
    out.validate()


def test_missingness_ignores_outcomes():
    # MAR by construction: same stream and covariates, permuted Y -> same flags
    full = complete_data()
    spec = make_missingness_spec(scenario())
    perm = full.with_y(full.y[np.random.default_rng(0).permutation(full.n)])
    a = impose_missingness(full, spec, make_stream(0, 0, 0, "m"))
    b = impose_missingness(perm, spec, make_stream(0, 0, 0, "m"))
    assert np.array_equal(a.r, b.r)


def test_outcomes_conditionally_independent(rng):
    d = synthetic(400_000, rng)
    spec = MissingnessSpec("individual", np.array([0.0, 0.0]), np.full((2, 2), special.logit(0.3)),
                           np.full((2, 2), 0.3))
    out = impose_missingness(d, spec, make_stream(3, 0, 0, "m"))
    m = ~out.r
    assert m.all(axis=1).mean() == pytest.approx(m[:, 0].mean() * m[:, 1].mean(), abs=0.003)


def test_rejects_incomplete_input():
    cfg = scenario()
    once = impose_missingness(complete_data(), make_missingness_spec(cfg), make_stream(0, 0, 0, "m"))
    with pytest.raises(ValueError):
        impose_missingness(once, make_missingness_spec(cfg), make_stream(0, 0, 0, "m"))


def test_empty_cluster_redraw_and_warning_count():
    # tiny clusters with a high rate: some clusters stay empty after the redraw
    cfg = scenario(Design("tiny", 200, "fixed", cluster_size=2), mechanism="individual",
                   targets=((0.6, 0.6), (0.6, 0.6)))
    full = generate_dataset(cfg, make_stream(0, 0, 0, "g"))
    out = impose_missingness(full, make_missingness_spec(cfg), make_stream(0, 0, 0, "m"))
    empty = sum(int(np.sum(np.bincount(out.cluster, weights=out.r[:, l], minlength=200) == 0)) for l in range(2))
    assert out.n_empty_cluster_warnings == empty
    # a single redraw leaves about 0.36^2 of clusters empty instead of 0.36
    assert empty / 400 < 0.36 * 0.6


def test_zero_target_means_no_missingness():
    cfg = scenario(targets=((0.0, 0.0), (0.0, 0.0)))
    out = impose_missingness(complete_data(cfg), make_missingness_spec(cfg), make_stream(0, 0, 0, "m"))
    assert out.r.all()
