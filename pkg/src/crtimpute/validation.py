"""Deterministic reference checks used by the acceptance harness.

Each check returns rows ``(label, passed, observed, bound)``.
"""
from __future__ import annotations

import numpy as np
from scipy import integrate, special, stats

from .anova import factorial_anova
from .datagen import Design, GenParams, ScenarioConfig, TrialDataset, generate_dataset
from ._mat2 import to_chol_params
from .lmm import marginal_loglik
from .missingness import calibrate_alpha0
from .mmi import MmiPriors, PanSampler
from .pooling import rubin_pool
from .rngkit import make_stream

ORACLE_SEED = 20240917


def dense_loglik(sigma, psi, beta, data: TrialDataset) -> float:
    """Log-likelihood built cluster by cluster from the full 2n_j x 2n_j covariance."""
    total = 0.0
    for j in range(data.n_clusters):
        rows = np.flatnonzero(data.cluster == j)
        n = rows.size
        arm = float(data.arm[rows[0]])
        mean = np.concatenate([np.full(n, beta[0] + beta[1] * arm), np.full(n, beta[2] + beta[3] * arm)])
        cov = np.kron(np.asarray(sigma), np.eye(n)) + np.kron(np.asarray(psi), np.ones((n, n)))
        y = np.concatenate([data.y[rows, 0], data.y[rows, 1]])
        total += stats.multivariate_normal(mean, cov).logpdf(y)
    return float(total)


def random_instance(rng: np.random.Generator):
    """Small random dataset plus random (Sigma, Psi, beta) for likelihood comparisons."""
    J = 2 * int(rng.integers(2, 5))
    sizes = rng.integers(1, 6, size=J)
    cluster = np.repeat(np.arange(J), sizes)
    arm_c = (np.arange(J) >= J // 2).astype(np.int8)
    n = cluster.size
    y = rng.normal(size=(n, 2)) * 2.0
    data = TrialDataset(cluster, arm_c[cluster], rng.normal(size=n), rng.normal(size=J)[cluster], y,
                        np.ones((n, 2), dtype=bool))
    a = rng.normal(size=(2, 2))
    sigma = a @ a.T + 0.1 * np.eye(2)
    c = rng.normal(size=(2, 2))
    psi = c @ c.T + 0.01 * np.eye(2)
    beta = rng.normal(size=4)
    return data, sigma, psi, beta


def loglik_discrepancy(n_instances: int = 100, seed: int = ORACLE_SEED) -> float:
    """Largest |structured - dense| log-likelihood difference over random instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        data, sigma, psi, beta = random_instance(rng)
        params = np.concatenate([to_chol_params(sigma), to_chol_params(psi)])
        worst = max(worst, abs(marginal_loglik(params, beta, data) - dense_loglik(sigma, psi, beta, data)))
    return worst


def alpha0_by_quadrature(eta: float, target: float, variance: float = 1.0) -> float:
    """Intercept giving mean missingness ``target`` under a normal linear predictor, via adaptive quadrature."""
    from scipy.optimize import brentq

    sd = np.sqrt(variance)

    def rate(a):
        f = lambda z: special.expit(a + eta * sd * z) * stats.norm.pdf(z)  # noqa: E731
        return integrate.quad(f, -np.inf, np.inf, epsabs=1e-12)[0]

    return brentq(lambda a: rate(a) - target, -30, 30, xtol=1e-12)


def two_by_two_frame():
    import pandas as pd

    return pd.DataFrame({
        "a": ["a1"] * 4 + ["a2"] * 4,
        "b": ["b1", "b1", "b2", "b2"] * 2,
        "y": [1.0, 2.0, 3.0, 5.0, 2.0, 4.0, 6.0, 8.0],
    })


# hand two-way ANOVA for the 2x2 frame: SS_A=10.125, SS_B=21.125, SS_AB=1.125, SS_E=6.5 on 4 df
TWO_BY_TWO_F = {"a": 10.125 / 1.625, "b": 21.125 / 1.625, "a:b": 1.125 / 1.625}


def oracle_checks() -> list[tuple[str, bool, str, str]]:
    rows = []
    worst = loglik_discrepancy()
    rows.append(("(a) structured vs dense log-likelihood, 100 instances", worst <= 1e-8, f"{worst:.3g}", "1e-08"))

    p = rubin_pool([1.0, 2.0, 3.0], [1.0, 1.0, 1.0])
    ok = p.q_bar == 2.0 and abs(p.T - 7.0 / 3.0) < 1e-12 and abs(p.df - 6.125) < 1e-12
    rows.append(("(b) Rubin hand case q_bar, T, df", ok, f"{p.q_bar:.17g}, {p.T:.17g}, {p.df:.17g}",
                 "2, 7/3, 6.125"))

    table = factorial_anova(two_by_two_frame(), ["a", "b"], "y")
    err = max(abs(table.get(t)["F"] - f) for t, f in TWO_BY_TWO_F.items())
    rows.append(("(c) 2x2 factorial ANOVA F values", err < 1e-10, f"max err {err:.3g}", "1e-10"))

    a = calibrate_alpha0("individual", 0.0, 0.2)
    err_logit = abs(a - special.logit(0.2))
    rows.append(("(d) alpha0 at eta=0 equals logit(target)", err_logit <= 1e-10, f"{err_logit:.3g}", "1e-10"))
    a1 = calibrate_alpha0("individual", 1.0, 0.2)
    ref = alpha0_by_quadrature(1.0, 0.2)
    rows.append(("(d) alpha0 at eta=1 vs adaptive quadrature", abs(a1 - ref) <= 1e-3,
                 f"{a1:.6f} vs {ref:.6f}", "1e-03"))
    return rows


# -- sampler checks --------------------------------------------------------------------------

RECOVERY_DESIGN = Design("recovery", 100, "fixed", cluster_size=20)


def recovery_config(icc=(0.3, 0.3), rho: float = 0.5, phi: float = 0.5, seed: int = ORACLE_SEED) -> ScenarioConfig:
    return ScenarioConfig(scenario_index=0, icc=tuple(icc), design=RECOVERY_DESIGN, mechanism="individual",
                          eta="low", nonresponse="equal", gen=GenParams(rho=rho, phi=phi), master_seed=seed)


def mmi_recovery(config: ScenarioConfig | None = None, burn_in: int = 500, draws: int = 2000,
                 missing_rate: float = 0.2):
    """Posterior means of Sigma and Psi after burn-in on one large dataset with MCAR gaps.

    Returns ``(sigma_mean, psi_mean, sigma_true, psi_true)``.
    """
    config = config or recovery_config()
    seed = config.master_seed
    data = generate_dataset(config, make_stream(seed, 0, 0, "recovery-data"))
    gen = make_stream(seed, 0, 0, "recovery-mask").generator
    r = gen.uniform(size=data.y.shape) >= missing_rate
    r[np.arange(data.n), gen.integers(0, 2, size=data.n)] = True  # keep at least one outcome per row
    y = np.where(r, data.y, np.nan)
    incomplete = TrialDataset(data.cluster, data.arm, data.x, data.w, y, r)
    sampler = PanSampler(incomplete, MmiPriors(), make_stream(seed, 0, 0, "recovery-chain"))
    sampler.run(burn_in)
    s_sum, p_sum = np.zeros((2, 2)), np.zeros((2, 2))
    for _ in range(draws):
        sampler.step()
        s_sum += sampler.sigma
        p_sum += sampler.psi
    sigma, psi = config.gen.covariances(config.icc)
    return s_sum / draws, p_sum / draws, sigma, psi


def mmi_stationarity(config: ScenarioConfig | None = None, draws: int = 2000):
    """Start at the generating values on complete data; mean and sd of the Sigma draws.

    Returns ``(mean, sd, sigma_true)`` over the three distinct entries of Sigma.
    """
    config = config or recovery_config()
    seed = config.master_seed
    data = generate_dataset(config, make_stream(seed, 0, 0, "stationarity-data"))
    sigma, psi = config.gen.covariances(config.icc)
    g = config.gen
    gamma = np.array([g.intercepts, g.beta, g.nu_x, g.nu_w], dtype=float)
    # the realised random effects are not known to the sampler; start from their conditional means
    resid = data.y - np.column_stack([np.ones(data.n), data.arm, data.x, data.w]) @ gamma
    nj = np.bincount(data.cluster).astype(float)
    means = np.column_stack([np.bincount(data.cluster, weights=resid[:, k]) for k in range(2)]) / nj[:, None]
    b = np.empty_like(means)
    for j in range(means.shape[0]):
        b[j] = psi @ np.linalg.solve(psi + sigma / nj[j], means[j])
    sampler = PanSampler(data, MmiPriors(), make_stream(seed, 0, 0, "stationarity-chain"),
                         init={"gamma": gamma, "b": b, "sigma": sigma, "psi": psi})
    out = np.empty((draws, 3))
    for i in range(draws):
        sampler.step()
        out[i] = sampler.sigma[0, 0], sampler.sigma[0, 1], sampler.sigma[1, 1]
    return out.mean(axis=0), out.std(axis=0, ddof=1), np.array([sigma[0, 0], sigma[0, 1], sigma[1, 1]])


def sampler_checks(seed: int = ORACLE_SEED) -> list[tuple[str, bool, str, str]]:
    rows = []
    config = recovery_config(seed=seed)
    s_hat, p_hat, s_true, p_true = mmi_recovery(config)
    idx = [(0, 0), (0, 1), (1, 1)]
    for name, est, true in (("Sigma", s_hat, s_true), ("Psi", p_hat, p_true)):
        rel = np.array([abs(est[i] - true[i]) / abs(true[i]) for i in idx])
        rows.append((f"MMI recovery of {name} (J=100, n_j=20), max relative error", bool(np.all(rel <= 0.15)),
                     ";".join(f"{v:.3f}" for v in rel), "0.15"))
    mean, sd, true = mmi_stationarity(config)
    z = np.abs(mean - true) / sd
    rows.append(("MMI stationarity: mean Sigma draw within 3 posterior sd", bool(np.all(z < 3.0)),
                 ";".join(f"{v:.2f}" for v in z), "3"))
    return rows
