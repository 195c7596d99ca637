"""MAR non-response: logistic intercept calibration and imposing missing outcomes."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize, special

from .datagen import MECHANISMS, ScenarioConfig, TrialDataset
from .rngkit import as_generator

# number of standard-normal covariates summed into the linear predictor
_COVARIATE_COUNT = {"individual": 1, "cluster": 1, "both": 2, "treatment": 2}

_ETA = {"low": 1.0, "high": 2.0}
_TARGETS = {"equal": (0.20, 0.20), "different": (0.30, 0.10)}

# treatment-differential settings: (eta control, eta intervention) and
# non-response targets [arm][outcome]; intervention rows are the tabulated
# empirical rates that the intervention intercepts are calibrated to.
_TREATMENT = {
    "low": ((1.0, 2.0), {"equal": ((0.20, 0.20), (0.35, 0.35)),
                         "different": ((0.30, 0.10), (0.45, 0.20))}),
    "high": ((1.5, 3.0), {"equal": ((0.10, 0.10), (0.30, 0.30)),
                          "different": ((0.15, 0.10), (0.35, 0.30))}),
}

_GH_NODES = 64


@dataclass(frozen=True)
class MissingnessSpec:
    """Arm-specific logistic non-response model; arrays are indexed ``[arm, outcome]``."""

    mechanism: str
    eta: np.ndarray  # shape (2,), one value per arm
    alpha0: np.ndarray  # shape (2, 2)
    target_pi: np.ndarray  # shape (2, 2)

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism != "treatment" and (
            self.eta[0] != self.eta[1] or np.any(self.alpha0[0] != self.alpha0[1])
        ):
            raise ValueError("non-differential mechanisms need identical arms")

    def linear_predictor(self, data: TrialDataset) -> np.ndarray:
        """Logit of the non-response probability, shape ``(n, 2)``."""
        if self.mechanism == "individual":
            z = data.x
        elif self.mechanism == "cluster":
            z = data.w
        else:
            z = data.x + data.w
        arm = data.arm.astype(np.intp)
        return self.alpha0[arm] + (self.eta[arm] * z)[:, None]


def _gh():
    x, w = np.polynomial.hermite.hermgauss(_GH_NODES)
    return x * np.sqrt(2.0), w / np.sqrt(np.pi)


def expected_rate(alpha0: float, eta: float, variance: float) -> float:
    """E[logistic(alpha0 + eta*Z)] for Z ~ N(0, variance), by Gauss-Hermite quadrature."""
    nodes, weights = _gh()
    return float(weights @ special.expit(alpha0 + eta * np.sqrt(variance) * nodes))


@lru_cache(maxsize=None)
def calibrate_alpha0(mechanism: str, eta: float, target_pi: float) -> float:
    """Intercept giving a marginal non-response probability of ``target_pi``.

    The linear predictor is ``alpha0 + eta*Z`` where ``Z`` is one standard
    normal covariate (individual or cluster mechanisms) or the sum of two
    (both / treatment-differential).
    """
    if mechanism not in _COVARIATE_COUNT:
        raise ValueError(f"unknown mechanism {mechanism!r}")
    if not 0.0 < target_pi < 1.0:
        raise ValueError("target_pi must lie in (0, 1)")
    v = float(_COVARIATE_COUNT[mechanism])
    f = lambda a: expected_rate(a, eta, v) - target_pi  # noqa: E731
    lo, hi = -20.0, 20.0
    if f(lo) > 0 or f(hi) < 0:
        raise ValueError("calibration failed")
    return optimize.brentq(f, lo, hi, xtol=1e-13, rtol=1e-15, maxiter=200)


def _alpha(mechanism: str, eta: float, target: float) -> float:
    if target <= 0.0:
        return -np.inf
    return calibrate_alpha0(mechanism, float(eta), float(target))


def scenario_settings(mechanism: str, eta: str, nonresponse: str):
    """(eta per arm, targets [arm][outcome]) for a factorial cell."""
    if mechanism == "treatment":
        etas, targets = _TREATMENT[eta]
        return np.array(etas), np.array(targets[nonresponse])
    e = _ETA[eta]
    t = _TARGETS[nonresponse]
    return np.array([e, e]), np.array([t, t])


def make_missingness_spec(config: ScenarioConfig) -> MissingnessSpec:
    etas, targets = scenario_settings(config.mechanism, config.eta, config.nonresponse)
    if config.targets is not None:
        targets = np.asarray(config.targets, dtype=float)
    alpha = np.array([
        [_alpha(config.mechanism, etas[k], targets[k, l]) for l in range(2)] for k in range(2)
    ])
    return MissingnessSpec(config.mechanism, etas, alpha, targets)


def impose_missingness(data: TrialDataset, spec: MissingnessSpec, stream) -> TrialDataset:
    """Draw independent Bernoulli non-response for each outcome; blank the missing Y.

    A cluster left with no observed value on an outcome has that outcome's
    flags redrawn once; if it is still empty it is kept and counted in
    ``n_empty_cluster_warnings``.
    """
    if not data.r.all() or np.isnan(data.y).any():
        raise ValueError("impose_missingness expects fully observed data")
    gen = as_generator(stream)
    pi = special.expit(spec.linear_predictor(data))
    missing = gen.random(pi.shape) < pi
    sizes = data.cluster_sizes()
    J = sizes.shape[0]
    warnings = 0
    for l in range(2):
        observed = np.bincount(data.cluster, weights=~missing[:, l], minlength=J)
        empty = np.flatnonzero(observed == 0)
        if empty.size == 0:
            continue
        rows = np.flatnonzero(np.isin(data.cluster, empty))
        missing[rows, l] = gen.random(rows.size) < pi[rows, l]
        observed = np.bincount(data.cluster, weights=~missing[:, l], minlength=J)
        warnings += int(np.sum(observed == 0))
    out = data.copy()
    out.r = ~missing
    out.y[missing] = np.nan
    out.n_empty_cluster_warnings = warnings
    return out
