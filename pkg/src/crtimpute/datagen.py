"""Scenario grid and complete-data generation for two-arm cluster randomised trials."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import _mat2
from .rngkit import as_generator, draw_gamma, draw_mvn

ICC_LEVELS: dict[str, tuple[float, float]] = {
    "low": (0.01, 0.01),
    "moderate": (0.20, 0.05),
    "high": (0.20, 0.20),
    "differential": (0.60, 0.01),
}
MECHANISMS = ("individual", "cluster", "both", "treatment")
ETA_SETTINGS = ("low", "high")
NONRESPONSE_SETTINGS = ("equal", "different")
METHODS = ("CCA", "SMI", "FMI", "MMI")

_MECHANISM_ALIASES = {"treatment-differential": "treatment", "differential": "treatment"}


@dataclass(frozen=True)
class Design:
    """Number of clusters and the rule generating their sizes."""

    label: str
    n_clusters: int
    size_rule: str = "fixed"  # "fixed" or "gamma"
    cluster_size: int = 10
    size_mean: float = 20.0
    size_cv: float = 0.5

    def __post_init__(self):
        if self.n_clusters < 4 or self.n_clusters % 2:
            raise ValueError("design needs an even number of clusters, at least 4")
        if self.size_rule not in ("fixed", "gamma"):
            raise ValueError(f"unknown size rule {self.size_rule!r}")
        if self.size_rule == "fixed" and self.cluster_size < 2:
            raise ValueError("fixed cluster size must be at least 2")


DESIGNS: dict[str, Design] = {
    "many_small": Design("many_small", 50, "fixed", cluster_size=10),
    "few_large": Design("few_large", 10, "fixed", cluster_size=50),
    "unbalanced": Design("unbalanced", 30, "gamma", size_mean=20.0, size_cv=0.5),
}
_DESIGN_ALIASES = {"i": "many_small", "ii": "few_large", "iii": "unbalanced"}


@dataclass(frozen=True)
class GenParams:
    """Generating coefficients shared by every scenario.

    Residual variances are split between levels by the scenario ICC pair, so
    ``total_var`` is the covariate-conditional outcome variance.
    """

    intercepts: tuple[float, float] = (0.0, 0.0)
    beta: tuple[float, float] = (1.0, 1.0)
    nu_x: tuple[float, float] = (0.5, 0.5)
    nu_w: tuple[float, float] = (0.5, 0.5)
    rho: float = 0.4
    phi: float = 0.4
    total_var: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("|rho| must be < 1")
        if not abs(self.phi) <= 1:
            raise ValueError("|phi| must be <= 1")

    def covariances(self, icc: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
        """Level-1 (Sigma) and level-2 (Psi) covariance matrices for an ICC pair."""
        comps = [variance_components_from_icc(c, v) for c, v in zip(icc, self.total_var)]
        tau = [np.sqrt(t) for t, _ in comps]
        sigma = [np.sqrt(s) for _, s in comps]
        return _mat2.cov2(sigma[0], sigma[1], self.rho), _mat2.cov2(tau[0], tau[1], self.phi)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the factorial design plus run settings."""

    scenario_index: int
    icc: tuple[float, float]
    design: Design
    mechanism: str
    eta: str
    nonresponse: str
    gen: GenParams = field(default_factory=GenParams)
    M: int = 10
    N: int = 1000
    methods: tuple[str, ...] = METHODS
    master_seed: int = 0
    n_cycles: int = 10
    burn_in: int = 500
    thin: int = 100
    # pooled intervals use the small-sample df with complete-data df J - 2,
    # the same reference distribution as the complete-case interval
    rubin_df: str = "barnard-rubin"
    fmi_empty_cluster: str = "drop"
    # explicit non-response targets indexed [arm][outcome]; None uses the tables
    targets: tuple[tuple[float, float], tuple[float, float]] | None = None

    @property
    def icc_label(self) -> str:
        for name, pair in ICC_LEVELS.items():
            if tuple(self.icc) == pair:
                return name
        return f"{self.icc[0]:g},{self.icc[1]:g}"

    def __post_init__(self):
        if self.rubin_df not in ("classical", "barnard-rubin"):
            raise ValueError(f"rubin_df must be 'classical' or 'barnard-rubin', not {self.rubin_df!r}")
        if self.fmi_empty_cluster not in ("error", "drop"):
            raise ValueError("fmi_empty_cluster must be 'error' or 'drop'")

    def with_(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["design"] = self.design.label
        d["icc"] = list(self.icc)
        d["methods"] = list(self.methods)
        d["gen"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["gen"].items()}
        if self.targets is not None:
            d["targets"] = [list(t) for t in self.targets]
        return d


@dataclass
class TrialDataset:
    """Individual-level records of one trial.

    ``y`` has two columns (Y1, Y2) holding NaN where unobserved; ``r`` holds
    the response flags (True = observed).  A completed (imputed) copy has no
    NaN in ``y`` but keeps the original ``r`` so the imputed cells stay known.
    """

    cluster: np.ndarray
    arm: np.ndarray
    x: np.ndarray
    w: np.ndarray
    y: np.ndarray
    r: np.ndarray
    n_dropped_clusters: int = 0
    n_empty_cluster_warnings: int = 0

    @property
    def n(self) -> int:
        return self.cluster.shape[0]

    @property
    def n_clusters(self) -> int:
        return int(self.cluster.max()) + 1 if self.n else 0

    @property
    def y1(self) -> np.ndarray:
        return self.y[:, 0]

    @property
    def y2(self) -> np.ndarray:
        return self.y[:, 1]

    @property
    def is_complete(self) -> bool:
        return not np.isnan(self.y).any()

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.cluster, minlength=self.n_clusters)

    def cluster_arm(self) -> np.ndarray:
        arm = np.zeros(self.n_clusters, dtype=self.arm.dtype)
        arm[self.cluster] = self.arm
        return arm

    def copy(self) -> "TrialDataset":
        return TrialDataset(
            self.cluster.copy(), self.arm.copy(), self.x.copy(), self.w.copy(),
            self.y.copy(), self.r.copy(), self.n_dropped_clusters, self.n_empty_cluster_warnings,
        )

    def with_y(self, y: np.ndarray) -> "TrialDataset":
        out = self.copy()
        out.y = y
        return out

    def validate(self) -> None:
        J = self.n_clusters
        if np.unique(self.cluster).shape[0] != J:
            raise ValueError("cluster ids must be 0..J-1 with no gaps")
        arm_c = self.cluster_arm()
        w_c = np.zeros(J)
        w_c[self.cluster] = self.w
        if np.any(arm_c[self.cluster] != self.arm) or np.any(w_c[self.cluster] != self.w):
            raise ValueError("arm and W must be constant within clusters")
        if np.any(np.isnan(self.y) & self.r):
            raise ValueError("observed cells must not be NaN")

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame({
            "cluster_id": self.cluster, "arm": self.arm, "X": self.x, "W": self.w,
            "Y1": self.y[:, 0], "Y2": self.y[:, 1], "R1": self.r[:, 0], "R2": self.r[:, 1],
        })


def variance_components_from_icc(icc: float, total_var: float) -> tuple[float, float]:
    """Split ``total_var`` into (between-cluster, within-cluster) parts with ratio ``icc``."""
    if not 0.0 <= icc < 1.0:
        raise ValueError("icc must lie in [0, 1)")
    if not total_var > 0:
        raise ValueError("total_var must be positive")
    return icc * total_var, (1.0 - icc) * total_var


def draw_cluster_sizes(design: Design, stream) -> np.ndarray:
    """Cluster sizes; gamma sizes use shape 1/cv^2 and scale mean*cv^2, rounded, floored at 2."""
    J = design.n_clusters
    if design.size_rule == "fixed":
        return np.full(J, design.cluster_size, dtype=np.int64)
    cv2 = design.size_cv**2
    raw = draw_gamma(1.0 / cv2, design.size_mean * cv2, stream, size=J)
    return np.maximum(np.rint(raw), 2).astype(np.int64)


def generate_dataset(config: ScenarioConfig, stream) -> TrialDataset:
    """Fully observed bivariate outcomes; the first half of the clusters form the control arm."""
    gen = as_generator(stream)
    g = config.gen
    sigma, psi = g.covariances(config.icc)
    J = config.design.n_clusters
    sizes = draw_cluster_sizes(config.design, gen)
    cluster = np.repeat(np.arange(J), sizes)
    arm_c = (np.arange(J) >= J // 2).astype(np.int8)
    w_c = gen.standard_normal(J)
    b = draw_mvn(np.zeros(2), psi, gen, size=J)
    n = cluster.shape[0]
    x = gen.standard_normal(n)
    e = draw_mvn(np.zeros(2), sigma, gen, size=n)
    arm = arm_c[cluster]
    w = w_c[cluster]
    y = (
        np.asarray(g.intercepts)
        + np.outer(arm, g.beta)
        + np.outer(x, g.nu_x)
        + np.outer(w, g.nu_w)
        + b[cluster]
        + e
    )
    return TrialDataset(cluster, arm, x, w, y, np.ones((n, 2), dtype=bool))


def _norm_icc(value) -> tuple[float, float]:
    if isinstance(value, str):
        if value not in ICC_LEVELS:
            raise ValueError(f"unknown factor level: icc={value!r}")
        return ICC_LEVELS[value]
    pair = tuple(float(v) for v in value)
    if pair not in ICC_LEVELS.values():
        raise ValueError(f"unknown factor level: icc={pair}")
    return pair


def _norm_design(value) -> Design:
    if isinstance(value, Design):
        return value
    key = _DESIGN_ALIASES.get(str(value), str(value))
    if key not in DESIGNS:
        raise ValueError(f"unknown factor level: design={value!r}")
    return DESIGNS[key]


def _norm_choice(name: str, value, levels, aliases=None) -> str:
    key = (aliases or {}).get(str(value), str(value))
    if key not in levels:
        raise ValueError(f"unknown factor level: {name}={value!r}")
    return key


def _levels(overrides: Mapping, key: str, default: Iterable, norm) -> list:
    if key not in overrides or overrides[key] is None:
        return list(default)
    values = overrides[key]
    if isinstance(values, (str, Design)) or (
        key == "icc" and len(values) == 2 and all(isinstance(v, (int, float)) for v in values)
    ):
        values = [values]
    return [norm(v) for v in values]


FACTOR_ORDER = ("mechanism", "design", "eta", "nonresponse", "icc")


def build_scenario_grid(master_seed: int, overrides: Mapping | None = None, **run) -> list[ScenarioConfig]:
    """Full factorial grid (192 cells), optionally restricted to subsets of the levels.

    ``scenario_index`` is the cell's position in the unrestricted grid, so a
    scenario keeps its random streams whether it is run alone or with others.
    Extra keyword arguments (``N``, ``M``, ``methods``, ``gen`` ...) are passed
    to every :class:`ScenarioConfig`.
    """
    overrides = dict(overrides or {})
    unknown = set(overrides) - set(FACTOR_ORDER)
    if unknown:
        raise ValueError(f"unknown factor(s): {sorted(unknown)}")
    chosen = {
        "mechanism": _levels(overrides, "mechanism", MECHANISMS,
                             lambda v: _norm_choice("mechanism", v, MECHANISMS, _MECHANISM_ALIASES)),
        "design": [d.label for d in _levels(overrides, "design", DESIGNS.values(), _norm_design)],
        "eta": _levels(overrides, "eta", ETA_SETTINGS, lambda v: _norm_choice("eta", v, ETA_SETTINGS)),
        "nonresponse": _levels(overrides, "nonresponse", NONRESPONSE_SETTINGS,
                               lambda v: _norm_choice("nonresponse", v, NONRESPONSE_SETTINGS)),
        "icc": _levels(overrides, "icc", ICC_LEVELS.values(), _norm_icc),
    }
    grid = []
    full = itertools.product(MECHANISMS, DESIGNS, ETA_SETTINGS, NONRESPONSE_SETTINGS, ICC_LEVELS.values())
    for index, (mech, design, eta, nr, icc) in enumerate(full):
        if (mech in chosen["mechanism"] and design in chosen["design"] and eta in chosen["eta"]
                and nr in chosen["nonresponse"] and icc in chosen["icc"]):
            grid.append(ScenarioConfig(
                scenario_index=index, icc=icc, design=DESIGNS[design], mechanism=mech,
                eta=eta, nonresponse=nr, master_seed=master_seed, **run,
            ))
    return grid
