"""Chained-equations imputation: single-level (SMI) and cluster fixed effects (FMI).

Each incomplete outcome is regressed on its predictors by Bayesian normal
linear regression under the standard non-informative prior; missing values
are drawn from the posterior predictive given a parameter draw.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from .datagen import TrialDataset
from .rngkit import as_generator

log = logging.getLogger(__name__)


class ImputationError(ValueError):
    pass


@dataclass
class ImputedSet:
    """M completed copies of one dataset produced by one engine."""

    method: str
    datasets: list[TrialDataset]
    dropped_columns: int = 0
    info: dict = field(default_factory=dict)

    @property
    def M(self) -> int:
        return len(self.datasets)

    def __iter__(self):
        return iter(self.datasets)

    def __getitem__(self, m):
        return self.datasets[m]


@dataclass(frozen=True)
class FcsModelSpec:
    variant: str = "SMI"  # "SMI" or "FMI"
    n_cycles: int = 10
    M: int = 10
    # FMI only: draw cluster effects by within-cluster sweeping instead of
    # factorising the dense indicator design; same posterior, O(n) per draw
    structured: bool = True
    # FMI with a cluster that has no observed value of an outcome: "error", or
    # "drop" its (all-zero) indicator column so the cluster is imputed at the
    # reference level, as collinearity screening in standard FCS software does
    on_empty_cluster: str = "error"

    def __post_init__(self):
        if self.variant not in ("SMI", "FMI"):
            raise ValueError(f"unknown FCS variant {self.variant!r}")
        if self.on_empty_cluster not in ("error", "drop"):
            raise ValueError("on_empty_cluster must be 'error' or 'drop'")
        if self.n_cycles < 5:
            raise ValueError("n_cycles must be at least 5")


def _rank_tol(r_diag: np.ndarray, shape) -> float:
    return max(shape) * np.finfo(float).eps * np.max(np.abs(r_diag), initial=0.0) * 1e3


def _independent_columns(Z: np.ndarray, protected: int) -> np.ndarray:
    """Greedy left-to-right selection of linearly independent columns."""
    nonzero = np.flatnonzero(np.any(Z != 0, axis=0))
    if np.any(nonzero[:protected] != np.arange(min(protected, nonzero.size))) or nonzero.size < protected:
        raise ImputationError("singular imputation design")
    r = np.linalg.qr(Z[:, nonzero], mode="r")
    d = np.abs(np.diag(r))
    if np.all(d > _rank_tol(d, (Z.shape[0], nonzero.size))):
        return nonzero
    keep: list[int] = []
    for c in nonzero:
        cand = keep + [c]
        r = np.linalg.qr(Z[:, cand], mode="r")
        d = np.abs(np.diag(r))
        if d[-1] > _rank_tol(d, Z[:, cand].shape):
            keep.append(c)
        elif c < protected:
            raise ImputationError("singular imputation design")
    return np.array(keep)


def bayes_norm_draw(Z: np.ndarray, y_obs: np.ndarray, stream, protected: int = 0):
    """Posterior draw (beta*, sigma*) for ``y = Z beta + e`` with prior p(beta, s2) ~ 1/s2.

    ``sigma*^2 = SSE / chi2(n - p)`` and ``beta* = beta_hat + sigma* R^{-1} z``
    where ``Z = QR``.  Collinear columns beyond the first ``protected`` ones
    are dropped (their coefficient is returned as 0); collinearity among the
    protected columns raises :class:`ImputationError`.
    """
    gen = as_generator(stream)
    Z = np.asarray(Z, dtype=float)
    y_obs = np.asarray(y_obs, dtype=float)
    n, p = Z.shape
    q, r = np.linalg.qr(Z)
    d = np.abs(np.diag(r))
    cols = np.arange(p)
    if np.any(d <= _rank_tol(d, Z.shape)):
        cols = _independent_columns(Z, protected)
        log.debug("dropping %d collinear imputation columns", p - cols.size)
        q, r = np.linalg.qr(Z[:, cols])
    k = cols.size
    if n <= k:
        raise ImputationError("too few observed rows")
    r_inv = np.linalg.inv(r)
    qty = q.T @ y_obs
    beta_hat = r_inv @ qty
    resid = y_obs - q @ qty
    sse = float(resid @ resid)
    sigma = np.sqrt(sse / gen.chisquare(n - k))
    beta = beta_hat + sigma * (r_inv @ gen.standard_normal(k))
    full = np.zeros(p)
    full[cols] = beta
    return full, sigma


def fixed_cluster_draw(cluster, V, y, n_clusters: int, stream, on_empty: str = "error"):
    """Posterior draw for ``y = alpha[cluster] + V gamma + e`` under a flat prior.

    Equivalent to :func:`bayes_norm_draw` on the intercept plus ``J-1``
    indicator design: gamma is drawn from the within-cluster regression and
    each cluster effect from ``N(ybar_j - vbar_j' gamma, sigma^2 / n_j)``.
    Returns ``(alpha*, gamma*, sigma*)``.

    With ``on_empty="drop"`` a cluster without observations takes the draw of
    the reference cluster, as the dense design does once the all-zero
    indicator is removed: cluster 0, or the last non-empty cluster when
    cluster 0 itself is empty (its indicator is then the one found collinear
    with the intercept).
    """
    gen = as_generator(stream)
    nj = np.bincount(cluster, minlength=n_clusters).astype(float)
    if np.any(nj == 0):
        if on_empty != "drop":
            raise ImputationError("empty cluster under FMI")
        present = np.flatnonzero(nj > 0)
        relabel = np.full(n_clusters, -1)
        relabel[present] = np.arange(present.size)
        a, gamma, sigma = fixed_cluster_draw(relabel[cluster], V, y, present.size, gen)
        ref = 0 if nj[0] > 0 else present[-1]
        alpha = np.empty(n_clusters)
        alpha[present] = a
        alpha[nj == 0] = alpha[ref]
        return alpha, gamma, sigma
    k = V.shape[1]
    dof = y.shape[0] - n_clusters - k
    if dof <= 0:
        raise ImputationError("too few observed rows")
    vbar = np.column_stack([np.bincount(cluster, weights=V[:, c], minlength=n_clusters) for c in range(k)]) / nj[:, None]
    ybar = np.bincount(cluster, weights=y, minlength=n_clusters) / nj
    vt = V - vbar[cluster]
    yt = y - ybar[cluster]
    q, r = np.linalg.qr(vt)
    d = np.abs(np.diag(r))
    if np.any(d <= _rank_tol(d, vt.shape)):
        raise ImputationError("singular imputation design")
    r_inv = np.linalg.inv(r)
    qty = q.T @ yt
    resid = yt - q @ qty
    sigma = np.sqrt(float(resid @ resid) / gen.chisquare(dof))
    gamma = r_inv @ (qty + sigma * gen.standard_normal(k))
    alpha = ybar - vbar @ gamma + sigma * gen.standard_normal(n_clusters) / np.sqrt(nj)
    return alpha, gamma, sigma


def _design(data: TrialDataset, variant: str) -> np.ndarray:
    """Predictor columns excluding the other outcome (which is inserted at column 1)."""
    if variant == "SMI":
        return np.column_stack([np.ones(data.n), data.x, data.w, data.arm.astype(float)])
    J = data.n_clusters
    dummies = np.zeros((data.n, J - 1))
    rows = np.flatnonzero(data.cluster > 0)
    dummies[rows, data.cluster[rows] - 1] = 1.0
    return np.column_stack([np.ones(data.n), data.x, dummies])


def _check(data: TrialDataset, spec: FcsModelSpec, n_pred: int) -> bool:
    """Validate the input; True when some cluster has no observed value of an outcome."""
    empty = False
    for l in range(2):
        if data.r[:, l].sum() < n_pred + 2:
            raise ImputationError("too few observed rows")
        observed = np.bincount(data.cluster, weights=data.r[:, l], minlength=data.n_clusters)
        empty |= bool(np.any(observed == 0))
    if empty and spec.variant == "FMI" and spec.on_empty_cluster == "error":
        raise ImputationError("empty cluster under FMI")
    return empty


def fcs_impute(data: TrialDataset, spec: FcsModelSpec, stream) -> ImputedSet:
    """Impute Y1 and Y2 by chained equations; one independent chain per imputation.

    Each chain starts from random draws of the observed values of the same
    outcome and runs ``spec.n_cycles`` cycles over the two outcomes.
    Observed cells are never overwritten.
    """
    base = _design(data, spec.variant)
    n_pred = base.shape[1] + 1
    missing = ~data.r
    if not missing.any():
        return ImputedSet(spec.variant, [data.copy() for _ in range(spec.M)])
    _check(data, spec, n_pred)
    structured = spec.variant == "FMI" and spec.structured
    J = data.n_clusters
    if structured:
        Z = np.column_stack([np.zeros(data.n), data.x])
    else:
        Z = np.column_stack([base[:, :1], np.zeros(data.n), base[:, 1:]])
    col = 0 if structured else 1
    miss_idx = [np.flatnonzero(missing[:, l]) for l in range(2)]
    obs_idx = [np.flatnonzero(~missing[:, l]) for l in range(2)]
    parts = []
    for l in range(2):
        o, mi = obs_idx[l], miss_idx[l]
        parts.append((o, mi, Z[o], Z[mi], data.cluster[o], data.cluster[mi]))
    out = []
    dropped = 0
    for m in range(spec.M):
        gen = as_generator(stream.spawn(f"m{m}") if hasattr(stream, "spawn") else stream)
        y = data.y.copy()
        for l in range(2):
            y[miss_idx[l], l] = gen.choice(data.y[obs_idx[l], l], size=miss_idx[l].size)
        for _ in range(spec.n_cycles):
            for l in range(2):
                o, mi, Z_obs, Z_mis, c_obs, c_mis = parts[l]
                if mi.size == 0:
                    continue
                Z_obs[:, col] = y[o, 1 - l]
                Z_mis[:, col] = y[mi, 1 - l]
                if structured:
                    alpha, gamma, sigma = fixed_cluster_draw(c_obs, Z_obs, y[o, l], J, gen,
                                                             on_empty=spec.on_empty_cluster)
                    mean = alpha[c_mis] + Z_mis @ gamma
                else:
                    beta, sigma = bayes_norm_draw(Z_obs, y[o, l], gen, protected=2)
                    dropped += int(np.sum(beta == 0.0))
                    mean = Z_mis @ beta
                y[mi, l] = mean + sigma * gen.standard_normal(mi.size)
        out.append(data.with_y(y))
    return ImputedSet(spec.variant, out, dropped_columns=dropped)
