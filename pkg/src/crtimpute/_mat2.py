"""Closed-form helpers for stacks of 2x2 symmetric matrices (shape ``(..., 2, 2)``)."""

from __future__ import annotations

import numpy as np


def det2(a: np.ndarray) -> np.ndarray:
    return a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]


def inv2(a: np.ndarray) -> np.ndarray:
    d = det2(a)
    out = np.empty_like(a)
    out[..., 0, 0] = a[..., 1, 1] / d
    out[..., 1, 1] = a[..., 0, 0] / d
    out[..., 0, 1] = -a[..., 0, 1] / d
    out[..., 1, 0] = -a[..., 1, 0] / d
    return out


def chol2(a: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor; NaN entries signal a non-PD input."""
    out = np.zeros_like(a)
    with np.errstate(invalid="ignore"):
        l00 = np.sqrt(a[..., 0, 0])
        l10 = a[..., 1, 0] / l00
        l11 = np.sqrt(a[..., 1, 1] - l10 * l10)
    out[..., 0, 0] = l00
    out[..., 1, 0] = l10
    out[..., 1, 1] = l11
    return out


def is_pd2(a: np.ndarray) -> bool:
    a = np.asarray(a)
    return bool(np.all(a[..., 0, 0] > 0) and np.all(det2(a) > 0))


def from_chol_params(theta) -> np.ndarray:
    """2x2 covariance from log-Cholesky parameters ``(log l00, l10, log l11)``."""
    l00 = np.exp(theta[0])
    l11 = np.exp(theta[2])
    l10 = theta[1]
    return np.array([[l00 * l00, l00 * l10], [l00 * l10, l10 * l10 + l11 * l11]])


def to_chol_params(cov: np.ndarray) -> np.ndarray:
    l = np.linalg.cholesky(cov)
    return np.array([np.log(l[0, 0]), l[1, 0], np.log(l[1, 1])])


def cov2(sd1: float, sd2: float, corr: float) -> np.ndarray:
    c = corr * sd1 * sd2
    return np.array([[sd1 * sd1, c], [c, sd2 * sd2]])
