"""Rubin's rules for a scalar estimand."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

DF_CAP = 1e7


@dataclass(frozen=True)
class PooledEstimate:
    q_bar: float
    W: float
    B: float
    T: float
    df: float
    ci: tuple[float, float]
    M: int

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.T))


def rubin_pool(estimates, variances, level: float = 0.95, df_com: float | None = None) -> PooledEstimate:
    """Pool M completed-data estimates and their variances.

    Degrees of freedom follow the classical large-sample formula
    ``(M-1) * (1 + W / ((1 + 1/M) B))**2``, capped at 1e7 (and used as the cap
    when B = 0).  Passing ``df_com`` switches to the Barnard-Rubin small-sample
    version with that complete-data df.
    """
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    M = q.shape[0]
    if M < 2:
        raise ValueError("pooling requires M >= 2")
    if u.shape != q.shape:
        raise ValueError("estimates and variances must have the same length")
    if np.any(u < 0):
        raise ValueError("variances must be non-negative")
    # shifted mean: exact when all estimates coincide
    q_bar = float(q[0] + np.mean(q - q[0]))
    W = float(u.mean())
    B = float(q.var(ddof=1))
    T = W + (1.0 + 1.0 / M) * B
    between = (1.0 + 1.0 / M) * B
    # compare on the square-root scale so a negligible B cannot overflow
    if between <= 0 or 1.0 + W / between > np.sqrt(DF_CAP / (M - 1)):
        df = DF_CAP
    else:
        df = (M - 1) * (1.0 + W / between) ** 2
    if df_com is not None:
        lam = between / T if T > 0 else 0.0
        df_obs = (df_com + 1.0) / (df_com + 3.0) * df_com * (1.0 - lam)
        df = df_obs if between <= 0 else 1.0 / (1.0 / df + 1.0 / df_obs)
    half = stats.t.ppf(0.5 + level / 2.0, df) * np.sqrt(T)
    return PooledEstimate(q_bar, W, B, T, float(df), (q_bar - half, q_bar + half), M)
