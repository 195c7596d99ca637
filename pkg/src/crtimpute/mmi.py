"""Multilevel imputation with a Gibbs sampler for the bivariate random-intercept model.

Imputation model for individual i in cluster j::

    y_ij = Gamma' x_ij + b_j + e_ij,   b_j ~ N(0, Psi),  e_ij ~ N(0, Sigma)

with ``x_ij = (1, arm, X, W)``, a flat prior on Gamma and inverse-Wishart
priors on Sigma and Psi.  One sweep updates, in order: the missing outcome
cells, the random effects, Gamma, Sigma, Psi.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from . import _mat2
from .datagen import TrialDataset
from .fcs import ImputedSet
from .rngkit import as_generator

_MAX_PD_RETRIES = 50


class SamplerDegenerate(RuntimeError):
    pass


@dataclass(frozen=True)
class MmiPriors:
    sigma_df: float = 2.0
    sigma_scale: tuple = ((1.0, 0.0), (0.0, 1.0))
    psi_df: float = 2.0
    psi_scale: tuple = ((1.0, 0.0), (0.0, 1.0))

    def __post_init__(self):
        if self.sigma_df < 2 or self.psi_df < 2:
            raise ValueError("prior df must be at least 2")


def conditional_normal_impute(mu, cov, observed_index: int, observed_value: float, stream) -> float:
    """Draw the unobserved component of a bivariate normal given the observed one."""
    cov = np.asarray(cov, dtype=float)
    if not (cov[0, 0] > 0 and cov[1, 1] > 0 and _mat2.det2(cov) >= -1e-12 * cov[0, 0] * cov[1, 1]):
        raise ValueError("conditional_normal_impute needs a positive-definite covariance")
    b = observed_index
    a = 1 - b
    mean = mu[a] + cov[a, b] / cov[b, b] * (observed_value - mu[b])
    var = max(cov[a, a] - cov[a, b] ** 2 / cov[b, b], 0.0)
    return float(mean + np.sqrt(var) * as_generator(stream).standard_normal())


@njit(cache=True)
def _chol(a00, a01, a11):
    l00 = np.sqrt(a00)
    l10 = a01 / l00
    return l00, l10, np.sqrt(a11 - l10 * l10)


@njit(cache=True)
def _inv(a00, a01, a11):
    d = a00 * a11 - a01 * a01
    return a11 / d, -a01 / d, a00 / d


@njit(cache=True)
def _draw_iw(gen, df, s, out):
    """2x2 inverse-Wishart (Bartlett) into ``out``; False after repeated non-PD draws."""
    i00, i01, i11 = _inv(s[0, 0], s[0, 1], s[1, 1])
    l00, l10, l11 = _chol(i00, i01, i11)
    for _ in range(_MAX_PD_RETRIES):
        a00 = np.sqrt(gen.chisquare(df))
        a11 = np.sqrt(gen.chisquare(df - 1.0))
        a10 = gen.standard_normal()
        m00 = l00 * a00
        m10 = l10 * a00 + l11 * a10
        m11 = l11 * a11
        w00 = m00 * m00
        w01 = m00 * m10
        w11 = m10 * m10 + m11 * m11
        v00, v01, v11 = _inv(w00, w01, w11)
        if np.isfinite(v00) and np.isfinite(v01) and np.isfinite(v11) and v00 > 0 and v00 * v11 - v01 * v01 > 0:
            out[0, 0] = v00
            out[0, 1] = v01
            out[1, 0] = v01
            out[1, 1] = v11
            return True
    return False


@njit(cache=True)
def _sweeps(gen, n_sweeps, X, hat, xtx_chol, cl, nj, only1, only2, both, y, gamma, b,
            sigma, psi, sigma_df, sigma_scale, psi_df, psi_scale):
    n, p = X.shape
    J = nj.shape[0]
    mu = np.empty(2)
    sums = np.empty((J, 2))
    g_hat = np.empty((p, 2))
    z = np.empty((p, 2))
    scale = np.empty((2, 2))
    for _ in range(n_sweeps):
        s00, s01, s11 = sigma[0, 0], sigma[0, 1], sigma[1, 1]
        l00, l10, l11 = _chol(s00, s01, s11)
        # 1. missing outcome cells
        for i in both:
            for l in range(2):
                mu[l] = b[cl[i], l]
                for k in range(p):
                    mu[l] += X[i, k] * gamma[k, l]
            z0 = gen.standard_normal()
            z1 = gen.standard_normal()
            y[i, 0] = mu[0] + l00 * z0
            y[i, 1] = mu[1] + l10 * z0 + l11 * z1
        for a in range(2):
            rows = only1 if a == 0 else only2
            o = 1 - a
            slope = sigma[a, o] / sigma[o, o]
            sd = np.sqrt(max(sigma[a, a] - slope * sigma[a, o], 0.0))
            for i in rows:
                for l in range(2):
                    mu[l] = b[cl[i], l]
                    for k in range(p):
                        mu[l] += X[i, k] * gamma[k, l]
                y[i, a] = mu[a] + slope * (y[i, o] - mu[o]) + sd * gen.standard_normal()
        # 2. random effects
        sums[:] = 0.0
        for i in range(n):
            for l in range(2):
                r = y[i, l]
                for k in range(p):
                    r -= X[i, k] * gamma[k, l]
                sums[cl[i], l] += r
        si00, si01, si11 = _inv(s00, s01, s11)
        pi00, pi01, pi11 = _inv(psi[0, 0], psi[0, 1], psi[1, 1])
        for j in range(J):
            c00, c01, c11 = _inv(nj[j] * si00 + pi00, nj[j] * si01 + pi01, nj[j] * si11 + pi11)
            t0 = si00 * sums[j, 0] + si01 * sums[j, 1]
            t1 = si01 * sums[j, 0] + si11 * sums[j, 1]
            m0 = c00 * t0 + c01 * t1
            m1 = c01 * t0 + c11 * t1
            k00, k10, k11 = _chol(c00, c01, c11)
            z0 = gen.standard_normal()
            z1 = gen.standard_normal()
            b[j, 0] = m0 + k00 * z0
            b[j, 1] = m1 + k10 * z0 + k11 * z1
        # 3. fixed effects given y - b
        g_hat[:] = 0.0
        for i in range(n):
            for l in range(2):
                r = y[i, l] - b[cl[i], l]
                for k in range(p):
                    g_hat[k, l] += hat[k, i] * r
        for k in range(p):
            for l in range(2):
                z[k, l] = gen.standard_normal()
        for k in range(p):
            u0 = 0.0
            u1 = 0.0
            for m in range(k + 1):
                u0 += xtx_chol[k, m] * z[m, 0]
                u1 += xtx_chol[k, m] * z[m, 1]
            gamma[k, 0] = g_hat[k, 0] + u0 * l00
            gamma[k, 1] = g_hat[k, 1] + u0 * l10 + u1 * l11
        # 4. level-1 covariance
        e00 = 0.0
        e01 = 0.0
        e11 = 0.0
        for i in range(n):
            r0 = y[i, 0] - b[cl[i], 0]
            r1 = y[i, 1] - b[cl[i], 1]
            for k in range(p):
                r0 -= X[i, k] * gamma[k, 0]
                r1 -= X[i, k] * gamma[k, 1]
            e00 += r0 * r0
            e01 += r0 * r1
            e11 += r1 * r1
        scale[0, 0] = sigma_scale[0, 0] + e00
        scale[0, 1] = sigma_scale[0, 1] + e01
        scale[1, 0] = scale[0, 1]
        scale[1, 1] = sigma_scale[1, 1] + e11
        if not _draw_iw(gen, sigma_df + n, scale, sigma):
            return False
        # 5. level-2 covariance
        b00 = 0.0
        b01 = 0.0
        b11 = 0.0
        for j in range(J):
            b00 += b[j, 0] * b[j, 0]
            b01 += b[j, 0] * b[j, 1]
            b11 += b[j, 1] * b[j, 1]
        scale[0, 0] = psi_scale[0, 0] + b00
        scale[0, 1] = psi_scale[0, 1] + b01
        scale[1, 0] = scale[0, 1]
        scale[1, 1] = psi_scale[1, 1] + b11
        if not _draw_iw(gen, psi_df + J, scale, psi):
            return False
    return True


class PanSampler:
    """Gibbs sampler state for one incomplete dataset.

    ``init`` may supply starting values ``{"gamma", "b", "sigma", "psi"}``;
    otherwise they come from per-outcome least squares on the observed rows.
    """

    def __init__(self, data: TrialDataset, priors: MmiPriors | None = None, stream=None, init: dict | None = None):
        self.data = data
        self.priors = priors or MmiPriors()
        self.gen = as_generator(stream)
        self.sigma_scale = np.asarray(self.priors.sigma_scale, dtype=float)
        self.psi_scale = np.asarray(self.priors.psi_scale, dtype=float)
        n, J = data.n, data.n_clusters
        self.cl = np.ascontiguousarray(data.cluster, dtype=np.int64)
        self.J = J
        self.nj = np.bincount(self.cl, minlength=J).astype(float)
        if np.any(self.nj == 0):
            raise ValueError("every cluster needs at least one row")
        self.X = np.column_stack([np.ones(n), data.arm.astype(float), data.x, data.w])
        for l in range(2):
            if np.linalg.matrix_rank(self.X[data.r[:, l]]) < self.X.shape[1]:
                raise ValueError("fixed-effect design is rank deficient on observed rows")
        xtx_inv = np.linalg.inv(self.X.T @ self.X)
        self.hat = np.ascontiguousarray(xtx_inv @ self.X.T)
        self.xtx_chol = np.linalg.cholesky(xtx_inv)
        self.only1 = np.flatnonzero(~data.r[:, 0] & data.r[:, 1])  # Y1 missing, Y2 observed
        self.only2 = np.flatnonzero(data.r[:, 0] & ~data.r[:, 1])
        self.both = np.flatnonzero(~data.r[:, 0] & ~data.r[:, 1])
        self.y = data.y.copy()
        if init is None:
            init = self._default_init()
        self.gamma = np.array(init["gamma"], dtype=float, order="C")
        self.b = np.array(init["b"], dtype=float, order="C")
        self.sigma = np.array(init["sigma"], dtype=float, order="C")
        self.psi = np.array(init["psi"], dtype=float, order="C")
        mu = self.X @ self.gamma + self.b[self.cl]
        missing = ~data.r
        self.y[missing] = mu[missing]
        self.n_iter = 0

    def _default_init(self) -> dict:
        r = self.data.r
        gamma = np.zeros((self.X.shape[1], 2))
        resid = np.zeros((self.data.n, 2))
        for l in range(2):
            obs = r[:, l]
            gamma[:, l] = np.linalg.lstsq(self.X[obs], self.data.y[obs, l], rcond=None)[0]
            resid[obs, l] = self.data.y[obs, l] - self.X[obs] @ gamma[:, l]
        var = np.array([resid[r[:, l], l].var() for l in range(2)])
        var = np.maximum(var, 1e-6)
        return {
            "gamma": gamma,
            "b": np.zeros((self.J, 2)),
            "sigma": np.diag(0.8 * var),
            "psi": np.diag(0.2 * var),
        }

    def run(self, n: int) -> None:
        """Advance the chain by ``n`` full sweeps."""
        ok = _sweeps(
            self.gen, int(n), self.X, self.hat, self.xtx_chol, self.cl, self.nj,
            self.only1, self.only2, self.both, self.y, self.gamma, self.b,
            self.sigma, self.psi, float(self.priors.sigma_df), self.sigma_scale,
            float(self.priors.psi_df), self.psi_scale,
        )
        if not ok:
            raise SamplerDegenerate("sampler degenerate")
        self.n_iter += n

    def step(self) -> None:
        self.run(1)


def pan_gibbs_impute(data: TrialDataset, priors: MmiPriors | None = None, M: int = 10,
                     burn_in: int = 500, thin: int = 100, stream=None) -> ImputedSet:
    """M imputations from one chain: the first after ``burn_in`` sweeps, then every ``thin``."""
    if data.r.all():
        return ImputedSet("MMI", [data.copy() for _ in range(M)])
    sampler = PanSampler(data, priors, stream)
    sampler.run(burn_in)
    out = [data.with_y(sampler.y.copy())]
    for _ in range(M - 1):
        sampler.run(thin)
        out.append(data.with_y(sampler.y.copy()))
    return ImputedSet("MMI", out, info={"iterations": sampler.n_iter})
