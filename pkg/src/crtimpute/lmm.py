"""Maximum-likelihood fit of the bivariate random-intercept model with a treatment effect.

Model, for individual i in cluster j with arm t_j::

    Y_lij = b_l0 + b_l * t_j + u_lj + e_lij,   l = 1, 2
    (e_1, e_2) ~ N(0, Sigma),  (u_1, u_2) ~ N(0, Psi)

Stacking a cluster's rows, Var = I_n (x) Sigma + J_n (x) Psi.  The all-ones
matrix J_n has eigenvalue n on the cluster-mean direction and 0 elsewhere,
so the likelihood only needs each cluster's size, arm and mean vector plus
the pooled within-cluster cross-product matrix: O(1) work per cluster after
a single pass over the rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import optimize

from . import _mat2
from .datagen import TrialDataset

_LOG2PI = np.log(2.0 * np.pi)
VAR_FLOOR = 1e-10
_LOG_DIAG_FLOOR = 0.5 * np.log(VAR_FLOOR)
# parameter layout: log-Cholesky of Sigma (3) then of Psi (3)
_BOUNDS = [(_LOG_DIAG_FLOOR, None), (None, None), (_LOG_DIAG_FLOOR, None)] * 2


@dataclass
class ClusterStats:
    n: np.ndarray  # (J,) cluster sizes
    x: np.ndarray  # (J, 2) cluster-level design [1, arm]
    ybar: np.ndarray  # (J, 2) cluster means
    s_within: np.ndarray  # (2, 2) pooled within-cluster cross-products
    N: int
    J: int

    @classmethod
    def from_data(cls, data: TrialDataset) -> "ClusterStats":
        if np.isnan(data.y).any():
            raise ValueError("model fitting needs a completed dataset")
        J = data.n_clusters
        n = np.bincount(data.cluster, minlength=J).astype(float)
        sums = np.stack([np.bincount(data.cluster, weights=data.y[:, l], minlength=J) for l in range(2)], 1)
        ybar = sums / n[:, None]
        dev = data.y - ybar[data.cluster]
        x = np.column_stack([np.ones(J), data.cluster_arm().astype(float)])
        return cls(n, x, ybar, dev.T @ dev, data.n, J)


@dataclass
class FitResult:
    beta_hat: np.ndarray  # treatment effects (b_1, b_2)
    intercepts: np.ndarray
    beta_cov: np.ndarray  # 2x2 covariance of beta_hat
    varcomp: dict  # sigma1, sigma2, rho, tau1, tau2, phi
    sigma: np.ndarray
    psi: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    n_clusters: int
    theta: np.ndarray = field(repr=False)
    fixed_cov: np.ndarray = field(repr=False)  # 4x4, order (b_10, b_1, b_20, b_2)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.beta_cov))


def _unpack(theta):
    return _mat2.from_chol_params(theta[:3]), _mat2.from_chol_params(theta[3:])


def _gls(sigma, psi, st: ClusterStats):
    A = sigma + st.n[:, None, None] * psi
    detA = _mat2.det2(A)
    if np.any(detA <= 0) or np.any(A[:, 0, 0] <= 0):
        return None
    Ainv = _mat2.inv2(A)
    nA = st.n[:, None, None] * Ainv
    info = np.einsum("jlm,ja,jc->lamc", nA, st.x, st.x).reshape(4, 4)
    score = np.einsum("jlm,jm,ja->la", nA, st.ybar, st.x).reshape(4)
    return A, detA, Ainv, nA, info, score


def _loglik_at(sigma, psi, beta, st: ClusterStats, parts=None):
    parts = parts or _gls(sigma, psi, st)
    det_s = _mat2.det2(sigma)
    if parts is None or det_s <= 0 or sigma[0, 0] <= 0:
        return -np.inf, None
    A, detA, Ainv, nA, _, _ = parts
    sinv = _mat2.inv2(sigma)
    resid = st.ybar - st.x @ beta.reshape(2, 2).T
    quad = np.einsum("jl,jlm,jm->", resid, nA, resid)
    ll = -0.5 * (
        2 * st.N * _LOG2PI
        + (st.N - st.J) * np.log(det_s)
        + np.sum(sinv * st.s_within)
        + np.sum(np.log(detA))
        + quad
    )
    return ll, (sinv, Ainv, resid)


def marginal_loglik(params, beta, data: TrialDataset | ClusterStats) -> float:
    """Exact Gaussian log-likelihood.

    ``params`` are the log-Cholesky parameters of Sigma then Psi; ``beta`` is
    ordered ``(b_10, b_1, b_20, b_2)``.  Returns ``-inf`` where a cluster
    covariance is not positive definite.
    """
    st = data if isinstance(data, ClusterStats) else ClusterStats.from_data(data)
    sigma, psi = _unpack(np.asarray(params, dtype=float))
    ll, _ = _loglik_at(sigma, psi, np.asarray(beta, dtype=float), st)
    return float(ll)


def loglik_from_covariances(sigma, psi, beta, data: TrialDataset | ClusterStats) -> float:
    st = data if isinstance(data, ClusterStats) else ClusterStats.from_data(data)
    ll, _ = _loglik_at(np.asarray(sigma, float), np.asarray(psi, float), np.asarray(beta, float), st)
    return float(ll)


@njit(cache=True)
def _profile_kernel(theta, n, arm, ybar, s_within, N, grad):
    """Negative profile log-likelihood; writes its gradient in theta into ``grad``."""
    J = n.shape[0]
    a0, c0, d0 = np.exp(theta[0]), theta[1], np.exp(theta[2])
    a1, c1, d1 = np.exp(theta[3]), theta[4], np.exp(theta[5])
    s00, s01, s11 = a0 * a0, a0 * c0, c0 * c0 + d0 * d0
    p00, p01, p11 = a1 * a1, a1 * c1, c1 * c1 + d1 * d1
    det_s = s00 * s11 - s01 * s01
    if not det_s > 0:
        return np.inf
    info = np.zeros((4, 4))
    score = np.zeros(4)
    x = np.empty(2)
    ainv = np.empty((2, 2))
    logdet_a = 0.0
    for j in range(J):
        q00 = s00 + n[j] * p00
        q01 = s01 + n[j] * p01
        q11 = s11 + n[j] * p11
        det_a = q00 * q11 - q01 * q01
        if not (det_a > 0 and q00 > 0):
            return np.inf
        logdet_a += np.log(det_a)
        ainv[0, 0] = n[j] * q11 / det_a
        ainv[0, 1] = -n[j] * q01 / det_a
        ainv[1, 0] = ainv[0, 1]
        ainv[1, 1] = n[j] * q00 / det_a
        x[0] = 1.0
        x[1] = arm[j]
        for l in range(2):
            for a in range(2):
                for m in range(2):
                    for c in range(2):
                        info[2 * l + a, 2 * m + c] += ainv[l, m] * x[a] * x[c]
                    score[2 * l + a] += ainv[l, m] * ybar[j, m] * x[a]
    beta = np.linalg.solve(info, score)
    si00, si01, si11 = s11 / det_s, -s01 / det_s, s00 / det_s
    quad = 0.0
    g_s = np.zeros((2, 2))
    g_p = np.zeros((2, 2))
    for j in range(J):
        q00 = s00 + n[j] * p00
        q01 = s01 + n[j] * p01
        q11 = s11 + n[j] * p11
        det_a = q00 * q11 - q01 * q01
        i00, i01, i11 = q11 / det_a, -q01 / det_a, q00 / det_a
        r0 = ybar[j, 0] - beta[0] - beta[1] * arm[j]
        r1 = ybar[j, 1] - beta[2] - beta[3] * arm[j]
        u0 = i00 * r0 + i01 * r1
        u1 = i01 * r0 + i11 * r1
        quad += n[j] * (r0 * u0 + r1 * u1)
        nj = n[j]
        g_s[0, 0] += i00 - nj * u0 * u0
        g_s[0, 1] += i01 - nj * u0 * u1
        g_s[1, 1] += i11 - nj * u1 * u1
        g_p[0, 0] += nj * (i00 - nj * u0 * u0)
        g_p[0, 1] += nj * (i01 - nj * u0 * u1)
        g_p[1, 1] += nj * (i11 - nj * u1 * u1)
    w00, w01, w11 = s_within[0, 0], s_within[0, 1], s_within[1, 1]
    trace = si00 * w00 + 2.0 * si01 * w01 + si11 * w11
    nll = 0.5 * (2.0 * N * np.log(2.0 * np.pi) + (N - J) * np.log(det_s) + trace + logdet_a + quad)
    # Sigma^-1 W Sigma^-1
    m00 = si00 * w00 + si01 * w01
    m01 = si00 * w01 + si01 * w11
    m10 = si01 * w00 + si11 * w01
    m11 = si01 * w01 + si11 * w11
    sws00 = m00 * si00 + m01 * si01
    sws01 = m00 * si01 + m01 * si11
    sws11 = m10 * si01 + m11 * si11
    # derivative of the negative log-likelihood with respect to each covariance
    h_s00 = 0.5 * ((N - J) * si00 - sws00 + g_s[0, 0])
    h_s01 = 0.5 * ((N - J) * si01 - sws01 + g_s[0, 1])
    h_s11 = 0.5 * ((N - J) * si11 - sws11 + g_s[1, 1])
    h_p00 = 0.5 * g_p[0, 0]
    h_p01 = 0.5 * g_p[0, 1]
    h_p11 = 0.5 * g_p[1, 1]
    # chain rule through the log-Cholesky factors: d/dL = 2 H L
    grad[0] = 2.0 * (h_s00 * a0 + h_s01 * c0) * a0
    grad[1] = 2.0 * (h_s01 * a0 + h_s11 * c0)
    grad[2] = 2.0 * h_s11 * d0 * d0
    grad[3] = 2.0 * (h_p00 * a1 + h_p01 * c1) * a1
    grad[4] = 2.0 * (h_p01 * a1 + h_p11 * c1)
    grad[5] = 2.0 * h_p11 * d1 * d1
    return nll


def _profile(theta, st: ClusterStats):
    """Negative profile log-likelihood and its gradient in theta."""
    grad = np.zeros(6)
    f = _profile_kernel(np.asarray(theta, dtype=float), st.n, st.x[:, 1].copy(), st.ybar, st.s_within,
                        float(st.N), grad)
    if not np.isfinite(f):
        return np.inf, np.zeros(6)
    return f, grad


def profile_loglik(theta, data: TrialDataset | ClusterStats) -> float:
    """Log-likelihood with the fixed effects at their GLS values for these variance parameters."""
    st = data if isinstance(data, ClusterStats) else ClusterStats.from_data(data)
    return -_profile(np.asarray(theta, dtype=float), st)[0]


def _clip_psd(m: np.ndarray, floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (m + m.T))
    return (vecs * np.maximum(vals, floor)) @ vecs.T


def moment_start(st: ClusterStats) -> np.ndarray:
    """One-way ANOVA style starting values (exact ML for balanced, interior cases)."""
    scale = max(float(np.trace(st.s_within)) / max(st.N, 1), 1e-6)
    floor = 1e-4 * scale
    sigma = st.s_within / max(st.N - st.J, 1)
    mu = np.zeros((st.J, 2))
    for arm in (0, 1):
        sel = st.x[:, 1] == arm
        mu[sel] = np.average(st.ybar[sel], axis=0, weights=st.n[sel])
    r = st.ybar - mu
    a_hat = np.einsum("j,jl,jm->lm", st.n, r, r) / st.J
    psi = (a_hat - sigma) / st.n.mean()
    sigma = _clip_psd(sigma, floor)
    psi = _clip_psd(psi, floor)
    return np.concatenate([_mat2.to_chol_params(sigma), _mat2.to_chol_params(psi)])


def _fallback_start(st: ClusterStats) -> np.ndarray:
    total = st.s_within / max(st.N, 1) + np.cov(st.ybar.T) if st.J > 2 else np.eye(2)
    d = np.diag(np.maximum(np.diag(total), 1e-6))
    return np.concatenate([_mat2.to_chol_params(0.5 * d), _mat2.to_chol_params(0.5 * d)])


def _projected_grad_norm(theta, g) -> float:
    at_floor = np.array([b[0] is not None and t <= b[0] + 1e-8 for t, b in zip(theta, _BOUNDS)])
    return float(np.linalg.norm(np.where(at_floor & (g > 0), 0.0, g)))


def _minimise(theta0, st, max_iter, tol):
    f0, g0 = _profile(theta0, st)
    # moment estimates are the exact optimum for balanced data away from the boundary
    if np.isfinite(f0) and _projected_grad_norm(theta0, g0) / max(st.N, 1) < 1e-9:
        return theta0, True, 0
    res = optimize.minimize(
        _profile, theta0, args=(st,), jac=True, method="L-BFGS-B", bounds=_BOUNDS,
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-7},
    )
    theta = np.asarray(res.x)
    _, g = _profile(theta, st)
    ok = bool(res.success) or _projected_grad_norm(theta, g) / max(st.N, 1) < 1e-5
    return theta, ok, int(res.nit)


def fit_bivariate_lmm(data: TrialDataset, max_iter: int = 500, tol: float = 1e-8) -> FitResult:
    """ML fit with the fixed effects profiled out by GLS.

    Variance parameters are optimised on the log-Cholesky scale by L-BFGS-B
    with analytic gradients, starting from moment estimates and restarting
    once from a diffuse start if the first run fails.  ``converged=False``
    is reported, not raised.
    """
    st = ClusterStats.from_data(data)
    arms = st.x[:, 1]
    if min(np.sum(arms == 0), np.sum(arms == 1)) < 2:
        raise ValueError("arm has too few clusters")
    theta, ok, nit = _minimise(moment_start(st), st, max_iter, tol)
    if not ok:
        theta2, ok2, nit2 = _minimise(_fallback_start(st), st, max_iter, tol)
        nit += nit2
        if ok2 or _profile(theta2, st)[0] < _profile(theta, st)[0]:
            theta, ok = theta2, ok2
    sigma, psi = _unpack(theta)
    parts = _gls(sigma, psi, st)
    info, score = parts[4], parts[5]
    cov = np.linalg.inv(info)
    beta = cov @ score
    ll, _ = _loglik_at(sigma, psi, beta, st, parts)
    s1, s2 = np.sqrt(np.diag(sigma))
    t1, t2 = np.sqrt(np.diag(psi))
    varcomp = {
        "sigma1": s1, "sigma2": s2, "rho": sigma[0, 1] / (s1 * s2),
        "tau1": t1, "tau2": t2, "phi": psi[0, 1] / (t1 * t2),
    }
    idx = [1, 3]
    return FitResult(
        beta_hat=beta[idx], intercepts=beta[[0, 2]], beta_cov=cov[np.ix_(idx, idx)],
        varcomp=varcomp, sigma=sigma, psi=psi, loglik=float(ll), converged=ok,
        n_iter=nit, n_clusters=st.J, theta=theta, fixed_cov=cov,
    )


def cca_prepare(data: TrialDataset) -> TrialDataset:
    """Keep individuals with both outcomes observed; drop and relabel emptied clusters."""
    keep = data.r.all(axis=1)
    J = data.n_clusters
    kept_clusters = np.unique(data.cluster[keep])
    arm_c = data.cluster_arm()[kept_clusters]
    if min(np.sum(arm_c == 0), np.sum(arm_c == 1)) < 2:
        raise ValueError("CCA infeasible")
    relabel = np.full(J, -1)
    relabel[kept_clusters] = np.arange(kept_clusters.size)
    out = TrialDataset(
        relabel[data.cluster[keep]], data.arm[keep].copy(), data.x[keep].copy(),
        data.w[keep].copy(), data.y[keep].copy(), data.r[keep].copy(),
        n_dropped_clusters=J - kept_clusters.size,
        n_empty_cluster_warnings=data.n_empty_cluster_warnings,
    )
    return out
