"""Exact reference computations the Monte Carlo filters are judged against."""

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, linalg


class OracleError(ArithmeticError):
    """Numerical failure inside an oracle computation."""


@dataclass
class StateSpaceMatrices:
    """``X_n = A X_{n-1} + w``, ``w ~ N(0, Q)``; ``Y_n = H X_n + v``, ``v ~ N(0, R)``."""

    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray


def build_state_space(beta, sigma_x, sigma_y, d):
    """Matrix form of the coordinate-ordered linear Gaussian chain.

    The recursion is ``L X_n = B X_{n-1} + eps`` with unit lower-triangular
    ``L`` (``L[j, i] = -beta_{d-j+i+1}`` for ``i < j``) and upper-triangular
    ``B`` (``B[j, i] = beta_{i-j+1}`` for ``i >= j``), 1-based indices.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (d,):
        raise ValueError(f"beta must have length {d}")
    Lm = np.eye(d)
    B = np.zeros((d, d))
    for j in range(d):
        for i in range(d):
            if i < j:
                Lm[j, i] = -beta[d - j + i]
            else:
                B[j, i] = beta[i - j]
    Linv = linalg.solve_triangular(Lm, np.eye(d), lower=True, unit_diagonal=True)
    A = Linv @ B
    Q = sigma_x**2 * (Linv @ Linv.T)
    return StateSpaceMatrices(A=A, Q=0.5 * (Q + Q.T), H=np.eye(d), R=sigma_y**2 * np.eye(d))


def kalman_filter(m, ys, x0):
    """Filtering means, covariances and cumulative log-likelihoods.

    The prior at time 0 is the point mass at ``x0``.  Covariance updates use
    the Joseph form.  Returns ``(means, covs, loglik)`` with ``loglik[k]`` the
    log-density of ``y_{1:k+1}``.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    d = m.A.shape[0]
    mean = np.asarray(x0, dtype=float).reshape(d)
    cov = np.zeros((d, d))
    eye = np.eye(d)
    means, covs, ll = [], [], []
    total = 0.0
    for y in ys:
        mean = m.A @ mean
        cov = m.A @ cov @ m.A.T + m.Q
        S = m.H @ cov @ m.H.T + m.R
        S = 0.5 * (S + S.T)
        try:
            cho = linalg.cho_factor(S, lower=True)
        except linalg.LinAlgError as exc:
            raise OracleError("innovation covariance is not positive definite") from exc
        resid = y - m.H @ mean
        sol = linalg.cho_solve(cho, resid)
        logdet = 2.0 * np.sum(np.log(np.diag(cho[0])))
        total += -0.5 * (resid @ sol + logdet + len(y) * math.log(2 * math.pi))
        K = linalg.cho_solve(cho, m.H @ cov).T
        mean = mean + K @ resid
        IKH = eye - K @ m.H
        cov = IKH @ cov @ IKH.T + K @ m.R @ K.T
        cov = 0.5 * (cov + cov.T)
        means.append(mean.copy())
        covs.append(cov.copy())
        ll.append(total)
    return np.array(means), np.array(covs), np.array(ll)


def chain_kalman(model, ys):
    """Kalman oracle for a :class:`~stpf.models.LinearGaussianChain`."""
    m = build_state_space(model.beta, model.sigma_x, model.sigma_y, model.d)
    return kalman_filter(m, ys, model.x0)


def markov_space_kalman(model, ys):
    """Kalman oracle for :class:`~stpf.models.MarkovSpace`: a scalar AR(1)
    observed along the flattened space-time sequence."""
    flat = np.asarray(ys, dtype=float).reshape(-1, 1)
    m = StateSpaceMatrices(
        A=np.array([[model.coef]]),
        Q=np.array([[model.kernel_sd**2]]),
        H=np.eye(1),
        R=np.array([[model.obs_sd**2]]),
    )
    means, covs, ll = kalman_filter(m, flat, [0.0])
    d = model.d
    return means.reshape(-1, d), covs.reshape(-1, d), ll[d - 1 :: d]


def iid_relative_variance(rho, n, d, N, M):
    """Relative second moment of the i.i.d.-model normalizing-constant estimate.

    ``((1/N) ((rho - 1)/M + 1)**d + (N - 1)/N)**n - 1``.
    """
    if rho < 1:
        raise ValueError("rho must be >= 1")
    for name, v in (("n", n), ("d", d), ("N", N), ("M", M)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1")
    inner = ((rho - 1.0) / M + 1.0) ** d / N + (N - 1.0) / N
    return inner**n - 1.0


def quadrature_rho(log_alpha, log_q, rtol=1e-8, lim=200):
    """``int alpha^2/q / (int alpha)^2`` by adaptive quadrature on the real line.

    Densities are passed as log-density callables.  Raises
    :class:`OracleError` when the integral does not converge.
    """

    def second(x):
        return math.exp(2.0 * log_alpha(x) - log_q(x))

    def first(x):
        return math.exp(log_alpha(x))

    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            num, num_err = integrate.quad(second, -np.inf, np.inf, epsabs=0.0, epsrel=rtol, limit=lim)
            den, den_err = integrate.quad(first, -np.inf, np.inf, epsabs=0.0, epsrel=rtol, limit=lim)
        except (integrate.IntegrationWarning, OverflowError) as exc:
            raise OracleError(f"quadrature did not converge: {exc}") from exc
    if not np.isfinite(num) or num_err > 1e-6 * abs(num):
        raise OracleError(f"quadrature did not converge (residual {num_err:.3g})")
    rho = num / den**2
    if rho < 1.0 - 1e-9:
        raise OracleError(f"rho = {rho} < 1 violates Cauchy-Schwarz")
    return rho


def gaussian_rho(alpha_mean, alpha_sd, q_mean, q_sd):
    """Closed form of :func:`quadrature_rho` for Gaussian alpha and q.

    Finite only when ``2 q_sd**2 > alpha_sd**2``.
    """
    a2, s2 = alpha_sd**2, q_sd**2
    if 2 * s2 <= a2:
        return math.inf
    mu = alpha_mean - q_mean
    return s2 / (alpha_sd * math.sqrt(2 * s2 - a2)) * math.exp(mu * mu / (2 * s2 - a2))


def lognormal_limit_params(c, sigma2):
    """Location and scale of the limiting log-normal law of scaled island weights."""
    if c <= 0 or sigma2 < 0:
        raise ValueError("need c > 0 and sigma2 >= 0")
    return -c * sigma2 / 2.0, c * sigma2


def joint_gaussian_filter(m, ys, x0):
    """Brute-force filter by conditioning the stacked ``(X_{1:n}, Y_{1:n})`` Gaussian.

    Independent of :func:`kalman_filter`; returns the same triple for the
    last time only: ``(mean_n, cov_n, log p(y_{1:n}))``.
    """
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    n, dy = ys.shape
    d = m.A.shape[0]
    # X_k = A^k x0 + sum_{i<=k} A^{k-i} w_i
    powers = [np.eye(d)]
    for _ in range(n):
        powers.append(m.A @ powers[-1])
    mx = np.concatenate([powers[k + 1] @ np.asarray(x0, dtype=float) for k in range(n)])
    G = np.zeros((n * d, n * d))
    for k in range(n):
        for i in range(k + 1):
            G[k * d : (k + 1) * d, i * d : (i + 1) * d] = powers[k - i]
    Sxx = G @ np.kron(np.eye(n), m.Q) @ G.T
    Hb = np.kron(np.eye(n), m.H)
    Syy = Hb @ Sxx @ Hb.T + np.kron(np.eye(n), m.R)
    Sxy = Sxx @ Hb.T
    my = Hb @ mx
    yv = ys.reshape(-1)
    gain = linalg.solve(Syy, Sxy.T, assume_a="pos").T
    post_mean = mx + gain @ (yv - my)
    post_cov = Sxx - gain @ Sxy.T
    sign, logdet = np.linalg.slogdet(Syy)
    resid = yv - my
    ll = -0.5 * (resid @ linalg.solve(Syy, resid, assume_a="pos") + logdet + len(yv) * math.log(2 * math.pi))
    last = slice((n - 1) * d, n * d)
    return post_mean[last], post_cov[last, last], ll
