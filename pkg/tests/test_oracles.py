import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stpf import _rng
from stpf.models import LinearGaussianChain, MarkovSpace, simulate_data
from stpf.oracles import (
    OracleError,
    StateSpaceMatrices,
    build_state_space,
    chain_kalman,
    gaussian_rho,
    iid_relative_variance,
    joint_gaussian_filter,
    kalman_filter,
    lognormal_limit_params,
    markov_space_kalman,
    quadrature_rho,
)


def _norm(mean, sd):
    return lambda x: -0.5 * ((x - mean) / sd) ** 2 - math.log(sd) - 0.5 * math.log(2 * math.pi)


def test_state_space_scalar():
    m = build_state_space([0.4], 1.5, 1.0, 1)
    np.testing.assert_allclose(m.A, [[0.4]])
    np.testing.assert_allclose(m.Q, [[2.25]])


def test_state_space_zero_beta():
    m = build_state_space(np.zeros(3), 0.7, 1.0, 3)
    np.testing.assert_array_equal(m.A, np.zeros((3, 3)))
    np.testing.assert_allclose(m.Q, 0.49 * np.eye(3))


def test_state_space_against_simulation():
    beta = [0.5, 0.25, 0.125]
    model = LinearGaussianChain(3, beta=beta)
    m = build_state_space(beta, 1.0, 1.0, 3)
    x_prev = np.array([1.0, -2.0, 0.5])
    count = 1_000_000
    prev = model.prev_summary(2, x_prev)
    rng = _rng.stream(0)
    x = np.zeros((count, 3))
    for j in range(3):
        x[:, j] = model.propose(2, j, None, prev, x[:, :j], rng, (count,))
    mean_se = np.sqrt(np.diag(m.Q) / count)
    assert np.all(np.abs(x.mean(axis=0) - m.A @ x_prev) < 4 * mean_se)
    cov = np.cov(x, rowvar=False)
    cov_se = np.sqrt((np.outer(np.diag(m.Q), np.diag(m.Q)) + m.Q**2) / count)
    assert np.all(np.abs(cov - m.Q) < 4 * cov_se)


def test_state_space_bad_args():
    with pytest.raises(ValueError):
        build_state_space([0.5], 1.0, 1.0, 0)
    with pytest.raises(ValueError):
        build_state_space([0.5], 1.0, 1.0, 2)


def test_kalman_conjugate_update():
    m = build_state_space([0.0], 1.0, 1.0, 1)
    means, covs, ll = kalman_filter(m, [[1.7]], [0.0])
    assert means[0, 0] == pytest.approx(0.85, abs=1e-15)
    assert covs[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert ll[0] == pytest.approx(_norm(0.0, math.sqrt(2.0))(1.7), abs=1e-14)


def test_kalman_uninformative_observation():
    m = StateSpaceMatrices(A=np.array([[0.9]]), Q=np.array([[1.0]]), H=np.eye(1), R=np.array([[1e12]]))
    means, _, _ = kalman_filter(m, [[5.0]], [2.0])
    assert means[0, 0] == pytest.approx(1.8, abs=1e-6)


def test_kalman_non_pd_innovation():
    m = StateSpaceMatrices(A=np.eye(1), Q=np.zeros((1, 1)), H=np.eye(1), R=np.array([[-1.0]]))
    with pytest.raises(OracleError):
        kalman_filter(m, [[0.0]], [0.0])


@pytest.mark.invariant
@pytest.mark.parametrize("d, n", [(1, 1), (2, 3), (3, 2), (3, 3), (2, 6)])
def test_kalman_matches_joint_gaussian(d, n):
    rng = np.random.default_rng(d * 10 + n)
    model = LinearGaussianChain(d, beta=rng.uniform(-0.6, 0.6, d), sigma_x=0.9, sigma_y=1.2)
    _, obs = simulate_data(model, n, 1)
    m = build_state_space(model.beta, model.sigma_x, model.sigma_y, d)
    means, covs, ll = kalman_filter(m, obs, model.x0)
    jm, jc, jll = joint_gaussian_filter(m, obs, model.x0)
    np.testing.assert_allclose(means[-1], jm, atol=1e-8)
    np.testing.assert_allclose(covs[-1], jc, atol=1e-8)
    assert ll[-1] == pytest.approx(jll, abs=1e-8)


def test_chain_kalman_wrapper():
    model = LinearGaussianChain(3)
    _, obs = simulate_data(model, 4, 2)
    means, covs, ll = chain_kalman(model, obs)
    assert means.shape == (4, 3) and covs.shape == (4, 3, 3) and ll.shape == (4,)


def test_markov_space_kalman_matches_joint():
    model = MarkovSpace(3, coef=0.6, kernel_sd=0.8, obs_sd=1.1)
    _, obs = simulate_data(model, 2, 4)
    means, var, ll = markov_space_kalman(model, obs)
    flat = StateSpaceMatrices(A=np.array([[0.6]]), Q=np.array([[0.64]]), H=np.eye(1), R=np.array([[1.21]]))
    jm, jc, jll = joint_gaussian_filter(flat, obs.reshape(-1, 1), [0.0])
    assert ll[-1] == pytest.approx(jll, abs=1e-10)
    assert means[-1, -1] == pytest.approx(jm[0], abs=1e-10)
    assert var.shape == (2, 3)


def test_relative_variance_examples():
    assert iid_relative_variance(1.0, 3, 7, 2, 5) == 0.0
    assert iid_relative_variance(1.37, 1, 1, 1, 1) == pytest.approx(0.37, abs=1e-15)
    assert iid_relative_variance(1.5, 2, 3, 2, 2) == 1.18023681640625


def test_relative_variance_bad_args():
    with pytest.raises(ValueError):
        iid_relative_variance(0.9, 1, 1, 1, 1)
    with pytest.raises(ValueError):
        iid_relative_variance(1.2, 1, 1, 0, 1)


@pytest.mark.invariant
def test_relative_variance_sweep_in_d():
    rho = 1.3
    ones = [iid_relative_variance(rho, 1, d, 1, 1) for d in range(1, 65)]
    assert all(b > a for a, b in zip(ones, ones[1:]))
    assert all(iid_relative_variance(rho, 1, d, 1, 1) + 1 >= rho**d - 1e-9 for d in range(1, 65))
    scaled = [iid_relative_variance(rho, 1, d, 1, d) for d in range(1, 65)]
    assert max(scaled) <= math.exp(rho - 1) - 1 + 1e-12


def test_quadrature_perfect_proposal():
    f = _norm(0.3, 1.2)
    assert quadrature_rho(f, f) == pytest.approx(1.0, abs=1e-10)


def test_quadrature_known_overlap():
    rho = quadrature_rho(_norm(0, 1), _norm(0, math.sqrt(2)))
    assert rho == pytest.approx(2 / math.sqrt(3), rel=1e-9)
    assert gaussian_rho(0, 1, 0, math.sqrt(2)) == pytest.approx(2 / math.sqrt(3), rel=1e-15)


def test_quadrature_divergent():
    with pytest.raises(OracleError):
        quadrature_rho(_norm(0, 1), _norm(0, 0.7))
    assert gaussian_rho(0, 1, 0, 0.7) == math.inf


@pytest.mark.invariant
@settings(max_examples=25, deadline=None, derandomize=True)
@given(st.floats(-1, 1), st.floats(0.8, 2.5), st.floats(-1, 1))
def test_quadrature_at_least_one_and_matches_closed_form(q_mean, q_sd, a_mean):
    rho = quadrature_rho(_norm(a_mean, 1.0), _norm(q_mean, q_sd))
    assert rho >= 1.0
    assert rho == pytest.approx(gaussian_rho(a_mean, 1.0, q_mean, q_sd), rel=1e-7)


def test_lognormal_params():
    assert lognormal_limit_params(1.0, 0.0) == (0.0, 0.0)
    mu, var = lognormal_limit_params(1.0, 0.5)
    assert (mu, var) == (-0.25, 0.5)
    assert math.exp(mu + var / 2) == 1.0
    assert math.exp(2 * mu + 2 * var) == pytest.approx(math.exp(0.5), rel=1e-15)
    with pytest.raises(ValueError):
        lognormal_limit_params(0.0, 0.5)
