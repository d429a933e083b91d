"""Oracle validation suites: Monte Carlo filters checked against exact values.

Each check returns a :class:`Check` holding the statistic and the interval it
must fall in.  The same functions back the ``validate`` CLI subcommand and the
acceptance tests.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from stpf.core import FilterConfig, run
from stpf.models import IIDProduct, LinearGaussianChain, simulate_data
from stpf.oracles import (
    build_state_space,
    chain_kalman,
    gaussian_rho,
    iid_relative_variance,
    joint_gaussian_filter,
    kalman_filter,
    lognormal_limit_params,
    quadrature_rho,
)


@dataclass
class Check:
    name: str
    value: float
    lower: float
    upper: float
    detail: str = ""

    @property
    def passed(self):
        return bool(self.lower <= self.value <= self.upper)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.6g} in [{self.lower:.6g}, {self.upper:.6g}] {self.detail}".rstrip()


def q_sd_for_rho(rho):
    """Proposal sd ``s`` (wide root) with ``gaussian_rho(0, 1, 0, s) == rho``."""
    if rho < 1:
        raise ValueError("rho must be >= 1")
    return math.sqrt(rho * rho + rho * math.sqrt(rho * rho - 1.0))


def iid_rho(model):
    """``rho`` of an :class:`IIDProduct` coordinate, by quadrature."""
    return quadrature_rho(model.log_alpha_scalar, model.log_q_scalar)


def relative_second_moment(log_est, log_truth):
    """Mean and standard error of ``(est/truth - 1)**2`` over replications."""
    e = np.expm1(np.asarray(log_est) - log_truth) ** 2
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(e.size))


def iid_nc_replicates(d, n, N, M, q_sd, runs, seed, threshold=1.0):
    """Log-NC estimates of ``runs`` independent filters on the i.i.d. model."""
    model = IIDProduct(d, q_sd=q_sd)
    cfg = FilterConfig(n_islands=N, n_local=M, ess_threshold=threshold, keep_paths=False)
    trace = run(model, np.zeros((n, d)), cfg, seed, batch=(runs,))
    return model, trace.log_nc[:, -1]


def prop32_check(d=3, n=2, N=2, M=2, rho=1.5, runs=100_000, seed=0):
    """Empirical relative second moment against the closed form, 4 SE band."""
    model, log_nc = iid_nc_replicates(d, n, N, M, q_sd_for_rho(rho), runs, seed)
    r = iid_rho(model)
    target = iid_relative_variance(r, n, d, N, M)
    mean, se = relative_second_moment(log_nc, model.log_normalizing_constant(n))
    return Check(
        f"relative variance (n={n}, d={d}, N={N}, M={M}, rho={r:.6g})",
        mean,
        target - 4 * se,
        target + 4 * se,
        f"target {target:.6g}, se {se:.3g}",
    )


def standard_pf_divergence_check(d_small=3, d_large=6, n=2, N=2, rho=1.5, runs=100_000, seed=0):
    """With one local particle the relative variance grows with dimension."""
    q_sd = q_sd_for_rho(rho)
    _, small = iid_nc_replicates(d_small, n, N, 1, q_sd, runs, seed)
    _, large = iid_nc_replicates(d_large, n, N, 1, q_sd, runs, seed)
    v_small, _ = relative_second_moment(small, 0.0)
    v_large, _ = relative_second_moment(large, 0.0)
    return Check(
        f"M=1 relative variance d={d_large} minus d={d_small}",
        v_large - v_small,
        np.nextafter(0.0, 1.0),
        math.inf,
        f"d={d_small}: {v_small:.6g}, d={d_large}: {v_large:.6g}",
    )


def lognormal_checks(d=512, runs=10_000, q_sd=math.sqrt(2.0), seed=0):
    """Scaled island weights with ``M = d`` approach a log-normal law.

    Returns three checks: the mean of the scaled weight (4 SE), the variance
    of its logarithm (10% of ``sigma**2``) and a normality test at level 0.001.
    """
    model = IIDProduct(d, q_sd=q_sd)
    cfg = FilterConfig(n_islands=1, n_local=d, keep_paths=False)
    trace = run(model, np.zeros((1, d)), cfg, seed, batch=(runs,))
    logw = trace.log_nc[:, 0] - model.log_normalizing_constant(1)
    sigma2 = iid_rho(model) - 1.0
    _, var_limit = lognormal_limit_params(1.0, sigma2)
    w = np.exp(logw)
    se = w.std(ddof=1) / math.sqrt(runs)
    v = float(logw.var(ddof=1))
    p = float(stats.normaltest(logw).pvalue)
    return [
        Check(f"scaled weight mean (d=M={d})", float(w.mean()), 1 - 4 * se, 1 + 4 * se, f"se {se:.3g}"),
        Check(f"log-weight variance (d=M={d})", v, 0.9 * var_limit, 1.1 * var_limit, f"limit {var_limit:.6g}"),
        Check("log-weight normality p-value", p, 1e-3, 1.0),
    ]


def nc_unbiased_check(model, obs, log_truth, N=20, M=10, runs=10_000, seed=0, label=None):
    """Mean of ``exp(log_nc - log_truth)`` within 4 SE of one."""
    # rolling windows only where the model reads no past coordinates
    stateless = model.lag == 0 and model.summary_dim == 0
    cfg = FilterConfig(n_islands=N, n_local=M, keep_paths=not stateless)
    trace = run(model, obs, cfg, seed, batch=(runs,))
    ratio = np.exp(trace.log_nc[:, -1] - log_truth)
    se = ratio.std(ddof=1) / math.sqrt(runs)
    name = label or f"NC ratio mean ({model.name})"
    return Check(name, float(ratio.mean()), 1 - 4 * se, 1 + 4 * se, f"se {se:.3g}")


def chain_nc_check(d=5, n=5, N=20, M=10, runs=10_000, seed=0, data_seed=1):
    model = LinearGaussianChain(d)
    _, obs = simulate_data(model, n, data_seed)
    _, _, ll = chain_kalman(model, obs)
    return nc_unbiased_check(model, obs, ll[-1], N, M, runs, seed)


def iid_nc_check(d=5, n=5, N=20, M=10, runs=10_000, seed=0, q_sd=1.5):
    model = IIDProduct(d, q_sd=q_sd)
    return nc_unbiased_check(model, np.zeros((n, d)), model.log_normalizing_constant(n), N, M, runs, seed)


def kalman_agreement_check(d=4, n=6, data_seed=3):
    """Kalman recursion against brute-force conditioning of the joint Gaussian."""
    model = LinearGaussianChain(d)
    _, obs = simulate_data(model, n, data_seed)
    m = build_state_space(model.beta, model.sigma_x, model.sigma_y, d)
    means, covs, ll = kalman_filter(m, obs, model.x0)
    jm, jc, jll = joint_gaussian_filter(m, obs, model.x0)
    err = max(np.max(np.abs(means[-1] - jm)), np.max(np.abs(covs[-1] - jc)), abs(ll[-1] - jll))
    return Check("Kalman vs joint Gaussian max abs error", float(err), 0.0, 1e-8)


def quadrature_check(q_sd=1.3, q_mean=0.4):
    model = IIDProduct(1, q_mean=q_mean, q_sd=q_sd)
    exact = gaussian_rho(0.0, 1.0, q_mean, q_sd)
    err = abs(iid_rho(model) - exact) / exact
    return Check("quadrature rho relative error", err, 0.0, 1e-8, f"rho {exact:.10g}")


def validation_suite(quick=False, seed=0):
    """All oracle checks; ``quick`` shrinks replication counts tenfold."""
    scale = 10 if quick else 1
    checks = [kalman_agreement_check(), quadrature_check()]
    checks.append(prop32_check(runs=100_000 // scale, seed=seed))
    checks.append(standard_pf_divergence_check(runs=100_000 // scale, seed=seed))
    checks.extend(lognormal_checks(d=512 // (4 if quick else 1), runs=10_000 // scale, seed=seed))
    checks.append(iid_nc_check(runs=10_000 // scale, seed=seed))
    checks.append(chain_nc_check(runs=10_000 // scale, seed=seed))
    return checks


def write_checks(path, checks):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "value", "lower", "upper", "passed"])
        for c in checks:
            writer.writerow([c.name, repr(float(c.value)), repr(float(c.lower)), repr(float(c.upper)), int(c.passed)])
