"""State-space models exposed through a coordinate-wise factorization.

A model factorizes the one-step joint density as a product of ``d`` factors,

    g(x_n, y_n) f(x_{n-1}, x_n) = prod_j alpha_{n,j}(y_n, x_{n-1}, x_n(1:j)),

and supplies a proposal ``q_{n,j}`` for each new coordinate.  Coordinates are
0-based in code.

Every method is vectorized over arbitrary leading batch axes.  Two
conventions keep the filters cheap:

* ``prev`` is not the raw previous state but ``prev_summary(n, x_prev)``, a
  model-chosen reduction computed once per ancestor and time step.
* ``x_part`` holds the trailing coordinates of the current partial path; its
  last entry is the newest coordinate.  At least ``min(j, lag)`` coordinates
  preceding ``x(j)`` are present (``lag=None`` means the full prefix).
"""

import csv
import math

import numpy as np
from scipy import stats
from scipy.special import gammaln

from stpf._rng import SIMULATE, stream
from stpf.resampling import log_sum_exp

_LOG_2PI = math.log(2.0 * math.pi)


def _norm_logpdf(x, mean, sd):
    z = (x - mean) / sd
    return -0.5 * z * z - math.log(sd) - 0.5 * _LOG_2PI


class StateSpaceModel:
    """Base class; subclasses fill in the factor and proposal methods."""

    name = "model"
    lag = None
    summary_window = None
    exact_factorization = True

    def __init__(self, d):
        if d < 1:
            raise ValueError("d must be >= 1")
        self.d = int(d)

    @property
    def obs_dim(self):
        return self.d

    @property
    def x0(self):
        return np.zeros(self.d)

    @property
    def summary_dim(self):
        return self.d

    def prev_summary(self, n, x_prev):
        return np.asarray(x_prev, dtype=float)

    def propose(self, n, j, y, prev, x_part, rng, shape):
        raise NotImplementedError

    def log_q(self, n, j, y, prev, x_part, xj):
        raise NotImplementedError

    def log_alpha(self, n, j, y, prev, x_part):
        raise NotImplementedError

    def local_log_weight(self, n, j, y, prev, x_part):
        """``log alpha_{n,j} - log q_{n,j}`` at the newest coordinate."""
        return self.log_alpha(n, j, y, prev, x_part) - self.log_q(
            n, j, y, prev, x_part[..., :-1], x_part[..., -1]
        )

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        raise NotImplementedError("correction unavailable: no exact joint density")

    def simulate(self, n, rng):
        raise NotImplementedError

    def params(self):
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params().items())
        return f"{type(self).__name__}({args})"


def sum_log_alpha(model, n, y, x_prev, x_n):
    """``sum_j log alpha_{n,j}`` along full paths ``x_n``."""
    x_n = np.asarray(x_n, dtype=float)
    prev = model.prev_summary(n, np.broadcast_to(x_prev, x_n.shape))
    total = np.zeros(x_n.shape[:-1])
    for j in range(model.d):
        total = total + model.log_alpha(n, j, y, prev, x_n[..., : j + 1])
    return total


def correction_log_weight(model, n, y, x_prev, x_n):
    """Exact joint log-density minus the product of factors.

    Zero for exactly factorizable models; raises ``NotImplementedError`` when
    the model has no exact joint density.
    """
    exact = model.exact_joint_log_density(n, y, x_prev, x_n)
    return exact - sum_log_alpha(model, n, y, x_prev, x_n)


class IIDProduct(StateSpaceModel):
    """``prod_j alpha(x(j))`` with Gaussian alpha and Gaussian proposal.

    ``alpha`` is ``alpha_mass`` times a Normal(alpha_mean, alpha_sd) density,
    so its integral is ``alpha_mass``.  Observations are ignored.
    """

    name = "iid_product"
    lag = 0
    summary_window = 0

    def __init__(self, d, alpha_mean=0.0, alpha_sd=1.0, alpha_mass=1.0, q_mean=0.0, q_sd=1.0):
        super().__init__(d)
        self.alpha_mean = float(alpha_mean)
        self.alpha_sd = float(alpha_sd)
        self.alpha_mass = float(alpha_mass)
        self.q_mean = float(q_mean)
        self.q_sd = float(q_sd)

    def params(self):
        return {
            "d": self.d,
            "alpha_mean": self.alpha_mean,
            "alpha_sd": self.alpha_sd,
            "alpha_mass": self.alpha_mass,
            "q_mean": self.q_mean,
            "q_sd": self.q_sd,
        }

    @property
    def summary_dim(self):
        return 0

    def prev_summary(self, n, x_prev):
        x_prev = np.asarray(x_prev, dtype=float)
        return x_prev[..., :0]

    def log_alpha_scalar(self, x):
        return math.log(self.alpha_mass) + _norm_logpdf(x, self.alpha_mean, self.alpha_sd)

    def log_q_scalar(self, x):
        return _norm_logpdf(x, self.q_mean, self.q_sd)

    def propose(self, n, j, y, prev, x_part, rng, shape):
        return self.q_mean + self.q_sd * rng.standard_normal(shape)

    def log_q(self, n, j, y, prev, x_part, xj):
        return self.log_q_scalar(xj)

    def log_alpha(self, n, j, y, prev, x_part):
        return self.log_alpha_scalar(x_part[..., -1])

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        return np.sum(self.log_alpha_scalar(np.asarray(x_n, dtype=float)), axis=-1)

    def log_normalizing_constant(self, n):
        """Exact ``log (int alpha)^{n d}``."""
        return n * self.d * math.log(self.alpha_mass)

    def simulate(self, n, rng):
        states = self.alpha_mean + self.alpha_sd * rng.standard_normal((n, self.d))
        return states, np.zeros((n, self.d))


class MarkovSpace(StateSpaceModel):
    """Markov structure along space with Gaussian kernel and likelihood.

    ``x_n(j) ~ Normal(coef * x_n(j-1), kernel_sd**2)`` with
    ``x_n(-1) = x_{n-1}(d-1)``, and ``y_n(j) ~ Normal(x_n(j), obs_sd**2)``.
    The kernel is the proposal, so the local weight is the likelihood.
    """

    name = "markov_space"
    lag = 1
    summary_window = 1

    def __init__(self, d, coef=0.5, kernel_sd=1.0, obs_sd=1.0):
        super().__init__(d)
        self.coef = float(coef)
        self.kernel_sd = float(kernel_sd)
        self.obs_sd = float(obs_sd)

    def params(self):
        return {"d": self.d, "coef": self.coef, "kernel_sd": self.kernel_sd, "obs_sd": self.obs_sd}

    @property
    def summary_dim(self):
        return 1

    def prev_summary(self, n, x_prev):
        x_prev = np.asarray(x_prev, dtype=float)
        return x_prev[..., -1:]

    def _left(self, j, prev, x_part):
        return prev[..., 0] if j == 0 else x_part[..., -1]

    def propose(self, n, j, y, prev, x_part, rng, shape):
        mean = self.coef * self._left(j, prev, x_part)
        return mean + self.kernel_sd * rng.standard_normal(shape)

    def log_q(self, n, j, y, prev, x_part, xj):
        return _norm_logpdf(xj, self.coef * self._left(j, prev, x_part), self.kernel_sd)

    def log_alpha(self, n, j, y, prev, x_part):
        xj = x_part[..., -1]
        return self.log_q(n, j, y, prev, x_part[..., :-1], xj) + _norm_logpdf(y[j], xj, self.obs_sd)

    def local_log_weight(self, n, j, y, prev, x_part):
        return _norm_logpdf(y[j], x_part[..., -1], self.obs_sd)

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        x_n = np.asarray(x_n, dtype=float)
        x_prev = np.broadcast_to(x_prev, x_n.shape)
        left = np.concatenate([x_prev[..., -1:], x_n[..., :-1]], axis=-1)
        trans = _norm_logpdf(x_n, self.coef * left, self.kernel_sd)
        lik = _norm_logpdf(np.asarray(y), x_n, self.obs_sd)
        return np.sum(trans + lik, axis=-1)

    def simulate(self, n, rng):
        flat = np.empty(n * self.d)
        prev = 0.0
        eps = rng.standard_normal(n * self.d)
        for t in range(n * self.d):
            prev = self.coef * prev + self.kernel_sd * eps[t]
            flat[t] = prev
        states = flat.reshape(n, self.d)
        obs = states + self.obs_sd * rng.standard_normal((n, self.d))
        return states, obs


def default_beta(d):
    return 0.5 ** np.arange(1, d + 1)


class LinearGaussianChain(StateSpaceModel):
    """Linear Gaussian model whose coordinates are generated in order.

    ``X_n(j) = sum_{i<j} beta_{d-j+i+1} X_n(i) + sum_{i>=j} beta_{i-j+1} X_{n-1}(i)
    + eps``, ``Y_n = X_n + xi`` (1-based indices in this formula).  The
    transition factor is the proposal.
    """

    name = "linear_gaussian_chain"
    lag = None

    def __init__(self, d, beta=None, sigma_x=1.0, sigma_y=1.0):
        super().__init__(d)
        beta = default_beta(d) if beta is None else np.asarray(beta, dtype=float)
        if beta.shape != (d,):
            raise ValueError(f"beta must have length {d}")
        self.beta = beta
        self.sigma_x = float(sigma_x)
        self.sigma_y = float(sigma_y)
        idx = np.arange(d)
        jj, ii = np.meshgrid(idx, idx, indexing="ij")
        # prev_map[j, i] = beta[i - j] for i >= j
        self.prev_map = np.where(ii >= jj, beta[np.clip(ii - jj, 0, d - 1)], 0.0)
        # within[j, i] = beta[d - j + i] for i < j
        self.within = np.where(ii < jj, beta[np.clip(d - jj + ii, 0, d - 1)], 0.0)

    def params(self):
        return {
            "d": self.d,
            "beta": [float(b) for b in self.beta],
            "sigma_x": self.sigma_x,
            "sigma_y": self.sigma_y,
        }

    def prev_summary(self, n, x_prev):
        return np.asarray(x_prev, dtype=float) @ self.prev_map.T

    def _mean(self, j, prev, x_part):
        # x_part holds exactly x(0:j) here since lag is None
        mean = prev[..., j]
        if j > 0:
            mean = mean + x_part[..., :j] @ self.within[j, :j]
        return mean

    def propose(self, n, j, y, prev, x_part, rng, shape):
        return self._mean(j, prev, x_part) + self.sigma_x * rng.standard_normal(shape)

    def log_q(self, n, j, y, prev, x_part, xj):
        return _norm_logpdf(xj, self._mean(j, prev, x_part), self.sigma_x)

    def log_alpha(self, n, j, y, prev, x_part):
        xj = x_part[..., -1]
        return self.log_q(n, j, y, prev, x_part[..., :-1], xj) + _norm_logpdf(y[j], xj, self.sigma_y)

    def local_log_weight(self, n, j, y, prev, x_part):
        return _norm_logpdf(y[j], x_part[..., -1], self.sigma_y)

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        # L x_n = B x_prev + eps with unit lower-triangular L
        x_n = np.asarray(x_n, dtype=float)
        resid = x_n - x_n @ self.within.T - np.asarray(x_prev, dtype=float) @ self.prev_map.T
        trans = _norm_logpdf(resid, 0.0, self.sigma_x)
        lik = _norm_logpdf(np.asarray(y), x_n, self.sigma_y)
        return np.sum(trans + lik, axis=-1)

    def simulate(self, n, rng):
        states = np.zeros((n, self.d))
        obs = np.zeros((n, self.d))
        x_prev = self.x0
        for t in range(n):
            prev = self.prev_summary(t + 1, x_prev)
            eps = rng.standard_normal(self.d)
            x = np.zeros(self.d)
            for j in range(self.d):
                x[j] = self._mean(j, prev, x[:j]) + self.sigma_x * eps[j]
            states[t] = x
            obs[t] = x + self.sigma_y * rng.standard_normal(self.d)
            x_prev = x
        return states, obs


def mixture_weights(v, r, delta, L):
    """Neighbourhood of vertex ``v = (row, col)`` (0-based) and its weights.

    Weights are proportional to ``1 / (D(v, u) + delta)`` over all grid
    vertices within Euclidean distance ``r``, renormalized after truncation
    at the grid edge.  Neighbours come back in raster order.
    """
    if r < 1 or delta <= 0:
        raise ValueError("need r >= 1 and delta > 0")
    a, b = v
    if not (0 <= a < L and 0 <= b < L):
        raise ValueError(f"vertex {v} outside {L}x{L} grid")
    span = int(math.floor(r))
    nbrs, raw = [], []
    for c in range(max(0, a - span), min(L, a + span + 1)):
        for e in range(max(0, b - span), min(L, b + span + 1)):
            dist = math.hypot(a - c, b - e)
            if dist <= r:
                nbrs.append((c, e))
                raw.append(1.0 / (dist + delta))
    w = np.array(raw)
    return nbrs, w / w.sum()


class LatticeMixture(StateSpaceModel):
    """Gaussian-mixture dynamics on an ``L x L`` grid with Student-t noise.

    Vertex ``(a, b)`` is coordinate ``a * L + b``.  Each ``x_n(v)`` is drawn
    from a mixture of ``Normal(x_{n-1}(u), component_sd**2)`` over the
    neighbourhood of ``v``; observations add i.i.d. t(nu) noise.
    """

    name = "lattice_mixture"
    lag = 0

    def __init__(self, L, r=1.0, delta=1.0, nu=10.0, component_sd=1.0):
        super().__init__(L * L)
        self.L = int(L)
        self.r = float(r)
        self.delta = float(delta)
        self.nu = float(nu)
        self.component_sd = float(component_sd)
        hoods = [mixture_weights((v // L, v % L), r, delta, L) for v in range(self.d)]
        width = max(len(nb) for nb, _ in hoods)
        self.nbr_idx = np.zeros((self.d, width), dtype=int)
        self.nbr_logw = np.full((self.d, width), -np.inf)
        self.nbr_cdf = np.ones((self.d, width))
        for v, (nb, w) in enumerate(hoods):
            k = len(nb)
            self.nbr_idx[v, :k] = [c * L + e for c, e in nb]
            self.nbr_logw[v, :k] = np.log(w)
            self.nbr_cdf[v, :k] = np.cumsum(w)
            self.nbr_cdf[v, k - 1 :] = np.inf
        self._t_const = gammaln((self.nu + 1) / 2) - gammaln(self.nu / 2) - 0.5 * math.log(self.nu * math.pi)

    def params(self):
        return {"L": self.L, "r": self.r, "delta": self.delta, "nu": self.nu, "component_sd": self.component_sd}

    def vertex(self, a, b):
        return a * self.L + b

    def log_t(self, z):
        return self._t_const - 0.5 * (self.nu + 1) * np.log1p(z * z / self.nu)

    def _component_means(self, j, prev):
        return prev[..., self.nbr_idx[j]]

    def log_transition(self, j, prev, xj):
        means = self._component_means(j, prev)
        comp = _norm_logpdf(np.asarray(xj)[..., None], means, self.component_sd)
        return log_sum_exp(comp + self.nbr_logw[j], axis=-1)

    def propose(self, n, j, y, prev, x_part, rng, shape):
        u = rng.random(shape)
        which = np.searchsorted(self.nbr_cdf[j], u, side="right")
        means = np.take_along_axis(
            np.broadcast_to(self._component_means(j, prev), shape + (self.nbr_idx.shape[1],)),
            which[..., None],
            axis=-1,
        )[..., 0]
        return means + self.component_sd * rng.standard_normal(shape)

    def log_q(self, n, j, y, prev, x_part, xj):
        return self.log_transition(j, prev, xj)

    def log_alpha(self, n, j, y, prev, x_part):
        xj = x_part[..., -1]
        return self.log_transition(j, prev, xj) + self.log_t(y[j] - xj)

    def local_log_weight(self, n, j, y, prev, x_part):
        return self.log_t(y[j] - x_part[..., -1])

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        x_n = np.asarray(x_n, dtype=float)
        x_prev = np.broadcast_to(np.asarray(x_prev, dtype=float), x_n.shape)
        means = x_prev[..., self.nbr_idx]
        comp = _norm_logpdf(x_n[..., None], means, self.component_sd)
        trans = log_sum_exp(comp + self.nbr_logw, axis=-1)
        return np.sum(trans + self.log_t(np.asarray(y) - x_n), axis=-1)

    def simulate(self, n, rng):
        states = np.zeros((n, self.d))
        x_prev = self.x0
        for t in range(n):
            u = rng.random(self.d)
            which = np.array([np.searchsorted(self.nbr_cdf[v], u[v], side="right") for v in range(self.d)])
            means = x_prev[self.nbr_idx[np.arange(self.d), which]]
            states[t] = means + self.component_sd * rng.standard_normal(self.d)
            x_prev = states[t]
        obs = states + stats.t.rvs(self.nu, size=(n, self.d), random_state=rng)
        return states, obs


class PerturbedFactorization(StateSpaceModel):
    """Wrap a model, multiplying its first factor by ``exp(log_c(x(0)))``.

    The product of factors no longer equals the joint density; the wrapped
    model's exact joint is kept, so filters must apply correction weights.
    """

    name = "perturbed"
    exact_factorization = False

    def __init__(self, base, log_c):
        super().__init__(base.d)
        self.base = base
        self.log_c = log_c
        self.lag = base.lag
        self.summary_window = base.summary_window

    @property
    def summary_dim(self):
        return self.base.summary_dim

    def prev_summary(self, n, x_prev):
        return self.base.prev_summary(n, x_prev)

    def propose(self, n, j, y, prev, x_part, rng, shape):
        return self.base.propose(n, j, y, prev, x_part, rng, shape)

    def log_q(self, n, j, y, prev, x_part, xj):
        return self.base.log_q(n, j, y, prev, x_part, xj)

    def log_alpha(self, n, j, y, prev, x_part):
        out = self.base.log_alpha(n, j, y, prev, x_part)
        if j == 0:
            out = out + self.log_c(x_part[..., -1])
        return out

    def local_log_weight(self, n, j, y, prev, x_part):
        out = self.base.local_log_weight(n, j, y, prev, x_part)
        if j == 0:
            out = out + self.log_c(x_part[..., -1])
        return out

    def exact_joint_log_density(self, n, y, x_prev, x_n):
        return self.base.exact_joint_log_density(n, y, x_prev, x_n)

    def simulate(self, n, rng):
        return self.base.simulate(n, rng)


MODELS = {
    "iid_product": IIDProduct,
    "markov_space": MarkovSpace,
    "linear_gaussian_chain": LinearGaussianChain,
    "lattice_mixture": LatticeMixture,
}


def make_model(name, **params):
    try:
        cls = MODELS[name]
    except KeyError:
        raise ValueError(f"unknown model {name!r}; choose from {sorted(MODELS)}") from None
    return cls(**params)


def simulate_data(model, n, seed):
    """Forward-simulate ``n`` steps from ``X_0 = 0``; returns (states, obs)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return model.simulate(int(n), stream(seed, purpose=SIMULATE))


def write_data_csv(path, rows, model, seed, kind="obs"):
    """Write an ``n x d`` array, one row per time step.

    The first line is a ``#``-prefixed metadata record, the second the
    column header.
    """
    rows = np.asarray(rows, dtype=float)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# model={model.name};d={model.d};seed={int(seed)};kind={kind}\n")
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(rows.shape[1])])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])


def read_data_csv(path):
    """Inverse of :func:`write_data_csv`; returns ``(array, metadata)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#"):
            raise ValueError(f"{path}: missing metadata line")
        meta = dict(item.split("=", 1) for item in first[1:].strip().split(";") if item)
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader], dtype=float)
    if data.size == 0:
        data = data.reshape(0, len(header))
    if "d" in meta:
        meta["d"] = int(meta["d"])
    if "seed" in meta:
        meta["seed"] = int(meta["seed"])
    return data, meta
