"""Log-domain weight bookkeeping, effective sample size and resampling.

All functions operate on the last axis and broadcast over any leading batch
axes, so a stack of independent particle systems is handled in one call.
"""

import numpy as np
from scipy.special import logsumexp


class DegenerateWeightsError(FloatingPointError):
    """All weights of a particle system are zero (log-weights all -inf)."""


def log_sum_exp(a, axis=-1):
    """Lean ``logsumexp`` over one axis for hot loops on small arrays."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis))
    return out + np.squeeze(m, axis=axis)


def normalize(log_w, where=None):
    """Normalize log-weights along the last axis.

    Returns ``(probs, lse)`` where ``lse`` is the log-sum-exp of the input,
    the quantity accumulated into normalizing-constant estimates.

    ``where`` is a free-form description of the step, used in the error
    message when a system has no positive weight.
    """
    log_w = np.asarray(log_w, dtype=float)
    if log_w.shape[-1] < 1:
        raise ValueError("empty weight vector")
    if np.isnan(log_w).any() or np.isposinf(log_w).any():
        raise ValueError("log-weights must be finite or -inf")
    lse = logsumexp(log_w, axis=-1)
    bad = np.isneginf(lse)
    if bad.any():
        loc = "" if where is None else f" at {where}"
        idx = tuple(int(i) for i in np.argwhere(np.atleast_1d(bad))[0]) if np.ndim(bad) else ()
        raise DegenerateWeightsError(f"degenerate weights{loc} (system {idx})")
    probs = np.exp(log_w - lse[..., None])
    return probs, lse


def ess(probs):
    """Effective sample size ``1 / sum(p**2)`` of normalized weights."""
    probs = np.asarray(probs, dtype=float)
    return 1.0 / np.sum(probs * probs, axis=-1)


def log_ess(log_w):
    """ESS straight from unnormalized log-weights."""
    probs, _ = normalize(log_w)
    return ess(probs)


def sorted_uniforms(shape, count, rng):
    """Sorted U(0,1) batches of length ``count`` via exponential spacings."""
    e = rng.standard_exponential(tuple(shape) + (count + 1,))
    c = np.cumsum(e, axis=-1)
    return c[..., :count] / c[..., count:]


def inverse_cdf(probs, u):
    """Map sorted uniforms to indices through the cumulative weights.

    A uniform equal to a cumulative boundary selects the interval to its
    right.  Works row-wise on batches without any loss of precision.
    """
    probs = np.asarray(probs, dtype=float)
    m = probs.shape[-1]
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = np.inf
    count = u.shape[-1]
    if probs.ndim == 1:
        return np.searchsorted(cdf, u, side="right")
    # merge-sort each row; cdf entries precede equal uniforms (stable sort)
    merged = np.concatenate([cdf, u], axis=-1)
    order = np.argsort(merged, axis=-1, kind="stable")
    is_cdf = order < m
    below = np.cumsum(is_cdf, axis=-1)
    idx = below[~is_cdf].reshape(u.shape[:-1] + (count,))
    return idx


def multinomial_resample(probs, count, rng):
    """Draw ``count`` i.i.d. indices from each row of ``probs``.

    Output is sorted ascending along the last axis.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    probs = np.asarray(probs, dtype=float)
    u = sorted_uniforms(probs.shape[:-1], count, rng)
    return inverse_cdf(probs, u)


def systematic_resample(probs, count, rng):
    """Systematic resampling; not used by default anywhere."""
    if count < 1:
        raise ValueError("count must be >= 1")
    probs = np.asarray(probs, dtype=float)
    u0 = rng.random(probs.shape[:-1] + (1,))
    u = (np.arange(count) + u0) / count
    return inverse_cdf(probs, u)


def adaptive_resample_decision(ess_value, threshold_fraction, count):
    """True iff ``ess_value < threshold_fraction * count``."""
    if not 0.0 <= threshold_fraction <= 1.0:
        raise ValueError("threshold_fraction must lie in [0, 1]")
    return np.asarray(ess_value) < threshold_fraction * count
