"""Reference filters: the bootstrap particle filter and the block particle filter.

Both draw from the same keyed streams as the space-time filter, so with one
island-local particle (or one block) the filters coincide draw for draw.
"""

import math
import time as _time

import numpy as np

from stpf import _rng
from stpf._rng import stream
from stpf.core import FilterConfig, FilterTrace, StepRecord, _take, check_observations, global_update
from stpf.models import correction_log_weight
from stpf.resampling import adaptive_resample_decision, ess, multinomial_resample, normalize


def _propagate(model, n, y, prev, P_shape, seed):
    """Draw every coordinate from its proposal; returns (x, per-coordinate log-weights)."""
    d = model.d
    x = np.zeros(P_shape + (d,))
    lw = np.zeros(P_shape + (d,))
    for j in range(d):
        x[..., j] = model.propose(n, j, y, prev, x[..., :j], stream(seed, n, j, _rng.PROPOSE), P_shape)
        lw[..., j] = model.local_log_weight(n, j, y, prev, x[..., : j + 1])
    return x, lw


def _estimates(x, probs, cfg):
    est = np.sum(probs * cfg.phi(x), axis=-1)
    means = np.sum(probs[..., None] * x, axis=-2)
    return est, means


def bootstrap_pf_run(model, observations, n_particles, cfg=None, seed=0, batch=()):
    """Standard particle filter with ``n_particles`` particles.

    Every coordinate is drawn from the model's proposal (the transition for
    the provided models) and particles are weighted by the full product of
    local weights; multinomial resampling when ESS falls below
    ``cfg.ess_threshold * n_particles``.
    """
    obs = check_observations(model, observations)
    cfg = (cfg or FilterConfig()).validate()
    if n_particles < 1:
        raise ValueError("n_particles must be >= 1")
    batch = tuple(batch)
    P = int(n_particles)
    shape = batch + (P,)
    t0 = _time.perf_counter()
    x_prev = np.broadcast_to(model.x0, shape + (model.d,))
    log_w = np.full(shape, -math.log(P))
    log_nc = np.zeros(batch)
    records = []
    for t, y in enumerate(obs):
        n = t + 1
        prev = model.prev_summary(n, x_prev)
        x, lw = _propagate(model, n, y, prev, shape, seed)
        inc = lw[..., 0]
        for j in range(1, model.d):
            inc = inc + lw[..., j]
        if not model.exact_factorization:
            inc = inc + correction_log_weight(model, n, y, x_prev, x)
        log_w, lse, probs, e, do, idx = global_update(log_w, inc, cfg.ess_threshold, seed, n)
        log_nc = log_nc + lse
        est, means = _estimates(x, probs, cfg)
        records.append(
            StepRecord(
                est_double=est,
                est_single=est,
                ess_global=e,
                ess_local_mean=np.full(batch, np.nan),
                log_nc=log_nc,
                resampled=do,
                means=means,
            )
        )
        x_prev = _take(x, idx, axis=-2) if np.any(do) else x
    trace = FilterTrace.from_records("bootstrap", records, wall_time=_time.perf_counter() - t0)
    trace.meta.update({"model": model.name, "seed": int(seed), "P": P})
    return trace


def square_blocks(L, b):
    """Partition an ``L x L`` raster-ordered grid into ``(L/b)**2`` square blocks."""
    if b < 1 or L % b:
        raise ValueError(f"invalid partition: block side {b} does not divide L={L}")
    blocks = []
    for a0 in range(0, L, b):
        for c0 in range(0, L, b):
            blocks.append(np.array([a * L + c for a in range(a0, a0 + b) for c in range(c0, c0 + b)]))
    return blocks


def block_boundary_mask(L, b, r=1.0):
    """True for vertices with a neighbour (distance <= r) in another block."""
    owner = np.empty(L * L, dtype=int)
    for k, blk in enumerate(square_blocks(L, b)):
        owner[blk] = k
    span = int(math.floor(r))
    mask = np.zeros(L * L, dtype=bool)
    for a in range(L):
        for c in range(L):
            v = a * L + c
            for da in range(-span, span + 1):
                for dc in range(-span, span + 1):
                    e, f = a + da, c + dc
                    if 0 <= e < L and 0 <= f < L and math.hypot(da, dc) <= r and owner[e * L + f] != owner[v]:
                        mask[v] = True
    return mask


def block_pf_run(model, observations, n_particles, b, cfg=None, seed=0, batch=()):
    """Block particle filter on a lattice model.

    Each square block of ``b x b`` vertices keeps its own particle weights
    (sum of per-vertex local log-weights inside the block) and is resampled
    on its own, independently of the other blocks; full states are then the
    concatenation of independently resampled block pieces.  ``log_nc`` is the
    sum of per-block increments, a product-form approximation.
    """
    obs = check_observations(model, observations)
    cfg = (cfg or FilterConfig()).validate()
    L = getattr(model, "L", None)
    if L is None:
        raise ValueError("block_pf_run needs a lattice model")
    blocks = square_blocks(L, b)
    batch = tuple(batch)
    P = int(n_particles)
    shape = batch + (P,)
    t0 = _time.perf_counter()
    x_prev = np.broadcast_to(model.x0, shape + (model.d,))
    log_w = np.full(shape + (len(blocks),), -math.log(P))
    log_nc = np.zeros(batch)
    records = []
    for t, y in enumerate(obs):
        n = t + 1
        prev = model.prev_summary(n, x_prev)
        x, lw = _propagate(model, n, y, prev, shape, seed)
        x_new = x.copy()
        est_w = np.zeros(shape + (model.d,))
        ess_blocks, do_any = [], np.zeros(batch, dtype=bool)
        for k, blk in enumerate(blocks):
            inc = lw[..., blk[0]]
            for v in blk[1:]:
                inc = inc + lw[..., v]
            lwk = log_w[..., k] + inc
            probs, lse = normalize(lwk, where=f"time {n}, block {k}")
            log_nc = log_nc + lse
            e = ess(probs)
            do = np.asarray(adaptive_resample_decision(e, cfg.ess_threshold, P))
            ess_blocks.append(e)
            do_any = do_any | do
            est_w[..., blk] = probs[..., None]
            if np.any(do):
                idx = multinomial_resample(probs, P, stream(seed, n, 0, _rng.GLOBAL, k))
                idx = np.where(do[..., None], idx, np.arange(P))
                x_new[..., blk] = _take(x[..., blk], idx, axis=-2)
            log_w[..., k] = np.where(do[..., None], -math.log(P), lwk - lse[..., None])
        means = np.sum(est_w * x, axis=-2)
        est = means[..., cfg.coordinate] if cfg.test_function is None else np.full(batch, np.nan)
        records.append(
            StepRecord(
                est_double=est,
                est_single=est,
                ess_global=np.mean(ess_blocks, axis=0),
                ess_local_mean=np.full(batch, np.nan),
                log_nc=log_nc,
                resampled=do_any,
                means=means,
            )
        )
        x_prev = x_new
    trace = FilterTrace.from_records("block_pf", records, wall_time=_time.perf_counter() - t0)
    trace.meta.update({"model": model.name, "seed": int(seed), "P": P, "b": int(b)})
    return trace
