"""Space-time filter with MCMC mutations against path degeneracy.

After the local resampling at every space-step, each local particle's partial
path ``x(1:j)`` is moved by random-walk Metropolis sweeps that leave the
partial target invariant:

* time 1: ``prod_{k<=j} alpha_{1,k}(x(1:k))``;
* time n >= 2: the mixture over the island's ancestors,
  ``sum_l prod_{k<=j} alpha_{n,k}(x_{n-1}^l, x(1:k))``.

The move is followed by a Gibbs refresh of the particle's ancestor from its
conditional given the moved path.  Together these leave the joint law of
(path, ancestor) invariant, so the importance weights of the plain filter
are unchanged and so is every normalizing-constant identity.
"""

import math
import time as _time
from dataclasses import dataclass

import numpy as np

from stpf import _rng
from stpf._rng import stream
from stpf.core import FilterConfig, _take
from stpf.core import run as _run
from stpf.resampling import log_sum_exp, multinomial_resample


@dataclass
class MutationConfig:
    scale: float = 0.5
    sweeps: int = 1
    mode: str = "coordinate"

    def validate(self):
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if self.sweeps < 0:
            raise ValueError("sweeps must be >= 0")
        if self.mode not in ("coordinate", "joint"):
            raise ValueError("mode must be 'coordinate' or 'joint'")
        return self


def partial_target_logdensity(model, n, j, x, y, x_prev=None):
    """``sum_{k<=j} log alpha_{n,k}`` for the partial path ``x = x(0:j+1)``."""
    x = np.asarray(x, dtype=float)
    x_prev = model.x0 if x_prev is None else np.asarray(x_prev, dtype=float)
    prev = model.prev_summary(n, x_prev)
    total = 0.0
    for k in range(j + 1):
        total = total + model.log_alpha(n, k, y, prev, x[..., : k + 1])
    return total


def marginal_target_logdensity(model, n, j, x, y, ancestors):
    """``log sum_l prod_{k<=j} alpha_{n,k}(ancestor_l, x(0:k+1))``.

    ``ancestors`` has shape ``(M, d)``; ``x`` may carry leading batch axes.
    """
    x = np.asarray(x, dtype=float)
    anc = np.asarray(ancestors, dtype=float)
    prev = model.prev_summary(n, anc)
    xb = x[..., None, :]
    total = 0.0
    for k in range(j + 1):
        total = total + model.log_alpha(n, k, y, prev, xb[..., : k + 1])
    return log_sum_exp(total, axis=-1)


def mh_log_accept(log_target_current, log_target_proposed):
    """Log acceptance probability for a symmetric proposal."""
    return np.minimum(0.0, log_target_proposed - log_target_current)


def rw_metropolis_sweep(x, log_target, scale, rng, mode="coordinate"):
    """One random-walk Metropolis sweep over the last axis of ``x``.

    ``coordinate`` mode updates coordinates one at a time in order; ``joint``
    proposes the whole block at once.  Returns ``(x_new, n_accepted)``; the
    acceptance count has the batch shape of ``x``.
    """
    x = np.array(x, dtype=float)
    cur = np.asarray(log_target(x), dtype=float)
    if not np.all(np.isfinite(cur)):
        raise ValueError("log-target is not finite at the initial state")
    k = x.shape[-1]
    batch = x.shape[:-1]
    z = rng.standard_normal((k,) + batch)
    log_u = np.log(rng.random((k,) + batch))
    accepted = np.zeros(batch, dtype=int)
    if mode == "joint":
        prop = x + scale * np.moveaxis(z, 0, -1)
        new = np.asarray(log_target(prop), dtype=float)
        ok = log_u[0] < mh_log_accept(cur, new)
        x = np.where(ok[..., None], prop, x)
        return x, accepted + ok
    if mode != "coordinate":
        raise ValueError("mode must be 'coordinate' or 'joint'")
    for m in range(k):
        prop = x.copy()
        prop[..., m] = x[..., m] + scale * z[m]
        new = np.asarray(log_target(prop), dtype=float)
        ok = log_u[m] < mh_log_accept(cur, new)
        x = np.where(ok[..., None], prop, x)
        cur = np.where(ok, new, cur)
        accepted += ok
    return x, accepted


class _Mutator:
    """Cached coordinate-wise moves for all local particles of all islands.

    Keeps, per particle and candidate ancestor, the table of factor values
    ``log alpha_{n,k}`` so a single-coordinate move only re-evaluates the
    factors that read the moved coordinate.
    """

    def __init__(self, mcfg):
        self.mcfg = mcfg.validate()
        self.table = None
        self.n = None
        self.acc = []

    def _factor(self, sweep, k, x):
        model = sweep.model
        lo = 0 if model.lag is None else max(0, k - model.lag)
        out = model.log_alpha(sweep.n, k, sweep.y, self.prev_all, x[..., None, lo : k + 1])
        # factors that ignore the ancestor still need the ancestor axis
        shape = sweep.shape + (self.prev_all.shape[-2],)
        return out if out.shape == shape else np.broadcast_to(out, shape).copy()

    def _affected(self, model, m, j):
        hi = j if model.lag is None else min(j, m + model.lag)
        return range(m, hi + 1)

    def __call__(self, sweep, j, seed):
        model = sweep.model
        if self.n != sweep.n:
            self.n = sweep.n
            # all ancestors coincide at time 1, one column suffices
            pop = sweep.prev_pop[..., :1, :] if sweep.n == 1 else sweep.prev_pop
            self.prev_all = pop[..., None, :, :]
            self.table = None
            self.acc.append(np.zeros(model.d))
        if self.mcfg.sweeps == 0:
            return
        if self.table is not None and sweep.last_idx is not None:
            self.table = _take(self.table, sweep.last_idx, axis=len(sweep.shape) - 1)
        col = self._factor(sweep, j, sweep.x)[..., None]
        self.table = col if self.table is None else np.concatenate([self.table, col], axis=-1)
        if self.mcfg.mode == "joint":
            rate = self._joint(sweep, j, seed)
        else:
            rate = self._coordinate(sweep, j, seed)
        self.acc[-1][j] = rate
        self._refresh(sweep, j, seed)
        acc = np.array(self.acc[-1][: j + 1])
        sweep.accepted = np.full(sweep.batch, acc.mean())

    def _coordinate(self, sweep, j, seed):
        model, scale = sweep.model, self.mcfg.scale
        x = sweep.x
        total = self.table.sum(axis=-1)
        cur = log_sum_exp(total, axis=-1)
        accepted, tried = 0, 0
        for s in range(self.mcfg.sweeps):
            rng = stream(seed, sweep.n, j, _rng.MUTATE, s)
            z = rng.standard_normal((j + 1,) + sweep.shape)
            log_u = np.log(rng.random((j + 1,) + sweep.shape))
            for m in range(j + 1):
                ks = list(self._affected(model, m, j))
                old_xm = x[..., m].copy()
                x[..., m] = old_xm + scale * z[m]
                new_cols = np.stack([self._factor(sweep, k, x) for k in ks], axis=-1)
                new_total = total + new_cols.sum(axis=-1) - self.table[..., ks].sum(axis=-1)
                new = log_sum_exp(new_total, axis=-1)
                ok = log_u[m] < mh_log_accept(cur, new)
                x[..., m] = np.where(ok, x[..., m], old_xm)
                okb = ok[..., None, None]
                self.table[..., ks] = np.where(okb, new_cols, self.table[..., ks])
                total = np.where(ok[..., None], new_total, total)
                cur = np.where(ok, new, cur)
                accepted += int(ok.sum())
                tried += ok.size
        self.total = total
        return accepted / tried

    def _joint(self, sweep, j, seed):
        scale = self.mcfg.scale
        x = sweep.x
        total = self.table.sum(axis=-1)
        cur = log_sum_exp(total, axis=-1)
        accepted, tried = 0, 0
        for s in range(self.mcfg.sweeps):
            rng = stream(seed, sweep.n, j, _rng.MUTATE, s)
            z = rng.standard_normal((j + 1,) + sweep.shape)
            log_u = np.log(rng.random((j + 1,) + sweep.shape))
            prop = x[..., : j + 1] + scale * np.moveaxis(z, 0, -1)
            full = x.copy()
            full[..., : j + 1] = prop
            new_table = np.stack([self._factor(sweep, k, full) for k in range(j + 1)], axis=-1)
            new_total = new_table.sum(axis=-1)
            new = log_sum_exp(new_total, axis=-1)
            ok = log_u[0] < mh_log_accept(cur, new)
            x[..., : j + 1] = np.where(ok[..., None], prop, x[..., : j + 1])
            self.table = np.where(ok[..., None, None], new_table, self.table)
            total = np.where(ok[..., None], new_total, total)
            cur = np.where(ok, new, cur)
            accepted += int(ok.sum())
            tried += ok.size
        self.total = total
        return accepted / tried

    def _refresh(self, sweep, j, seed):
        if sweep.n == 1:
            return
        total = self.total
        probs = np.exp(total - log_sum_exp(total, axis=-1)[..., None])
        draw = multinomial_resample(probs, 1, stream(seed, sweep.n, j, _rng.REFRESH))[..., 0]
        sweep.anc = draw


def run_marginal(model, observations, cfg=None, seed=0, mutation=None, batch=()):
    """Marginal space-time filter; trace gains per-(n, j) acceptance rates.

    Defaults to a single island (``cfg.n_islands = 1`` unless given).
    """
    cfg = cfg or FilterConfig(n_islands=1)
    mcfg = mutation or MutationConfig()
    if not cfg.keep_paths:
        raise ValueError("the marginal filter needs full paths")
    mutator = _Mutator(mcfg)
    t0 = _time.perf_counter()
    trace = _run(model, observations, cfg, seed, batch=batch, mutate=mutator, algo="marginal_stpf")
    trace.wall_time = _time.perf_counter() - t0
    trace.acceptance_by_space = np.array(mutator.acc) if mcfg.sweeps else None
    if mcfg.sweeps == 0:
        trace.acceptance_rate = None
    trace.meta["scale"] = mcfg.scale
    trace.meta["sweeps"] = mcfg.sweeps
    return trace
