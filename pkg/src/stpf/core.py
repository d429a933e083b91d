"""Space-time particle filter.

``N`` islands each run a local particle filter with ``M`` particles across
the ``d`` coordinates of every observation time.  An island's global weight
is the product over space-steps of its mean local weights; islands are then
weighted, and resampled when their ESS drops, exactly like the particles of
an ordinary filter.

State arrays carry an optional leading batch shape so that many independent
replications of the filter advance together.  The batch shape is ``()`` for
a single run.
"""

import csv
import math
import time as _time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from stpf import _rng
from stpf._rng import stream
from stpf.models import correction_log_weight
from stpf.resampling import (
    DegenerateWeightsError,
    adaptive_resample_decision,
    ess,
    multinomial_resample,
    normalize,
)

VARIANTS = ("double_average", "single_local")
TRACE_COLUMNS = ("time", "est_double", "est_single", "ess_global", "ess_local_mean", "log_nc", "resampled")


@dataclass
class FilterConfig:
    """Sizes and switches shared by the filters.

    ``coordinate`` selects the tracked test function ``phi(x) = x[coordinate]``
    unless ``test_function`` is given.  ``local_ess_threshold=None`` resamples
    every local system at every space-step.
    """

    n_islands: int = 100
    n_local: int = 20
    ess_threshold: float = 0.5
    local_ess_threshold: float | None = None
    variant: str = "double_average"
    coordinate: int = 0
    test_function: object = None
    keep_paths: bool = True

    def validate(self):
        if self.n_islands < 1 or self.n_local < 1:
            raise ValueError("n_islands and n_local must be >= 1")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        if self.local_ess_threshold is not None and not 0.0 <= self.local_ess_threshold <= 1.0:
            raise ValueError("local_ess_threshold must lie in [0, 1]")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        return self

    def phi(self, x):
        if self.test_function is not None:
            return self.test_function(x)
        return x[..., self.coordinate]


@dataclass
class GlobalState:
    """Islands after a completed time step.

    ``x``: local particles, ``batch + (N, M, w)``; ``w = d`` when full paths
    are kept.  ``prev``: per-particle previous-state summaries used by the next
    time step.  ``log_w``: normalized island log-weights ``batch + (N,)``.
    """

    x: np.ndarray
    prev: np.ndarray
    prev_raw: np.ndarray | None
    log_w: np.ndarray
    log_nc: np.ndarray
    time: int
    batch: tuple = ()

    @property
    def n_islands(self):
        return self.log_w.shape[-1]


@dataclass
class StepRecord:
    est_double: np.ndarray
    est_single: np.ndarray
    ess_global: np.ndarray
    ess_local_mean: np.ndarray
    log_nc: np.ndarray
    resampled: np.ndarray
    means: np.ndarray | None = None
    acceptance_rate: np.ndarray | None = None


@dataclass
class FilterTrace:
    """One record per processed observation.

    Scalar-per-step columns have shape ``batch + (n,)``; ``means`` (the
    double-average filter mean of every coordinate) has ``batch + (n, d)``.
    """

    algo: str
    time: np.ndarray
    est_double: np.ndarray
    est_single: np.ndarray
    ess_global: np.ndarray
    ess_local_mean: np.ndarray
    log_nc: np.ndarray
    resampled: np.ndarray
    means: np.ndarray | None = None
    acceptance_rate: np.ndarray | None = None
    acceptance_by_space: np.ndarray | None = None
    wall_time: float = 0.0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, algo, records, **kw):
        def stack(name):
            vals = [getattr(r, name) for r in records]
            if any(v is None for v in vals):
                return None
            return np.stack(vals, axis=-1 if np.ndim(vals[0]) == np.ndim(records[0].log_nc) else -2)

        return cls(
            algo=algo,
            time=np.arange(1, len(records) + 1),
            est_double=stack("est_double"),
            est_single=stack("est_single"),
            ess_global=stack("ess_global"),
            ess_local_mean=stack("ess_local_mean"),
            log_nc=stack("log_nc"),
            resampled=stack("resampled"),
            means=stack("means"),
            acceptance_rate=stack("acceptance_rate"),
            **kw,
        )

    def columns(self):
        cols = {
            "time": self.time,
            "est_double": self.est_double,
            "est_single": self.est_single,
            "ess_global": self.ess_global,
            "ess_local_mean": self.ess_local_mean,
            "log_nc": self.log_nc,
            "resampled": self.resampled.astype(int),
        }
        if self.acceptance_rate is not None:
            cols["acceptance_rate"] = self.acceptance_rate
        return cols

    def to_csv(self, path):
        """Write a single-run trace; reals keep full round-trip precision."""
        if np.ndim(self.log_nc) != 1:
            raise ValueError("only single-run traces can be written")
        cols = self.columns()
        names = list(cols)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(names)
            for k in range(len(self.time)):
                writer.writerow([_fmt(cols[c][k]) for c in names])


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def read_trace_csv(path):
    """Read a trace CSV into a dict of column arrays."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return {name: data[:, k] for k, name in enumerate(header)}


def _take(arr, idx, axis):
    """Gather along ``axis`` of ``arr`` with an index array over that axis."""
    axis = axis % arr.ndim
    if idx.ndim != axis + 1 or idx.shape[:axis] != arr.shape[:axis]:
        raise ValueError("index array must match the leading axes")
    rest = arr.shape[axis + 1 :]
    # whole trailing rows are copied; far cheaper than an elementwise gather
    lead = math.prod(arr.shape[:axis])
    flat = arr.reshape((lead, arr.shape[axis]) + rest)
    rows = np.arange(lead)[:, None]
    return flat[rows, idx.reshape(lead, -1)].reshape(idx.shape + rest)


def _window(model, cfg):
    """Width of the stored partial path (trailing coordinates)."""
    if cfg.keep_paths:
        return model.d
    sw = model.summary_window
    if model.lag is None or sw is None:
        raise ValueError(f"{model.name}: keep_paths=False needs bounded lag and summary window")
    if not model.exact_factorization:
        raise ValueError("correction weights need full paths")
    return max(model.lag + 1, sw)


def _stateless(model, cfg):
    # nothing a later step reads survives local resampling
    return not cfg.keep_paths and model.lag == 0 and model.summary_window == 0 and model.summary_dim == 0


def init_state(model, cfg, batch=()):
    """Islands before the first observation: every ancestor is ``X_0``."""
    cfg.validate()
    batch = tuple(batch)
    N, M = cfg.n_islands, cfg.n_local
    w = _window(model, cfg)
    summary = model.prev_summary(1, model.x0)
    prev = np.broadcast_to(summary, batch + (N, M, summary.shape[-1]))
    prev_raw = np.broadcast_to(model.x0, batch + (N, M, model.d)) if not model.exact_factorization else None
    return GlobalState(
        x=np.zeros(batch + (N, M, w)),
        prev=prev,
        prev_raw=prev_raw,
        log_w=np.full(batch + (N,), -math.log(N)),
        log_nc=np.zeros(batch),
        time=0,
        batch=batch,
    )


class _LocalSweep:
    """Mutable working set of one time step, shared with mutation hooks."""

    def __init__(self, state, model, cfg, n, y):
        N, M = cfg.n_islands, cfg.n_local
        self.model, self.cfg, self.n, self.y = model, cfg, n, y
        self.batch = state.batch
        self.shape = state.batch + (N, M)
        self.prev_pop = state.prev
        self.prev_raw_pop = state.prev_raw
        self.anc = np.broadcast_to(np.arange(M), self.shape).copy()
        self.window = _window(model, cfg)
        self.x = np.zeros(self.shape + (self.window,))
        self.filled = 0
        self.stateless = _stateless(model, cfg)
        self.inc = np.zeros(state.batch + (N,))
        self.local_log_w = None
        self.local_ess_sum = np.zeros(state.batch)
        self.steps = 0
        self.last_idx = None
        self.accepted = None

    def prev(self):
        return _take(self.prev_pop, self.anc, axis=-2)

    def partial(self, j):
        """Stored coordinates preceding ``j`` (full prefix when paths are kept)."""
        if self.cfg.keep_paths:
            return self.x[..., :j]
        have = min(j, self.window)
        return self.x[..., self.window - have :]

    def store(self, j, xj):
        if self.cfg.keep_paths:
            self.x[..., j] = xj
            self.filled = max(self.filled, j + 1)
        else:
            self.x[..., :-1] = self.x[..., 1:]
            self.x[..., -1] = xj

    def stored_through(self, j):
        if self.cfg.keep_paths:
            return self.x[..., : j + 1]
        have = min(j + 1, self.window)
        return self.x[..., self.window - have :]

    def reweight(self, lw, where, force_resample, rng):
        """Fold local log-weights into the island increment, then resample."""
        M = self.cfg.n_local
        adaptive = self.cfg.local_ess_threshold is not None
        if adaptive:
            prior = self.local_log_w if self.local_log_w is not None else np.full(self.shape, -math.log(M))
            lw = prior + lw
            probs, lse = normalize(lw, where=where)
            self.inc = self.inc + lse
        else:
            probs, lse = normalize(lw, where=where)
            self.inc = self.inc + (lse - math.log(M))
        e = ess(probs)
        self.local_ess_sum = self.local_ess_sum + e.mean(axis=-1)
        self.steps += 1
        if adaptive:
            do = force_resample | adaptive_resample_decision(e, self.cfg.local_ess_threshold, M)
            self.local_log_w = np.where(do[..., None], -math.log(M), lw - lse[..., None])
        else:
            do = np.ones(e.shape, dtype=bool)
        self.last_idx = None
        if M == 1 or self.stateless:
            return
        idx = multinomial_resample(probs, M, rng)
        if adaptive:
            idx = np.where(do[..., None], idx, np.arange(M))
        self.apply_local_index(idx)

    def apply_local_index(self, idx):
        self.last_idx = idx
        self.anc = np.take_along_axis(self.anc, idx, axis=-1)
        if self.cfg.keep_paths:
            # columns past the newest coordinate are still empty
            k = self.filled
            self.x[..., :k] = _take(self.x[..., :k], idx, axis=-2)
        else:
            self.x = _take(self.x, idx, axis=-2)


def _where(n, j):
    return f"time {n}, space {j + 1}"


def local_space_step(sweep, j, seed):
    """Extend every local particle by coordinate ``j`` and resample locals."""
    model, n, y = sweep.model, sweep.n, sweep.y
    prev = sweep.prev()
    xj = model.propose(n, j, y, prev, sweep.partial(j), stream(seed, n, j, _rng.PROPOSE), sweep.shape)
    sweep.store(j, xj)
    lw = model.local_log_weight(n, j, y, prev, sweep.stored_through(j))
    last = j == model.d - 1 and model.exact_factorization
    sweep.reweight(lw, _where(n, j), last, stream(seed, n, j, _rng.LOCAL))


def _correction_step(sweep, seed):
    model, n = sweep.model, sweep.n
    x_prev = _take(sweep.prev_raw_pop, sweep.anc, axis=-2)
    lw = correction_log_weight(model, n, sweep.y, x_prev, sweep.x)
    sweep.reweight(lw, f"time {n}, correction", True, stream(seed, n, model.d, _rng.CORRECT))


def global_update(log_w, inc, threshold, seed, n, where=None):
    """Weight islands (or particles) by ``inc`` and maybe resample.

    Returns ``(new_log_w, lse, probs, ess, resampled, idx)``; ``lse`` is the
    log normalizing-constant increment, ``probs`` the pre-resampling weights,
    ``idx`` the resampling indices (identity where no resampling happened).
    """
    count = log_w.shape[-1]
    lw = log_w + inc
    probs, lse = normalize(lw, where=where or f"time {n}, global")
    e = ess(probs)
    do = np.asarray(adaptive_resample_decision(e, threshold, count))
    ident = np.broadcast_to(np.arange(count), probs.shape)
    if np.any(do):
        idx = multinomial_resample(probs, count, stream(seed, n, 0, _rng.GLOBAL))
        idx = np.where(do[..., None], idx, ident)
    else:
        idx = ident
    new_log_w = np.where(do[..., None], -math.log(count), lw - lse[..., None])
    return new_log_w, lse, probs, e, do, idx


def filter_estimate(x, weights, phi, variant="double_average"):
    """Island-weighted estimate of ``E[phi(X_n) | y_{1:n}]``.

    ``x``: ``batch + (N, M, d)`` local particles after the last local
    resampling; ``weights``: normalized island weights ``batch + (N,)``.
    """
    if variant == "double_average":
        per_island = phi(x).mean(axis=-1)
    elif variant == "single_local":
        per_island = phi(x[..., 0, :])
    else:
        raise ValueError(f"variant must be one of {VARIANTS}")
    return np.sum(weights * per_island, axis=-1)


def nc_estimate(state):
    """Log normalizing-constant estimate accumulated so far."""
    return state.log_nc


def time_step(state, y, model, cfg, seed, mutate=None):
    """Advance every island through one observation; returns (state, record)."""
    n = state.time + 1
    y = np.asarray(y, dtype=float)
    sweep = _LocalSweep(state, model, cfg, n, y)
    for j in range(model.d):
        local_space_step(sweep, j, seed)
        if mutate is not None:
            mutate(sweep, j, seed)
    if not model.exact_factorization:
        _correction_step(sweep, seed)

    log_w, lse, probs, e, do, idx = global_update(state.log_w, sweep.inc, cfg.ess_threshold, seed, n)
    log_nc = state.log_nc + lse

    if cfg.keep_paths:
        est_d = filter_estimate(sweep.x, probs, cfg.phi, "double_average")
        est_s = filter_estimate(sweep.x, probs, cfg.phi, "single_local")
        means = np.sum(probs[..., None] * sweep.x.mean(axis=-2), axis=-2)
    else:
        est_d = est_s = np.full(state.batch, np.nan)
        means = None

    x = sweep.x
    if np.any(do) and not sweep.stateless:
        x = _take(x, idx, axis=-3)
    # the locals' own states become next step's ancestors
    prev = model.prev_summary(n + 1, x)
    prev_raw = x if not model.exact_factorization else None

    acc = None
    if sweep.accepted is not None:
        acc = sweep.accepted
    record = StepRecord(
        est_double=est_d,
        est_single=est_s,
        ess_global=e,
        ess_local_mean=sweep.local_ess_sum / max(sweep.steps, 1),
        log_nc=log_nc,
        resampled=do,
        means=means,
        acceptance_rate=acc,
    )
    new_state = GlobalState(
        x=x,
        prev=prev,
        prev_raw=prev_raw,
        log_w=log_w,
        log_nc=log_nc,
        time=n,
        batch=state.batch,
    )
    return new_state, record


def check_observations(model, observations):
    obs = np.asarray(observations, dtype=float)
    if obs.ndim != 2 or obs.shape[0] == 0:
        raise ValueError("empty observation sequence")
    if obs.shape[1] != model.obs_dim:
        raise ValueError(f"observations have {obs.shape[1]} columns, model expects {model.obs_dim}")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observations must be finite")
    return obs


def run(model, observations, cfg, seed, batch=(), mutate=None, algo="stpf"):
    """Run the filter over all observations and return its trace.

    ``batch`` (e.g. ``(R,)``) runs that many independent replications in
    one vectorized pass; every trace column then gains leading ``batch`` axes.
    """
    obs = check_observations(model, observations)
    cfg.validate()
    t0 = _time.perf_counter()
    state = init_state(model, cfg, batch)
    records = []
    for y in obs:
        state, rec = time_step(state, y, model, cfg, seed, mutate=mutate)
        records.append(rec)
    trace = FilterTrace.from_records(algo, records, wall_time=_time.perf_counter() - t0)
    trace.meta.update({"model": model.name, "seed": int(seed), "N": cfg.n_islands, "M": cfg.n_local})
    return trace


__all__ = [
    "DegenerateWeightsError",
    "FilterConfig",
    "FilterTrace",
    "GlobalState",
    "check_observations",
    "filter_estimate",
    "global_update",
    "init_state",
    "local_space_step",
    "logsumexp",
    "nc_estimate",
    "read_trace_csv",
    "run",
    "time_step",
]
