"""Replicated experiments: configuration, runs across seeds, aggregation, CSV output."""

import csv
import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed

from stpf.baselines import block_pf_run, bootstrap_pf_run
from stpf.core import FilterConfig, read_trace_csv, run
from stpf.marginal import MutationConfig, run_marginal
from stpf.models import make_model, simulate_data, write_data_csv
from stpf.oracles import chain_kalman, markov_space_kalman

log = logging.getLogger(__name__)

ALGORITHMS = ("stpf", "marginal_stpf", "bootstrap", "block_pf")
_ALGO_CODE = {name: k for k, name in enumerate(ALGORITHMS)}


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    model: str = "linear_gaussian_chain"
    model_params: dict = field(default_factory=lambda: {"d": 10})
    algorithms: list = field(default_factory=lambda: ["stpf", "bootstrap"])
    n: int = 100
    N: int = 100
    M: int = 20
    P: int | None = None
    block_sizes: list = field(default_factory=list)
    marginal_N: int | None = None
    marginal_M: int | None = None
    ess_threshold: float = 0.5
    variant: str = "double_average"
    coordinate: int = 0
    scale: float = 0.5
    sweeps: int = 1
    runs: int = 10
    seed: int = 0
    data_seed: int = 12345
    out_dir: str = "results"
    n_jobs: int = 1

    def validate(self):
        for name in ("n", "N", "M", "runs", "n_jobs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.P is not None and self.P < 1:
            raise ValueError("P must be >= 1")
        if not 0.0 <= self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in [0, 1]")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ValueError(f"unknown algorithms {sorted(unknown)}")
        if "block_pf" in self.algorithms:
            if self.model != "lattice_mixture":
                raise ValueError("block_pf needs the lattice_mixture model")
            if not self.block_sizes:
                raise ValueError("block_pf needs block_sizes")
            L = self.model_params.get("L")
            for b in self.block_sizes:
                if b < 1 or L % b:
                    raise ValueError(f"block size {b} does not divide L={L}")
        return self

    @property
    def particles(self):
        return self.P if self.P is not None else self.N * self.M

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        extra = set(data) - names
        if extra:
            raise ValueError(f"unknown config keys {sorted(extra)}")
        return cls(**data)

    def dumps(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


PRESETS = {
    "exam1-desk": dict(
        name="exam1-desk",
        model="linear_gaussian_chain",
        model_params={"d": 10},
        algorithms=["stpf", "bootstrap"],
        n=200,
        N=100,
        M=20,
        runs=30,
    ),
    "exam2-desk": dict(
        name="exam2-desk",
        model="lattice_mixture",
        model_params={"L": 8, "r": 1.0, "delta": 1.0, "nu": 10.0},
        algorithms=["stpf", "marginal_stpf", "bootstrap", "block_pf"],
        n=20,
        N=30,
        M=30,
        block_sizes=[2, 4],
        scale=0.5,
        sweeps=1,
        coordinate=3 * 8 + 3,
        runs=30,
    ),
    "iid-validate": dict(
        name="iid-validate",
        model="iid_product",
        model_params={"d": 3, "q_sd": math.sqrt(2.25 + 1.5 * math.sqrt(1.25))},  # rho = 1.5
        algorithms=["stpf"],
        n=2,
        N=2,
        M=2,
        ess_threshold=1.0,
        runs=10,
    ),
}

# full-scale settings reported for the two numerical examples
PAPER_SCALE = {
    "exam1": {"d": [10, 100, 1000], "n": 1000, "N": 1000, "M": 100, "runs": 100, "sigma_x2": 1.0, "sigma_y2": 1.0},
    "exam2": {"L": 32, "r": 1, "delta": 1, "nu": 10, "N": 100, "M": 100, "marginal": {"N": 1, "M": 1000},
              "b": [4, 8], "scale": 0.5},
}


def preset(name, **overrides):
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return ExperimentConfig(**base)


def run_seed(master, algo, run_index, extra=0):
    """Per-run seed derived from the master seed, algorithm and run index."""
    ss = np.random.SeedSequence(int(master), spawn_key=(_ALGO_CODE[algo], int(extra), int(run_index)))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def _filter_config(cfg, N, M):
    return FilterConfig(
        n_islands=N, n_local=M, ess_threshold=cfg.ess_threshold, variant=cfg.variant, coordinate=cfg.coordinate
    )


def run_one(cfg, model, obs, algo, seed, b=None):
    if algo == "stpf":
        return run(model, obs, _filter_config(cfg, cfg.N, cfg.M), seed)
    if algo == "marginal_stpf":
        fc = _filter_config(cfg, cfg.marginal_N or cfg.N, cfg.marginal_M or cfg.M)
        return run_marginal(model, obs, fc, seed, MutationConfig(scale=cfg.scale, sweeps=cfg.sweeps))
    if algo == "bootstrap":
        return bootstrap_pf_run(model, obs, cfg.particles, _filter_config(cfg, 1, 1), seed)
    if algo == "block_pf":
        return block_pf_run(model, obs, cfg.particles, b, _filter_config(cfg, 1, 1), seed)
    raise ValueError(f"unknown algorithm {algo!r}")


def _algo_labels(cfg):
    for algo in cfg.algorithms:
        if algo == "block_pf":
            for b in cfg.block_sizes:
                yield f"block_pf_b{b}", algo, b
        else:
            yield algo, algo, None


def run_experiment(cfg, data=None):
    """Simulate (or take) one dataset, run every algorithm ``cfg.runs`` times.

    Writes ``{name}_{algo}_{run}.csv`` traces, ``{name}_{algo}_aggregate.csv``,
    the data, an oracle file where one exists, and ``{name}_timing.csv``
    (wall-clock, the only output that is not reproducible byte for byte).
    Returns a dict of written paths.
    """
    cfg.validate()
    model = make_model(cfg.model, **cfg.model_params)
    os.makedirs(cfg.out_dir, exist_ok=True)
    out = {"traces": {}, "aggregates": {}}
    if data is None:
        states, obs = simulate_data(model, cfg.n, cfg.data_seed)
        path = os.path.join(cfg.out_dir, f"{cfg.name}_states.csv")
        write_data_csv(path, states, model, cfg.data_seed, kind="states")
        out["states"] = path
    else:
        obs = np.asarray(data, dtype=float)
    path = os.path.join(cfg.out_dir, f"{cfg.name}_obs.csv")
    write_data_csv(path, obs, model, cfg.data_seed, kind="obs")
    out["obs"] = path
    with open(os.path.join(cfg.out_dir, f"{cfg.name}_config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps() + "\n")

    oracle = _oracle(model, obs)
    if oracle is not None:
        path = os.path.join(cfg.out_dir, f"{cfg.name}_oracle.csv")
        write_columns(path, oracle)
        out["oracle"] = path

    timing = []
    for label, algo, b in _algo_labels(cfg):
        seeds = [run_seed(cfg.seed, algo, r, extra=b or 0) for r in range(cfg.runs)]
        # independent seeds; results are gathered in run order
        traces = Parallel(n_jobs=cfg.n_jobs)(delayed(run_one)(cfg, model, obs, algo, s, b) for s in seeds)
        files = []
        for r, (seed, trace) in enumerate(zip(seeds, traces)):
            path = os.path.join(cfg.out_dir, f"{cfg.name}_{label}_{r}.csv")
            trace.to_csv(path)
            files.append(path)
            timing.append({"algo": label, "run": r, "seed": seed, "wall_time": trace.wall_time})
            log.info("%s run %d: log_nc %.6g (%.2fs)", label, r, trace.log_nc[-1], trace.wall_time)
        out["traces"][label] = files
        if len(files) >= 2:
            path = os.path.join(cfg.out_dir, f"{cfg.name}_{label}_aggregate.csv")
            write_columns(path, aggregate(files))
            out["aggregates"][label] = path
    path = os.path.join(cfg.out_dir, f"{cfg.name}_timing.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["algo", "run", "seed", "wall_time"])
        writer.writeheader()
        writer.writerows(timing)
    out["timing"] = path
    return out


def _oracle(model, obs):
    if model.name == "linear_gaussian_chain":
        means, covs, ll = chain_kalman(model, obs)
        var = covs[:, 0, 0]
    elif model.name == "markov_space":
        means, var_all, ll = markov_space_kalman(model, obs)
        var = var_all[:, 0]
    else:
        return None
    return {"time": np.arange(1, len(obs) + 1), "mean": means[:, 0], "var": var, "log_lik": ll}


def write_columns(path, cols):
    names = list(cols)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for k in range(len(cols[names[0]])):
            row = []
            for name in names:
                v = cols[name][k]
                row.append(str(int(v)) if name == "time" else repr(float(v)))
            writer.writerow(row)


def aggregate(paths):
    """Per-time-step mean, unbiased variance, min and max of every column.

    Takes trace CSV paths (or already-read column dicts).
    """
    traces = [read_trace_csv(p) if isinstance(p, (str, os.PathLike)) else p for p in paths]
    if len(traces) < 2:
        raise ValueError("aggregate needs at least two runs")
    header = list(traces[0])
    for t in traces[1:]:
        if list(t) != header or len(t["time"]) != len(traces[0]["time"]):
            raise ValueError("trace schema mismatch across files")
        if not np.array_equal(t["time"], traces[0]["time"]):
            raise ValueError("trace time columns differ across files")
    out = {"time": traces[0]["time"]}
    for name in header:
        if name == "time":
            continue
        stack = np.stack([t[name] for t in traces])
        out[f"{name}_mean"] = stack.mean(axis=0)
        out[f"{name}_var"] = stack.var(axis=0, ddof=1)
        out[f"{name}_min"] = stack.min(axis=0)
        out[f"{name}_max"] = stack.max(axis=0)
    return out
