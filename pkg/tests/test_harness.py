import json
import os
import subprocess
import sys

import numpy as np
import pytest
from sklearn.base import clone

from stpf.cli import main
from stpf.estimators import (
    BlockParticleFilter,
    BootstrapParticleFilter,
    MarginalSpaceTimeParticleFilter,
    SpaceTimeParticleFilter,
)
from stpf.harness import PRESETS, ExperimentConfig, aggregate, preset, run_experiment, run_seed, write_columns
from stpf.models import LatticeMixture, LinearGaussianChain, simulate_data


def _small(tmp_path, **kw):
    base = dict(
        name="t",
        model_params={"d": 3},
        algorithms=["stpf", "bootstrap"],
        n=4,
        N=5,
        M=3,
        runs=3,
        out_dir=str(tmp_path),
    )
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_round_trip():
    cfg = preset("exam2-desk", seed=7)
    back = ExperimentConfig.loads(cfg.dumps())
    assert back == cfg
    assert json.loads(cfg.dumps())["block_sizes"] == [2, 4]


def test_config_unknown_key():
    with pytest.raises(ValueError, match="unknown config keys"):
        ExperimentConfig.from_dict({"bogus": 1})


@pytest.mark.parametrize(
    "kw",
    [
        dict(runs=0),
        dict(ess_threshold=2.0),
        dict(algorithms=["nope"]),
        dict(algorithms=["block_pf"], block_sizes=[2]),
        dict(model="lattice_mixture", model_params={"L": 8}, algorithms=["block_pf"], block_sizes=[3]),
        dict(model="lattice_mixture", model_params={"L": 8}, algorithms=["block_pf"]),
    ],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        ExperimentConfig(**kw).validate()


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_valid(name):
    preset(name).validate()


def test_unknown_preset():
    with pytest.raises(ValueError, match="unknown preset"):
        preset("missing")


def test_particles_default_matches_cost():
    assert ExperimentConfig(N=30, M=30).particles == 900
    assert ExperimentConfig(P=50).particles == 50


def test_run_seed_distinct():
    seeds = {run_seed(0, a, r) for a in ("stpf", "bootstrap") for r in range(50)}
    assert len(seeds) == 100
    assert run_seed(3, "stpf", 1) == run_seed(3, "stpf", 1)


def _trace_cols(values):
    return {
        "time": np.arange(1, len(values[0]) + 1),
        "log_nc": np.asarray(values[0], float),
        "ess_global": np.asarray(values[1], float),
    }


def test_aggregate_identical_runs():
    t = _trace_cols([[1.0, 2.0], [3.0, 4.0]])
    out = aggregate([t, t, t])
    np.testing.assert_array_equal(out["log_nc_var"], 0.0)
    np.testing.assert_array_equal(out["log_nc_mean"], [1.0, 2.0])


def test_aggregate_hand_computed():
    runs = [_trace_cols([[v], [0.0]]) for v in (1.0, 2.0, 6.0)]
    out = aggregate(runs)
    assert out["log_nc_mean"][0] == 3.0
    assert out["log_nc_var"][0] == pytest.approx(7.0, abs=1e-12)
    assert (out["log_nc_min"][0], out["log_nc_max"][0]) == (1.0, 6.0)


def test_aggregate_errors():
    a = _trace_cols([[1.0], [2.0]])
    with pytest.raises(ValueError, match="at least two"):
        aggregate([a])
    b = dict(a)
    b.pop("ess_global")
    with pytest.raises(ValueError, match="schema"):
        aggregate([a, b])
    c = dict(a, time=np.array([5]))
    with pytest.raises(ValueError, match="time"):
        aggregate([a, c])


def test_run_experiment_outputs(tmp_path):
    out = run_experiment(_small(tmp_path))
    assert set(out["traces"]) == {"stpf", "bootstrap"}
    assert all(len(v) == 3 for v in out["traces"].values())
    for name in ("t_config.json", "t_oracle.csv", "t_obs.csv", "t_states.csv", "t_stpf_aggregate.csv"):
        assert (tmp_path / name).exists()


def _snapshot(directory):
    # timing is wall-clock; the config records out_dir and n_jobs
    skip = ("_timing.csv", "_config.json")
    return {f: (directory / f).read_bytes() for f in sorted(os.listdir(directory)) if not f.endswith(skip)}


def test_run_experiment_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(_small(a))
    run_experiment(_small(b))
    assert _snapshot(a) == _snapshot(b)


def test_run_experiment_block_labels(tmp_path):
    cfg = _small(
        tmp_path,
        model="lattice_mixture",
        model_params={"L": 4},
        algorithms=["block_pf"],
        block_sizes=[1, 2],
        n=2,
        runs=2,
        P=20,
    )
    out = run_experiment(cfg)
    assert set(out["traces"]) == {"block_pf_b1", "block_pf_b2"}
    assert "oracle" not in out


def test_parallel_matches_serial(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(_small(a))
    run_experiment(_small(b, n_jobs=2))
    assert _snapshot(a) == _snapshot(b)


def test_write_columns_integer_time(tmp_path):
    path = tmp_path / "c.csv"
    write_columns(path, {"time": np.array([1, 2]), "v": np.array([0.1, 2.0])})
    assert path.read_text().splitlines() == ["time,v", "1,0.1", "2,2.0"]


# command line


def test_cli_run_and_aggregate(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(_small(tmp_path / "res").dumps())
    assert main(["run", "--config", str(cfg_path), "--runs", "2", "--algo", "stpf"]) == 0
    files = sorted(str(p) for p in (tmp_path / "res").glob("t_stpf_[0-9].csv"))
    assert len(files) == 2
    out = tmp_path / "agg.csv"
    assert main(["aggregate", *files, "--out", str(out)]) == 0
    assert out.read_text().startswith("time,")


def test_cli_simulate(tmp_path):
    assert main(["simulate", "--preset", "exam1-desk", "--out", str(tmp_path), "--seed", "4"]) == 0
    assert (tmp_path / "exam1-desk_obs.csv").exists()


def test_cli_run_with_data(tmp_path):
    main(["simulate", "--preset", "iid-validate", "--out", str(tmp_path)])
    rc = main(["run", "--preset", "iid-validate", "--data", str(tmp_path / "iid-validate_obs.csv"),
               "--out", str(tmp_path / "r"), "--runs", "2"])
    assert rc == 0


def test_cli_errors(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 2
    assert "stpf: error" in capsys.readouterr().err
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["run", "--preset", "iid-validate", "--runs", "0"]) == 2
    assert main(["aggregate", str(bad)]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "stpf", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "validate" in res.stdout


# estimators


@pytest.fixture(scope="module")
def chain_obs():
    model = LinearGaussianChain(3)
    _, obs = simulate_data(model, 5, 1)
    return model, obs


@pytest.mark.parametrize(
    "est",
    [
        SpaceTimeParticleFilter(n_islands=6, n_local=4),
        MarginalSpaceTimeParticleFilter(n_islands=2, n_local=5),
        BootstrapParticleFilter(n_particles=30),
    ],
    ids=lambda e: type(e).__name__,
)
def test_estimator_fit_transform_score(est, chain_obs):
    model, obs = chain_obs
    est = clone(est).set_params(model=model, random_state=3)
    means = est.fit_transform(obs)
    assert means.shape == (5, 3)
    assert est.n_features_in_ == 3
    np.testing.assert_array_equal(est.transform(obs), means)
    assert est.score(obs) == est.log_nc_


def test_marginal_estimator_acceptance(chain_obs):
    model, obs = chain_obs
    est = MarginalSpaceTimeParticleFilter(model, n_islands=2, n_local=5).fit(obs)
    assert est.acceptance_rate_.shape == (5, 3)


def test_block_estimator():
    model = LatticeMixture(4)
    _, obs = simulate_data(model, 2, 0)
    est = BlockParticleFilter(model, n_particles=40, block_size=2).fit(obs)
    assert est.filter_means_.shape == (2, 16)


def test_estimator_params_and_clone():
    est = SpaceTimeParticleFilter(n_islands=7)
    assert est.get_params()["n_islands"] == 7
    twin = clone(est)
    assert twin.get_params() == est.get_params() and twin is not est


def test_estimator_input_checks(chain_obs):
    model, obs = chain_obs
    est = SpaceTimeParticleFilter(model, n_islands=2, n_local=2)
    with pytest.raises(ValueError, match="columns"):
        est.fit(obs[:, :2])
    bad = obs.copy()
    bad[0, 0] = np.inf
    with pytest.raises(ValueError):
        est.fit(bad)
    with pytest.raises(TypeError, match="StateSpaceModel"):
        SpaceTimeParticleFilter("chain").fit(obs)
    from sklearn.exceptions import NotFittedError

    with pytest.raises(NotFittedError):
        SpaceTimeParticleFilter(model).transform(obs)
