import json

import numpy as np
import pytest

from armedforest import cli, experiment
from armedforest.dataset import Dataset
from armedforest.errors import ConfigError, RejectedParametersError
from armedforest.experiment import OUTPUT_FILES, bundled_configs, load_config, run_experiment, validate_config


def tiny_config(**changes):
    config = {"name": "tiny", "model": {"type": "model8", "beta": "3alpha/4"}, "n_train": 8, "n_test": 6,
              "seed": 3, "predictors": [{"name": "rf", "type": "forest", "params": {"n_trees": 1}},
                                        {"name": "oracle", "type": "oracle"}]}
    config.update(changes)
    return config


def write_config(tmp_path, config, name="c.json"):
    path = tmp_path / name
    path.write_text(json.dumps(config))
    return path


def error_paths(config, base_dir=None):
    return [p for p, _ in validate_config(config, base_dir)]


# -- validation ------------------------------------------------------------------

@pytest.mark.parametrize("name", sorted(bundled_configs()))
def test_bundled_configs_are_valid(name):
    config, base = load_config(name)
    assert validate_config(config, base) == []


def test_bundled_set_covers_the_reference_runs():
    names = set(bundled_configs())
    assert {"table1_n10k", "table1_n100k", "table1_n200k", "table1_n500k", "beta_neg_n100k",
            "usage_full_mtry_beta_3a4", "usage_full_mtry_beta_neg", "importance_two_armed_beta_3a4",
            "importance_two_armed_beta_neg"} <= names
    for name in ("table1_n200k", "table1_n500k"):
        assert load_config(name)[0]["large"] is True


def test_zero_training_rows_rejected():
    assert "n_train" in error_paths(tiny_config(n_train=0))


def test_undefined_arm_column_rejected():
    config = tiny_config(model={"type": "model3", "d1": 2, "d2": 2, "d3": 1},
                         predictors=[{"name": "a", "type": "armed_forest", "arm": "delta_x1_x9"}])
    assert error_paths(config) == ["predictors[0].arm"]


@pytest.mark.parametrize("change, path", [
    ({"model": {"type": "model9"}}, "model.type"),
    ({"seed": -1}, "seed"),
    ({"bogus": 1}, "bogus"),
    ({"predictors": []}, "predictors"),
    ({"predictors": [{"name": "f", "type": "forest", "params": {"mtry": 11}}]}, "predictors[0].params"),
    ({"predictors": [{"name": "f", "type": "forest", "params": {"trees": 5}}]}, "predictors[0].params.trees"),
    ({"predictors": [{"name": "f", "type": "forest"}, {"name": "f", "type": "oracle"}]}, "predictors[1].name"),
    ({"diagnostics": {"importance": {"predictors": ["nope"]}}}, "diagnostics.importance.predictors[0]"),
    ({"diagnostics": {"usage": {"predictors": ["oracle"], "watched": ["x1"]}}},
     "diagnostics.usage.predictors[0]"),
    ({"diagnostics": {"usage": {"predictors": ["rf"], "watched": ["x11"]}}}, "diagnostics.usage.watched[0]"),
    ({"diagnostics": {"screen": {"importance_from": "rf", "usage_from": "rf"}}},
     "diagnostics.screen.importance_from"),
])
def test_field_paths_of_errors(change, path):
    assert path in error_paths(tiny_config(**change))


def test_oracle_needs_model8():
    config = tiny_config(model={"type": "model3"})
    assert "predictors[1].type" in error_paths(config)


def test_csv_model_paths_resolve_relative_to_config(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("train", "test"):
        X = rng.standard_normal((30, 3))
        Dataset(X, X[:, 0]).to_csv(tmp_path / f"{name}.csv")
    config = {"model": {"type": "csv", "train": "train.csv", "test": "test.csv"}, "seed": 1,
              "predictors": [{"name": "rf", "type": "forest", "params": {"n_trees": 2}}],
              "diagnostics": {"usage": {"predictors": ["rf"], "watched": ["x2"]}}}
    assert validate_config(config, tmp_path) == []
    assert "model.train" in error_paths(config, tmp_path / "elsewhere")
    res = run_experiment(config, output_dir=tmp_path / "out", base_dir=tmp_path)
    assert res.metrics[0]["n_test"] == 30


# -- running ---------------------------------------------------------------------------

def test_repeated_runs_are_byte_identical(tmp_path):
    a = run_experiment(tiny_config(), output_dir=tmp_path / "a")
    b = run_experiment(tiny_config(), output_dir=tmp_path / "b")
    for name in OUTPUT_FILES[:-1]:
        assert (a.output_dir / name).read_bytes() == (b.output_dir / name).read_bytes()
    assert a.manifest["files"] == b.manifest["files"]
    assert a.manifest["seed"] == 3


def test_seed_override_and_thread_count(tmp_path):
    config = tiny_config(n_train=200, n_test=50,
                         predictors=[{"name": "rf", "type": "forest", "params": {"n_trees": 6}}])
    base = run_experiment(config, output_dir=tmp_path / "a", n_jobs=1)
    threaded = run_experiment(config, output_dir=tmp_path / "b", n_jobs=3)
    other = run_experiment(config, output_dir=tmp_path / "c", seed=4)
    assert base.manifest["files"] == threaded.manifest["files"]
    assert base.manifest["files"]["predictions.csv"] != other.manifest["files"]["predictions.csv"]
    assert other.manifest["config"]["seed"] == 4


def test_large_config_needs_flag(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(tiny_config(large=True), output_dir=tmp_path)
    run_experiment(tiny_config(large=True), output_dir=tmp_path, allow_large=True)


def _shrink(config):
    config = json.loads(json.dumps(config))
    config["n_train"], config["n_test"] = 300, 120
    imp = config.get("diagnostics", {}).get("importance")
    if imp:
        imp["n_permutations"] = 2
    return config


@pytest.mark.parametrize("name", sorted(bundled_configs()))
def test_bundled_configs_run_at_reduced_size(tmp_path, name):
    config, base = load_config(name)
    res = run_experiment(_shrink(config), output_dir=tmp_path, allow_large=True, n_trees=2, base_dir=base)
    for f in OUTPUT_FILES:
        assert (tmp_path / f).exists()
    assert [r["predictor"] for r in res.metrics] == [p["name"] for p in config["predictors"]]


# -- command line ------------------------------------------------------------------------

def test_validate_command_exit_codes(tmp_path, capsys):
    assert cli.main(["experiment", "validate", "table1_n10k"]) == 0
    assert cli.main(["experiment", "validate", str(write_config(tmp_path, tiny_config(n_train=0)))]) == 2
    assert "n_train" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{not json")
    assert cli.main(["experiment", "validate", str(tmp_path / "bad.json")]) == 2
    assert cli.main(["experiment", "validate", str(tmp_path / "missing.json")]) == 4


def test_large_flag_on_command_line(tmp_path):
    path = write_config(tmp_path, tiny_config(large=True))
    assert cli.main(["experiment", "run", str(path), "--output-dir", str(tmp_path / "o"), "-q"]) == 2
    assert cli.main(["experiment", "run", str(path), "--output-dir", str(tmp_path / "o"), "--large", "-q"]) == 0


def test_simulation_failure_exit_code(tmp_path, monkeypatch):
    def broken(*args, **kwargs):
        raise RejectedParametersError("covariance is not positive definite")

    monkeypatch.setattr(experiment, "simulate_model8", broken)
    path = write_config(tmp_path, tiny_config())
    assert cli.main(["experiment", "run", str(path), "--output-dir", str(tmp_path / "o"), "-q"]) == 3


def test_unwritable_output_exit_code(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    path = write_config(tmp_path, tiny_config())
    assert cli.main(["experiment", "run", str(path), "--output-dir", str(blocker / "sub"), "-q"]) == 4


def test_experiment_run_command(tmp_path, capsys):
    path = write_config(tmp_path, tiny_config())
    assert cli.main(["experiment", "run", str(path), "--output-dir", str(tmp_path / "o"), "--seed", "9",
                     "--threads", "2", "-q"]) == 0
    assert "mse" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["seed"] == 9 and set(manifest["wall_clock_seconds"]) >= {"simulate", "fit:rf"}


def test_list_command(capsys):
    assert cli.main(["experiment", "list"]) == 0
    assert "table1_n10k" in capsys.readouterr().out


def test_single_step_commands(tmp_path, capsys):
    out = str(tmp_path)
    assert cli.main(["simulate", "--n", "300", "--beta=-alpha", "--seed", "1", "--out", f"{out}/train.csv",
                     "-q"]) == 0
    assert cli.main(["simulate", "--n", "100", "--beta=-alpha", "--seed", "2", "--out", f"{out}/test.csv",
                     "-q"]) == 0
    assert Dataset.from_csv(f"{out}/train.csv").n == 300
    assert cli.main(["train", "--data", f"{out}/train.csv", "--arm", "delta_x1_x2", "--n-trees", "4",
                     "--out", f"{out}/armed.json", "-q"]) == 0
    assert cli.main(["train", "--data", f"{out}/train.csv", "--n-trees", "4", "--mtry", "10",
                     "--out", f"{out}/rf.json", "-q"]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", "--model", f"{out}/armed.json", "--data", f"{out}/test.csv"]) == 0
    assert json.loads(capsys.readouterr().out)["mse"] > 0
    assert cli.main(["importance", "--model", f"{out}/armed.json", "--data", f"{out}/test.csv",
                     "--n-permutations", "3", "--output-dir", out, "-q"]) == 0
    assert (tmp_path / "importance.csv").read_text().startswith("predictor,variable,importance")
    assert cli.main(["usage", "--model", f"{out}/rf.json", "--watched", "x1", "x2", "--output-dir", out,
                     "-q"]) == 0
    assert (tmp_path / "usage_profile.csv").exists() and (tmp_path / "leaf_usage.csv").exists()
    assert cli.main(["usage", "--model", f"{out}/rf.json", "--watched", "x42", "-q"]) == 2


def test_model3_simulation_command(tmp_path):
    assert cli.main(["simulate", "--model", "model3", "--n", "50", "--out", str(tmp_path / "m3.csv"), "-q"]) == 0
    assert Dataset.from_csv(tmp_path / "m3.csv").d == 10
