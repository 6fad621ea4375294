"""Config-driven experiments: simulate, fit, evaluate, diagnose, write tables.

A config is one JSON document::

    {
      "name": "table1_n10k",
      "model": {"type": "model8", "beta": "3alpha/4"},
      "n_train": 10000, "n_test": 10000, "seed": 2024,
      "predictors": [
        {"name": "rf_mtry3", "type": "forest", "params": {"n_trees": 1000, "mtry": 3}},
        {"name": "two_armed", "type": "armed_forest", "arm": "delta_x1_x2", "params": {}},
        {"name": "oracle", "type": "oracle"}
      ],
      "diagnostics": {
        "importance": {"predictors": ["two_armed"], "n_permutations": 1000},
        "usage": {"predictors": ["rf_mtry3"], "watched": ["x1", "x2"]},
        "screen": {"importance_from": "two_armed", "usage_from": "rf_mtry3", "margin": 0.5}
      }
    }

Every output except the manifest's timings is a deterministic function of
the config and its seed.
"""

from __future__ import annotations

import hashlib
import json
import logging
import platform
import re
import time
import zlib
from dataclasses import dataclass, fields
from importlib import metadata, resources
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import Dataset
from .diagnostics import (LOSSES, discrepancy_screen, evaluate, permutation_importance, predict_with,
                          usage_statistics, write_csv)
from .errors import ConfigError
from .forest import ForestParams, fit_armed_forest, fit_forest, resolve_arm
from .oracle import MarginalPredictor, OptimalPredictor, OracleSpec
from .sim import Model8Params, PairwiseDensitySpec, simulate_model3, simulate_model8

log = logging.getLogger(__name__)

OUTPUT_FILES = ("metrics.csv", "importance.csv", "usage_profile.csv", "leaf_usage.csv",
                "predictions.csv", "manifest.json")
PREDICTOR_TYPES = ("forest", "armed_forest", "oracle", "marginal_oracle")
TOP_LEVEL = {"name", "description", "model", "n_train", "n_test", "seed", "predictors",
             "diagnostics", "large", "output_dir"}
_FOREST_KEYS = {f.name for f in fields(ForestParams)}
_NAME_RE = re.compile(r"^[A-Za-z0-9_.-]+$")

METRIC_FIELDS = ["predictor", "type", "mse", "mae", "explained_variance", "n_test"]
IMPORTANCE_FIELDS = ["predictor", "variable", "importance", "se", "mean_permuted_loss", "e_hat",
                     "n_permutations"]
PROFILE_FIELDS = ["predictor", "operation", "n_split", "n_watched", "proportion"]


def bundled_configs() -> dict[str, Path]:
    """Names and paths of the configs shipped with the package."""
    root = resources.files("armedforest") / "configs"
    return {p.name[:-5]: Path(str(p)) for p in root.iterdir() if p.name.endswith(".json")}


def find_config(name_or_path: str | Path) -> Path:
    path = Path(name_or_path)
    if path.exists():
        return path
    bundled = bundled_configs()
    if str(name_or_path) in bundled:
        return bundled[str(name_or_path)]
    raise FileNotFoundError(f"no config file or bundled config named {str(name_or_path)!r}")


def load_config(name_or_path: str | Path) -> tuple[dict[str, Any], Path]:
    """Parsed config and the directory relative paths inside it refer to."""
    path = find_config(name_or_path)
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", f"not valid JSON: {exc}")]) from exc
    return config, path.parent


# --------------------------------------------------------------------------
# validation


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _model_columns(model: dict, base_dir: Path | None, errors: list) -> list[str] | None:
    kind = model.get("type")
    if kind == "model8":
        alpha = model.get("alpha")
        beta = model.get("beta", "3alpha/4")
        k = 8
        if alpha is not None:
            if not (isinstance(alpha, list) and alpha and all(_is_number(a) for a in alpha)):
                errors.append(("model.alpha", "must be a non-empty list of numbers"))
                return None
            k = len(alpha)
        if isinstance(beta, str):
            if beta not in ("3alpha/4", "-alpha"):
                errors.append(("model.beta", "must be '3alpha/4', '-alpha' or a list of numbers"))
        elif not (isinstance(beta, list) and len(beta) == k and all(_is_number(b) for b in beta)):
            errors.append(("model.beta", f"must be a list of {k} numbers"))
        noise = model.get("noise_sd", [1.0, 1.0, 1.0])
        if not (isinstance(noise, list) and len(noise) == 3 and all(_is_number(s) and s >= 0 for s in noise)):
            errors.append(("model.noise_sd", "must be three nonnegative numbers"))
        return [f"x{j + 1}" for j in range(k + 2)]
    if kind == "model3":
        c = model.get("c", [1.0, 1.0, 1.0])
        if not (isinstance(c, list) and len(c) == 3 and all(_is_number(v) and v > 0 for v in c)):
            errors.append(("model.c", "must be three positive numbers"))
        dims = {}
        for key, default, lo in (("d1", 2, 1), ("d2", 3, 1), ("d3", 5, 0)):
            v = model.get(key, default)
            if not (_is_int(v) and v >= lo):
                errors.append((f"model.{key}", f"must be an integer >= {lo}"))
                return None
            dims[key] = v
        return [f"x{j + 1}" for j in range(sum(dims.values()))]
    if kind == "csv":
        cols = None
        for key in ("train", "test"):
            p = model.get(key)
            if not isinstance(p, str):
                errors.append((f"model.{key}", "must be a path to a dataset CSV"))
                continue
            path = Path(p) if base_dir is None else base_dir / p
            if not path.exists():
                errors.append((f"model.{key}", f"file not found: {path}"))
                continue
            with open(path) as fh:
                header = fh.readline().strip().split(",")
            if cols is None:
                cols = header[:-1]
            elif header[:-1] != cols:
                errors.append((f"model.{key}", "columns differ from the training file"))
        return cols
    errors.append(("model.type", "must be one of 'model8', 'model3', 'csv'"))
    return None


def _check_predictor(i: int, pred, d: int | None, model_type, errors: list) -> None:
    where = f"predictors[{i}]"
    if not isinstance(pred, dict):
        errors.append((where, "must be an object"))
        return
    kind = pred.get("type")
    if kind not in PREDICTOR_TYPES:
        errors.append((f"{where}.type", f"must be one of {', '.join(PREDICTOR_TYPES)}"))
        return
    if kind in ("oracle", "marginal_oracle"):
        if model_type != "model8":
            errors.append((f"{where}.type", "closed-form oracles exist only for model8"))
        return
    params = pred.get("params", {})
    if not isinstance(params, dict):
        errors.append((f"{where}.params", "must be an object"))
        return
    unknown = sorted(set(params) - _FOREST_KEYS)
    for key in unknown:
        errors.append((f"{where}.params.{key}", "unknown forest parameter"))
    if not unknown:
        try:
            fp = ForestParams(**params)
            if d is not None:
                fp.tree_params(d).resolve_mtry(d)
        except (TypeError, ValueError) as exc:
            errors.append((f"{where}.params", str(exc)))
    if kind == "armed_forest":
        arm = pred.get("arm")
        if not isinstance(arm, str):
            errors.append((f"{where}.arm", "must name an arm function, e.g. 'delta_x1_x2'"))
        else:
            try:
                resolve_arm(arm, d)
            except ValueError as exc:
                errors.append((f"{where}.arm", str(exc)))
        if not isinstance(pred.get("fallback", True), bool):
            errors.append((f"{where}.fallback", "must be true or false"))


def _check_name_list(path: str, value, known: dict[str, str], allowed: tuple[str, ...], errors: list) -> list:
    if not isinstance(value, list) or not value:
        errors.append((path, "must be a non-empty list of predictor names"))
        return []
    for j, name in enumerate(value):
        if name not in known:
            errors.append((f"{path}[{j}]", f"unknown predictor {name!r}"))
        elif known[name] not in allowed:
            errors.append((f"{path}[{j}]", f"predictor {name!r} of type {known[name]} is not supported here"))
    return value


def validate_config(config: dict[str, Any] | str | Path, base_dir: Path | None = None) -> list[tuple[str, str]]:
    """Schema and semantic problems as ``(field_path, message)`` pairs; empty when valid."""
    if not isinstance(config, dict):
        try:
            config, base_dir = load_config(config)
        except ConfigError as exc:
            return exc.errors
    errors: list[tuple[str, str]] = []
    for key in sorted(set(config) - TOP_LEVEL):
        errors.append((key, "unknown field"))

    model = config.get("model")
    cols = None
    if not isinstance(model, dict):
        errors.append(("model", "required object with a 'type'"))
    else:
        cols = _model_columns(model, base_dir, errors)
    d = None if cols is None else len(cols)
    model_type = model.get("type") if isinstance(model, dict) else None

    for key in ("n_train", "n_test"):
        if key in config or model_type != "csv":
            v = config.get(key)
            if not (_is_int(v) and v >= 1):
                errors.append((key, "must be an integer >= 1"))
    if not (_is_int(config.get("seed", 0)) and config.get("seed", 0) >= 0):
        errors.append(("seed", "must be a nonnegative integer"))
    if not isinstance(config.get("large", False), bool):
        errors.append(("large", "must be true or false"))
    if "output_dir" in config and not isinstance(config["output_dir"], str):
        errors.append(("output_dir", "must be a string"))

    preds = config.get("predictors")
    known: dict[str, str] = {}
    if not isinstance(preds, list) or not preds:
        errors.append(("predictors", "must be a non-empty list"))
        preds = []
    for i, pred in enumerate(preds):
        name = pred.get("name") if isinstance(pred, dict) else None
        if not (isinstance(name, str) and _NAME_RE.match(name)):
            errors.append((f"predictors[{i}].name", "must be a name made of letters, digits, '_', '-', '.'"))
        elif name in known:
            errors.append((f"predictors[{i}].name", f"duplicate predictor name {name!r}"))
        elif isinstance(pred.get("type"), str):
            known[name] = pred["type"]
        _check_predictor(i, pred, d, model_type, errors)

    diag = config.get("diagnostics", {})
    if not isinstance(diag, dict):
        errors.append(("diagnostics", "must be an object"))
        diag = {}
    for key in sorted(set(diag) - {"importance", "usage", "screen"}):
        errors.append((f"diagnostics.{key}", "unknown diagnostic"))
    imp = diag.get("importance")
    imp_names, use_names = [], []
    if imp is not None:
        imp_names = _check_name_list("diagnostics.importance.predictors", imp.get("predictors"), known,
                                     PREDICTOR_TYPES, errors)
        n_perm = imp.get("n_permutations", 1000)
        if not (_is_int(n_perm) and n_perm >= 1):
            errors.append(("diagnostics.importance.n_permutations", "must be an integer >= 1"))
        if imp.get("loss", "squared") not in LOSSES:
            errors.append(("diagnostics.importance.loss", f"must be one of {', '.join(LOSSES)}"))
    use = diag.get("usage")
    if use is not None:
        use_names = _check_name_list("diagnostics.usage.predictors", use.get("predictors"), known,
                                     ("forest", "armed_forest"), errors)
        watched = use.get("watched")
        if not (isinstance(watched, list) and watched):
            errors.append(("diagnostics.usage.watched", "must be a non-empty list of column names"))
        elif cols is not None:
            for j, w in enumerate(watched):
                if w not in cols:
                    errors.append((f"diagnostics.usage.watched[{j}]", f"no column named {w!r}"))
    screen = diag.get("screen")
    if screen is not None:
        if screen.get("importance_from") not in imp_names:
            errors.append(("diagnostics.screen.importance_from", "must name a predictor listed under importance"))
        if screen.get("usage_from") not in use_names:
            errors.append(("diagnostics.screen.usage_from", "must name a predictor listed under usage"))
        if not _is_number(screen.get("margin", 0.5)):
            errors.append(("diagnostics.screen.margin", "must be a number"))
        mi = screen.get("min_importance")
        if mi is not None and not _is_number(mi):
            errors.append(("diagnostics.screen.min_importance", "must be a number"))
    return errors


def check_config(config: dict[str, Any], base_dir: Path | None = None) -> None:
    errors = validate_config(config, base_dir)
    if errors:
        raise ConfigError(errors)


# --------------------------------------------------------------------------
# running


def derive_seed(master: int, *key: int) -> int:
    """A 63-bit seed that depends only on ``master`` and ``key``."""
    state = np.random.SeedSequence(master, spawn_key=key).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode())


def make_datasets(model: dict[str, Any], n_train: int | None, n_test: int | None, seed: int,
                  base_dir: Path | None = None) -> tuple[Dataset, Dataset]:
    kind = model["type"]
    if kind == "csv":
        root = base_dir or Path(".")
        train = Dataset.from_csv(root / model["train"])
        test = Dataset.from_csv(root / model["test"])
        if n_train is not None:
            train = train.subset(np.arange(min(n_train, train.n)))
        if n_test is not None:
            test = test.subset(np.arange(min(n_test, test.n)))
        return train, test
    rng_train = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1,)))
    rng_test = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(2,)))
    if kind == "model8":
        params = model8_params(model)
        return simulate_model8(n_train, params, rng_train), simulate_model8(n_test, params, rng_test)
    spec = PairwiseDensitySpec(c0=model.get("c", [1.0] * 3)[0], c1=model.get("c", [1.0] * 3)[1],
                               c2=model.get("c", [1.0] * 3)[2], d1=model.get("d1", 2), d2=model.get("d2", 3),
                               d3=model.get("d3", 5))
    return simulate_model3(n_train, spec, rng=rng_train), simulate_model3(n_test, spec, rng=rng_test)


def model8_params(model: dict[str, Any]) -> Model8Params:
    noise = tuple(model.get("noise_sd", (1.0, 1.0, 1.0)))
    beta = model.get("beta", "3alpha/4")
    if isinstance(beta, str) and "alpha" not in model:
        return Model8Params.beta_setting(beta, noise_sd=noise)
    alpha = np.asarray(model.get("alpha", np.arange(1, 9) / 8), dtype=np.float64)
    if isinstance(beta, str):
        beta = {"3alpha/4": 0.75 * alpha, "-alpha": -alpha}[beta]
    k = alpha.shape[0]
    sigma = 2.0 ** -np.abs(np.subtract.outer(np.arange(k), np.arange(k)))
    return Model8Params(alpha=alpha, beta=np.asarray(beta, dtype=np.float64), sigma=sigma, noise_sd=noise)


def _fit(pred: dict[str, Any], train: Dataset, model: dict[str, Any], seed: int, n_jobs, n_trees):
    kind = pred["type"]
    if kind in ("oracle", "marginal_oracle"):
        spec = OracleSpec.from_params(model8_params(model))
        return (OptimalPredictor if kind == "oracle" else MarginalPredictor)(spec)
    params = dict(pred.get("params", {}))
    params.setdefault("seed", derive_seed(seed, 3, _name_key(pred["name"])))
    if n_trees is not None:
        params["n_trees"] = n_trees
    fp = ForestParams(**params)
    if kind == "forest":
        return fit_forest(train, fp, n_jobs)
    return fit_armed_forest(train, pred["arm"], fp, fit_fallback=pred.get("fallback", True), n_jobs=n_jobs)


def _fmt(x) -> Any:
    return "" if x is None else x


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _versions() -> dict[str, str]:
    from . import __version__

    out = {"python": platform.python_version(), "armedforest": __version__}
    for pkg in ("numpy", "scipy", "numba"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


@dataclass
class ExperimentResult:
    output_dir: Path
    metrics: list[dict[str, Any]]
    manifest: dict[str, Any]
    importance: dict[str, Any]
    usage: dict[str, Any]
    screen: Any = None


def run_experiment(config: dict[str, Any], output_dir: str | Path | None = None, seed: int | None = None,
                   n_jobs: int | None = None, allow_large: bool = False, n_trees: int | None = None,
                   base_dir: Path | None = None) -> ExperimentResult:
    """Run a validated config and write the output file set.

    ``seed``, ``output_dir`` and ``n_trees`` override the config; ``n_trees``
    applies to every forest (useful for smoke runs of large configs).
    """
    config = json.loads(json.dumps(config))
    if seed is not None:
        config["seed"] = seed
    check_config(config, base_dir)
    if config.get("large", False) and not allow_large:
        raise ConfigError([("large", "this config is marked large; pass --large to run it")])
    seed = config.get("seed", 0)
    out = Path(output_dir or config.get("output_dir") or Path("runs") / config.get("name", "experiment"))
    out.mkdir(parents=True, exist_ok=True)
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    model = config["model"]
    train, test = make_datasets(model, config.get("n_train"), config.get("n_test"), seed, base_dir)
    timings["simulate"] = time.perf_counter() - t0
    log.info("data ready: %d train rows, %d test rows, d=%d", train.n, test.n, train.d)

    diag = config.get("diagnostics", {})
    imp_cfg = diag.get("importance") or {}
    use_cfg = diag.get("usage") or {}
    watched = [train.column_names.index(w) for w in use_cfg.get("watched", [])]

    metric_rows, imp_rows, profile_rows, leaf_rows = [], [], [], []
    predictions = {}
    importance_reports, usage_reports, fit_reports = {}, {}, {}
    for pred in config["predictors"]:
        name = pred["name"]
        t0 = time.perf_counter()
        fitted = _fit(pred, train, model, seed, n_jobs, n_trees)
        timings[f"fit:{name}"] = time.perf_counter() - t0
        if getattr(fitted, "fit_report", None):
            fit_reports[name] = {str(k): v for k, v in fitted.fit_report.items()}
        predictions[name] = predict_with(fitted, test.features)
        rep = evaluate(fitted, test)
        metric_rows.append({"predictor": name, "type": pred["type"], "mse": rep.mse, "mae": rep.mae,
                            "explained_variance": _fmt(rep.explained_variance), "n_test": rep.n})
        log.info("%s: mse %.4f (fit %.1fs)", name, rep.mse, timings[f"fit:{name}"])
        if name in imp_cfg.get("predictors", []):
            t0 = time.perf_counter()
            ir = permutation_importance(fitted, test, imp_cfg.get("n_permutations", 1000),
                                        rng=derive_seed(seed, 4, _name_key(name)),
                                        loss=imp_cfg.get("loss", "squared"))
            timings[f"importance:{name}"] = time.perf_counter() - t0
            importance_reports[name] = ir
            imp_rows += [{"predictor": name, **row} for row in ir.rows()]
        if name in use_cfg.get("predictors", []):
            ur = usage_statistics(fitted, watched, train)
            usage_reports[name] = ur
            profile_rows += [{"predictor": name, **row} for row in ur.profile_rows()]
            leaf_rows += [{"predictor": name, **row} for row in ur.leaf_rows()]
        del fitted

    screen_out = None
    manifest_screen = None
    scr = diag.get("screen")
    if scr is not None:
        screen_out = discrepancy_screen(importance_reports[scr["importance_from"]], usage_reports[scr["usage_from"]],
                                        scr.get("margin", 0.5), scr.get("min_importance"), binary=train)
        names = train.column_names
        manifest_screen = {
            "flagged": [{"variable": names[s.variables[0]], "score": s.score} for s in screen_out.flagged],
            "candidate_arms": [s.arm for s in screen_out.candidate_arms]}

    write_csv(metric_rows, out / "metrics.csv", METRIC_FIELDS)
    write_csv(imp_rows, out / "importance.csv", IMPORTANCE_FIELDS)
    write_csv(profile_rows, out / "usage_profile.csv", PROFILE_FIELDS)
    leaf_fields = list(leaf_rows[0]) if leaf_rows else ["predictor", "tree", "data_fraction_joint"]
    write_csv(leaf_rows, out / "leaf_usage.csv", leaf_fields)
    pred_rows = [{"row": i, "y": float(test.response[i]), **{k: float(v[i]) for k, v in predictions.items()}}
                 for i in range(test.n)]
    write_csv(pred_rows, out / "predictions.csv", ["row", "y", *predictions])

    manifest = {
        "config": config,
        "seed": seed,
        "n_trees_override": n_trees,
        "versions": _versions(),
        "wall_clock_seconds": timings,
        "fit_reports": fit_reports,
        "screen": manifest_screen,
        "files": {f: _sha256(out / f) for f in OUTPUT_FILES if f != "manifest.json"},
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return ExperimentResult(out, metric_rows, manifest, importance_reports, usage_reports, screen_out)
