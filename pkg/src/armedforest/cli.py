"""Command-line interface.

    armedforest simulate --model model8 --beta 3alpha/4 --n 10000 --out train.csv
    armedforest train --data train.csv --arm delta_x1_x2 --out model.json
    armedforest evaluate --model model.json --data test.csv
    armedforest importance --model model.json --data test.csv --n-permutations 1000
    armedforest usage --model model.json --watched x1 x2
    armedforest experiment run table1_n10k --output-dir runs/t1
    armedforest experiment validate my_config.json

Exit codes: 0 success, 2 invalid config or arguments, 3 simulation
failure, 4 I/O failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .dataset import Dataset
from .diagnostics import evaluate, permutation_importance, usage_statistics, write_csv
from .errors import ArmedForestError, ConfigError, NumericError, RejectedParametersError, SamplerStallError
from .experiment import (IMPORTANCE_FIELDS, PROFILE_FIELDS, bundled_configs, load_config, run_experiment,
                         validate_config)
from .forest import THREADS_ENV, ForestParams, fit_armed_forest, fit_forest, load_json, save_json
from .sim import Model8Params, PairwiseDensitySpec, simulate_model3, simulate_model8

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_SIMULATION, EXIT_IO = 0, 1, 2, 3, 4


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads for tree fitting (default: ${THREADS_ENV} or 1)")
    p.add_argument("--output-dir", type=Path, default=None, help="directory for output files")
    p.add_argument("--large", action="store_true", help="allow configs marked large (200k/500k rows)")
    p.add_argument("-q", "--quiet", action="store_true", help="only print errors")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="armedforest", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="draw a dataset and write it as CSV")
    p.add_argument("--model", choices=["model8", "model3"], default="model8")
    p.add_argument("--beta", default="3alpha/4", choices=["3alpha/4", "-alpha"])
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--c", type=float, nargs=3, default=[1.0, 1.0, 1.0], metavar=("C0", "C1", "C2"))
    p.add_argument("--d1", type=int, default=2)
    p.add_argument("--d2", type=int, default=3)
    p.add_argument("--d3", type=int, default=5)
    p.add_argument("--out", type=Path, default=None, help="CSV path (default: <output-dir>/data.csv)")

    p = sub.add_parser("train", parents=[common], help="fit a forest or armed forest on a CSV dataset")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--arm", default=None, help="arm function, e.g. delta_x1_x2 (default: plain forest)")
    p.add_argument("--n-trees", type=int, default=1000)
    p.add_argument("--mtry", type=int, default=None)
    p.add_argument("--min-node-distinct", type=int, default=5)
    p.add_argument("--resample", choices=["bootstrap", "subsample"], default="bootstrap")
    p.add_argument("--subsample-fraction", type=float, default=1.0)
    p.add_argument("--no-fallback", action="store_true", help="skip the fallback forest of an armed forest")
    p.add_argument("--out", type=Path, default=None, help="model JSON (default: <output-dir>/model.json)")

    p = sub.add_parser("evaluate", parents=[common], help="test-set metrics of a saved model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)

    p = sub.add_parser("importance", parents=[common], help="permutation importance of a saved model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--n-permutations", type=int, default=1000)
    p.add_argument("--loss", choices=["squared", "absolute"], default="squared")

    p = sub.add_parser("usage", parents=[common], help="variable-usage statistics of a saved model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--watched", nargs="+", required=True, help="column names such as x1 x2")
    p.add_argument("--data", type=Path, default=None, help="training CSV, for column names")

    p = sub.add_parser("experiment", help="run or validate an experiment config")
    esub = p.add_subparsers(dest="action", required=True)
    r = esub.add_parser("run", parents=[common], help="run a config file or bundled config name")
    r.add_argument("config")
    r.add_argument("--n-trees", type=int, default=None, help="override the tree count of every forest")
    v = esub.add_parser("validate", parents=[common], help="check a config without running it")
    v.add_argument("config")
    esub.add_parser("list", help="list bundled configs")
    return parser


def _out_path(args, given: Path | None, default_name: str) -> Path:
    if given is not None:
        given.parent.mkdir(parents=True, exist_ok=True)
        return given
    root = args.output_dir or Path(".")
    root.mkdir(parents=True, exist_ok=True)
    return root / default_name


def _cmd_simulate(args) -> int:
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    if args.model == "model8":
        data = simulate_model8(args.n, Model8Params.beta_setting(args.beta), rng)
    else:
        spec = PairwiseDensitySpec(c0=args.c[0], c1=args.c[1], c2=args.c[2], d1=args.d1, d2=args.d2, d3=args.d3)
        data = simulate_model3(args.n, spec, rng=rng)
    path = _out_path(args, args.out, "data.csv")
    data.to_csv(path)
    logging.info("wrote %d rows to %s", data.n, path)
    return EXIT_OK


def _cmd_train(args) -> int:
    data = Dataset.from_csv(args.data)
    params = ForestParams(n_trees=args.n_trees, mtry=args.mtry, min_node_distinct=args.min_node_distinct,
                          resample=args.resample, subsample_fraction=args.subsample_fraction,
                          seed=args.seed if args.seed is not None else 0)
    if args.arm:
        model = fit_armed_forest(data, args.arm, params, fit_fallback=not args.no_fallback, n_jobs=args.threads)
    else:
        model = fit_forest(data, params, n_jobs=args.threads)
    path = _out_path(args, args.out, "model.json")
    save_json(model, path)
    logging.info("wrote %s", path)
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    rep = evaluate(load_json(args.model), Dataset.from_csv(args.data))
    print(json.dumps({"mse": rep.mse, "mae": rep.mae, "explained_variance": rep.explained_variance, "n": rep.n}))
    return EXIT_OK


def _cmd_importance(args) -> int:
    test = Dataset.from_csv(args.data)
    rep = permutation_importance(load_json(args.model), test, args.n_permutations,
                                 rng=args.seed if args.seed is not None else 0, loss=args.loss)
    rows = [{"predictor": args.model.stem, **row} for row in rep.rows()]
    path = _out_path(args, None, "importance.csv")
    write_csv(rows, path, IMPORTANCE_FIELDS)
    for row in sorted(rows, key=lambda r: -r["importance"]):
        print(f"{row['variable']:>8}  {row['importance']:10.2f}")
    return EXIT_OK


def _cmd_usage(args) -> int:
    model = load_json(args.model)
    train = Dataset.from_csv(args.data) if args.data else None
    names = train.column_names if train else [f"x{j + 1}" for j in range(model.n_features)]
    missing = [w for w in args.watched if w not in names]
    if missing:
        raise ConfigError([("watched", f"unknown column {w!r}") for w in missing])
    rep = usage_statistics(model, [names.index(w) for w in args.watched], train)
    root = args.output_dir or Path(".")
    root.mkdir(parents=True, exist_ok=True)
    write_csv([{"predictor": args.model.stem, **r} for r in rep.profile_rows()], root / "usage_profile.csv",
              PROFILE_FIELDS)
    write_csv([{"predictor": args.model.stem, **r} for r in rep.leaf_rows()], root / "leaf_usage.csv")
    print(json.dumps({"mid_construction_proportion": rep.mid_construction_proportion(),
                      "median_joint_leaf_proportion": float(np.median(rep.leaf_usage["all"])),
                      "data_fraction_joint": rep.data_fraction_joint}))
    return EXIT_OK


def _cmd_experiment(args) -> int:
    if args.action == "list":
        for name, path in sorted(bundled_configs().items()):
            with open(path) as fh:
                print(f"{name:30s} {json.load(fh).get('description', '')}")
        return EXIT_OK
    config, base_dir = load_config(args.config)
    if args.action == "validate":
        if args.seed is not None:
            config["seed"] = args.seed
        errors = validate_config(config, base_dir)
        if errors:
            raise ConfigError(errors)
        print("ok")
        return EXIT_OK
    result = run_experiment(config, output_dir=args.output_dir, seed=args.seed, n_jobs=args.threads,
                            allow_large=args.large, n_trees=args.n_trees, base_dir=base_dir)
    for row in result.metrics:
        print(f"{row['predictor']:>20}  mse {row['mse']:.4f}  mae {row['mae']:.4f}")
    print(f"outputs in {result.output_dir}")
    return EXIT_OK


COMMANDS = {"simulate": _cmd_simulate, "train": _cmd_train, "evaluate": _cmd_evaluate,
            "importance": _cmd_importance, "usage": _cmd_usage, "experiment": _cmd_experiment}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if getattr(args, "quiet", False) else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if threads is not None:
        os.environ[THREADS_ENV] = str(threads)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        for path, message in exc.errors:
            print(f"config error at {path or '<root>'}: {message}", file=sys.stderr)
        return EXIT_CONFIG
    except (RejectedParametersError, SamplerStallError, NumericError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"i/o error: unreadable JSON ({exc})", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ArmedForestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, ValueError) and not isinstance(exc, ArmedForestError) else EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
