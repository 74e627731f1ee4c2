"""Command line interface.

Every ``ExperimentConfig`` field is a flag (``--fairness-target EOd``); a
flat ``key = value`` file given with ``--config`` supplies defaults that
explicit flags override.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import types
import typing
from pathlib import Path

import numpy as np

from . import experiment as ex
from .dataset import save_internal_csv
from .group_predictor import confusion_csv, confusion_matrix
from .selection import mix_values, sweep_csv

log = logging.getLogger("fairmtl")

_FLAG_HELP = {
    "dataset": "adult, compas, generic-csv or internal",
    "sensitive_source": "true or predicted",
    "group_specific_prediction": "D flag: predict with the group's own model",
    "fairness_target": "none, EOp+, EOp- or EOd",
    "include_sensitive_feature": "S flag: append the sensitive attribute to the features",
    "cv_subsample": "training samples used for cross-validation (0 = all)",
    "rho": "fix rho (with --lam and --theta) and skip cross-validation",
    "full_grid": "use the full hyperparameter grid instead of the thinned one",
    "seed": "master seed for splits, folds, subsampling and the forest",
}


def _field_type(f: dataclasses.Field):
    hints = typing.get_type_hints(ex.ExperimentConfig)
    tp = hints[f.name]
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    return tp


def _parse_value(tp, text: str):
    if tp is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if text.strip().lower() == "none":
        return None
    return tp(text)


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment and keys may use dashes."""
    names = {f.name: f for f in dataclasses.fields(ex.ExperimentConfig)}
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in names:
            raise ValueError(f"{path}:{lineno}: unknown option {key!r}")
        out[key] = _parse_value(_field_type(names[key]), value)
    return out


def _add_config_flags(p: argparse.ArgumentParser):
    for f in dataclasses.fields(ex.ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        tp = _field_type(f)
        help_text = _FLAG_HELP.get(f.name)
        if tp is bool:
            p.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction,
                           default=None, help=help_text)
        else:
            p.add_argument(flag, dest=f.name, default=None,
                           type=lambda s, tp=tp: _parse_value(tp, s), help=help_text)
    p.add_argument("--config", help="key = value file with defaults for any flag")


def config_from_args(args) -> ex.ExperimentConfig:
    values = read_config_file(args.config) if args.config else {}
    for f in dataclasses.fields(ex.ExperimentConfig):
        v = getattr(args, f.name)
        if v is not None:
            values[f.name] = v
    return ex.ExperimentConfig(**values)


def _write(text: str, path):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_prepare(args):
    cfg = config_from_args(args)
    data = ex.load_for(cfg)
    stats = ex.group_statistics(data)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_internal_csv(data.train(), out / "train.csv")
        save_internal_csv(data.test(), out / "test.csv")
    print(json.dumps({"n": data.n, "n_train": int((~data.is_test).sum()), "d": data.d,
                      "groups": stats}, indent=1))


def cmd_train(args):
    cfg = config_from_args(args)
    if cfg.rho is None:
        raise SystemExit("train needs --rho (and optionally --lam, --theta)")
    run = ex.run_many([cfg])[0]
    if args.params_out:
        Path(args.params_out).write_text(run.result.to_text())
    print(json.dumps(run.row.record(), indent=1))


def cmd_cv(args):
    cfg = config_from_args(args)
    outcome = ex.cross_validate(cfg)
    _write(outcome.to_csv(), args.out)
    print(outcome.to_json(), file=sys.stderr if not args.out else sys.stdout)


def cmd_run(args):
    cfg = config_from_args(args)
    run = ex.run_many([cfg])[0]
    fmt = "json" if args.out and args.out.endswith(".json") else "csv"
    _write(ex.emit_results([run.row], None, fmt, args.include_runtime), args.out)
    if args.params_out:
        Path(args.params_out).write_text(run.result.to_text())
    if args.cv_out and run.cv is not None:
        Path(args.cv_out).write_text(run.cv.to_csv())


def cmd_sweep(args):
    cfg = config_from_args(args)
    lams = [float(v) for v in args.lam_values.split(",")] if args.lam_values else mix_values()
    _write(sweep_csv(ex.sweep(cfg, lams)), args.out)


def cmd_predict(args):
    cfg = config_from_args(args)
    predictor, pred, test = ex.predict_sensitive(cfg)
    matrix = confusion_matrix(pred, test.groups, test.k)
    _write(confusion_csv(matrix, test.group_names), args.out)
    if args.predictor_out:
        Path(args.predictor_out).write_text(predictor.to_text())
    print(f"accuracy {np.trace(matrix):.2f}%", file=sys.stderr)


def cmd_report(args):
    records = []
    for path in args.results:
        records.extend(ex.read_results(path))
    sys.stdout.write(ex.report(records))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fairmtl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load a dataset, print group statistics, write a snapshot")
    _add_config_flags(p)
    p.add_argument("--out", help="directory for train.csv and test.csv")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train at fixed hyperparameters")
    _add_config_flags(p)
    p.add_argument("--params-out", help="file for the trained parameters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("cv", help="two-step cross-validation only")
    _add_config_flags(p)
    p.add_argument("--out", help="CSV file for all grid points")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("run", help="cross-validate, train and evaluate on the test split")
    _add_config_flags(p)
    p.add_argument("--out", help="results file (.csv or .json)")
    p.add_argument("--params-out", help="file for the trained parameters")
    p.add_argument("--cv-out", help="CSV file for the cross-validation table")
    p.add_argument("--include-runtime", action="store_true",
                   help="add the wall-clock runtime column (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep-lambda", help="test ACC and DEOd along lambda")
    _add_config_flags(p)
    p.add_argument("--lam-values", help="comma-separated lambdas (default: the mix grid)")
    p.add_argument("--out", help="CSV file")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("predict-sensitive", help="fit the group predictor, print its confusion matrix")
    _add_config_flags(p)
    p.add_argument("--out", help="confusion-matrix CSV file")
    p.add_argument("--predictor-out", help="file for the serialized forest")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", help="tabulate result files")
    p.add_argument("results", nargs="+", help="CSV or JSON files written by run")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ValueError, FileNotFoundError) as err:
        log.error("%s", err)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
