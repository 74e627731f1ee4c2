"""End-to-end runs: load, optionally predict groups, cross-validate, train, audit.

Fairness is always audited against the true groups.  When the sensitive
source is ``predicted``, the predicted groups only enter the model's
functional form (task routing and, with S=1, the sensitive feature columns).
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .dataset import Dataset, load_dataset, stratified_folds, stratified_split
from .fairness import CLASSES, accuracy_report, constraints_for, surrogate_deo
from .group_predictor import ForestConfig, GroupPredictor, predict_training_groups
from .model import ModelSpec, scores
from .selection import CvOutcome, Grid, complete_grid, cv_views, thinned_grid
from .solver import SolveResult, SolverConfig, solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "adult"
    data_path: str = "data/raw"
    sensitive_spec: str = "G"
    method: str = "MTL"
    sensitive_source: str = "true"
    group_specific_prediction: bool = False
    fairness_target: str = "none"
    include_sensitive_feature: bool = False
    fairness_metric: str = "EOd"
    regularizer: str = "common-mean"
    # adult: missing-row policy; compas: row filter and split
    missing: str = "drop"
    compas_filter: str = "none"
    test_fraction: float = 0.3
    # generic-csv
    label_column: str = ""
    positive_label: str = ""
    test_path: str = ""
    # cross-validation
    full_grid: bool = False
    n_folds: int = 10
    cv_subsample: int = 3000  # 0 uses the whole training split
    cv_hinge_smoothing: float = 1e-2
    n_jobs: int = 1
    # fixed hyperparameters skip cross-validation when rho is set
    rho: float | None = None
    lam: float = 0.5
    theta: float = 0.5
    # final solve
    hinge_smoothing: float = 1e-3
    tolerance: float = 1e-6
    max_iterations: int = 50000
    # group predictor
    n_trees: int = 100
    max_depth: int | None = None
    out_of_fold_groups: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("STL", "ITL", "MTL", "STL_GROUP_BIAS"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "STL" and self.group_specific_prediction:
            raise ValueError("STL requires group_specific_prediction = False")
        if self.method in ("ITL", "STL_GROUP_BIAS") and not self.group_specific_prediction:
            raise ValueError(f"{self.method} requires group_specific_prediction = True")
        if self.sensitive_source not in ("true", "predicted"):
            raise ValueError("sensitive_source must be 'true' or 'predicted'")
        if self.fairness_metric not in CLASSES:
            raise ValueError(f"unknown fairness metric {self.fairness_metric!r}")
        if self.n_folds < 2:
            raise ValueError("n_folds must be >= 2")

    @property
    def metric(self) -> str:
        """Validation and audit metric: the fairness target when one is set."""
        return self.fairness_metric if self.fairness_target == "none" else self.fairness_target

    def forest(self) -> ForestConfig:
        return ForestConfig(n_trees=self.n_trees, max_depth=self.max_depth, seed=self.seed)

    def grid(self) -> Grid:
        return complete_grid() if self.full_grid else thinned_grid()

    def solver(self) -> SolverConfig:
        return SolverConfig(tolerance=self.tolerance, max_iterations=self.max_iterations,
                            hinge_smoothing=self.hinge_smoothing, seed=self.seed)

    def cv_solver(self) -> SolverConfig:
        return replace(self.solver(), hinge_smoothing=self.cv_hinge_smoothing)

    def load_options(self) -> dict:
        if self.dataset == "adult":
            return {"missing": self.missing}
        if self.dataset == "compas":
            return {"compas_filter": self.compas_filter, "test_fraction": self.test_fraction,
                    "split_seed": self.seed}
        if self.dataset == "generic-csv":
            return {"label_column": self.label_column,
                    "positive_label": self.positive_label or None,
                    "test_path": self.test_path or None}
        return {}


@dataclass(frozen=True)
class ResultRow:
    dataset: str
    sensitive_spec: str
    method: str
    sensitive_source: str
    D: int
    F: str
    S: int
    fairness_metric: str
    acc: float
    group_acc: tuple[float, ...]
    deop_pos: float
    deop_neg: float
    deod: float
    train_surrogate: float
    train_violation: float
    rho: float
    lam: float
    theta: float
    converged: bool
    seed: int
    runtime: float = field(default=float("nan"), compare=False)

    def record(self, include_runtime: bool = False) -> dict:
        rec = asdict(self)
        rec["group_acc"] = ";".join(repr(float(a)) for a in self.group_acc)
        if not include_runtime:
            rec.pop("runtime")
        return rec


@dataclass(eq=False)
class Run:
    config: ExperimentConfig
    row: ResultRow
    spec: ModelSpec
    result: SolveResult
    cv: CvOutcome | None = None
    predictor: GroupPredictor | None = None
    train_groups: np.ndarray | None = None
    test_groups: np.ndarray | None = None


_DATA_CACHE: dict = {}


def load_for(config: ExperimentConfig) -> Dataset:
    """Load the config's dataset, reusing an earlier load with identical options."""
    key = (config.dataset, config.data_path, config.sensitive_spec,
           config.include_sensitive_feature, tuple(sorted(config.load_options().items())))
    if key not in _DATA_CACHE:
        _DATA_CACHE[key] = load_dataset(config.data_path, config.dataset, config.sensitive_spec,
                                        config.include_sensitive_feature,
                                        **config.load_options())
    return _DATA_CACHE[key]


def template_for(config: ExperimentConfig, data: Dataset) -> ModelSpec:
    return ModelSpec(config.method, data.k, data.d, lam=config.lam, theta=config.theta,
                     group_specific_prediction=config.group_specific_prediction,
                     fairness_target=config.fairness_target, regularizer=config.regularizer)


@dataclass(eq=False)
class _Prepared:
    train: Dataset
    test: Dataset
    r_train: np.ndarray
    r_test: np.ndarray
    predictor: GroupPredictor | None


def _prepare(config: ExperimentConfig, data: Dataset) -> _Prepared:
    train, test = data.train(), data.test()
    if test.n == 0:
        raise ValueError("dataset has no test split")
    if config.sensitive_source == "true":
        return _Prepared(train, test, train.groups, test.groups, None)
    predictor, r_train = predict_training_groups(train, config.forest(),
                                                 config.out_of_fold_groups, config.n_folds)
    r_test = predictor.predict(test.base_features())
    # predicted groups replace s inside the model, in training and in testing
    return _Prepared(train.with_model_groups(r_train), test.with_model_groups(r_test),
                     r_train, r_test, predictor)


def _cv_sample(config: ExperimentConfig, train: Dataset) -> np.ndarray:
    if not config.cv_subsample or config.cv_subsample >= train.n:
        return np.arange(train.n)
    frac = config.cv_subsample / train.n
    # stratified_split returns a mask of the requested fraction
    return np.flatnonzero(stratified_split(train.groups, train.labels, frac, config.seed))


def _training_key(config: ExperimentConfig):
    """Configs with equal keys train identical models and can share their solves."""
    if config.method == "MTL" and config.fairness_target == "none":
        return replace(config, group_specific_prediction=False)
    return config


def run_many(configs: list[ExperimentConfig]) -> list[Run]:
    """Run several experiments; MTL runs without constraints that differ only in D share work."""
    order: dict = {}
    for i, c in enumerate(configs):
        order.setdefault(_training_key(c), []).append(i)
    runs: list[Run | None] = [None] * len(configs)
    for members in order.values():
        for i, run in zip(members, _run_views([configs[i] for i in members])):
            runs[i] = run
    return runs


def run_experiment(config: ExperimentConfig) -> ResultRow:
    return run_many([config])[0].row


def _run_views(configs: list[ExperimentConfig]) -> list[Run]:
    start = time.perf_counter()
    base = configs[0]
    data = load_for(base)
    prep = _prepare(base, data)
    templates = [template_for(c, data) for c in configs]
    cv = [None] * len(configs)
    if base.rho is None:
        sub = _cv_sample(base, prep.train)
        cv_data = prep.train.subset(sub)
        folds = stratified_folds(cv_data, base.n_folds, base.seed)
        cv = cv_views(cv_data, templates, base.grid(), folds, base.metric,
                      base.cv_solver(), prep.r_train[sub], base.n_jobs)
    shared = None
    runs = []
    for config, template, outcome in zip(configs, templates, cv):
        rho, lam, theta = outcome.chosen if outcome else (config.rho, config.lam, config.theta)
        spec = template.with_hyper(rho=rho, lam=lam, theta=theta)
        train_spec = replace(spec, group_specific_prediction=False) \
            if _training_key(config) != config else spec
        # views of one training problem reuse a single final solve at the same point
        if shared is not None and shared[0] == train_spec:
            result = shared[1]
        else:
            constraints = constraints_for(prep.train, spec, prep.r_train)
            result = solve(spec, prep.train, constraints, config.solver(), prep.r_train)
            shared = (train_spec, result)
        row = _row(config, spec, result, prep, time.perf_counter() - start)
        runs.append(Run(config, row, spec, result, outcome, prep.predictor,
                        prep.r_train, prep.r_test))
    return runs


def _row(config: ExperimentConfig, spec: ModelSpec, result: SolveResult, prep: _Prepared,
         runtime: float) -> ResultRow:
    test, train = prep.test, prep.train
    f_test = scores(result.params, test.X, prep.r_test, spec)
    rep = accuracy_report(f_test, test.labels, test.groups, test.k)
    f_train = scores(result.params, train.X, prep.r_train, spec)
    violation = constraints_for(train, spec, prep.r_train).violation(result.params)
    return ResultRow(
        dataset=config.dataset, sensitive_spec=config.sensitive_spec, method=config.method,
        sensitive_source=config.sensitive_source, D=int(config.group_specific_prediction),
        F=config.fairness_target, S=int(config.include_sensitive_feature),
        fairness_metric=config.metric, acc=rep.acc, group_acc=rep.group_accuracy,
        deop_pos=rep.deop_pos, deop_neg=rep.deop_neg, deod=rep.deod,
        train_surrogate=surrogate_deo(f_train, train.labels, train.groups, config.metric, train.k),
        train_violation=violation, rho=spec.rho, lam=spec.lam, theta=spec.theta,
        converged=result.converged, seed=config.seed, runtime=runtime)


def result_fields(include_runtime: bool = False) -> list[str]:
    names = [f.name for f in fields(ResultRow)]
    return names if include_runtime else [n for n in names if n != "runtime"]


def emit_results(rows: list[ResultRow], path=None, fmt: str = "csv",
                 include_runtime: bool = False) -> str:
    """Serialize rows with a stable column order; writes to ``path`` when given.

    Runtime is left out unless requested so that reruns compare byte for byte.
    """
    if not rows:
        raise ValueError("no rows to emit")
    records = [r.record(include_runtime) for r in rows]
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=result_fields(include_runtime), lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in rec.items()})
        text = buf.getvalue()
    elif fmt == "json":
        text = json.dumps(records, indent=1) + "\n"
    else:
        raise ValueError("format must be 'csv' or 'json'")
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        if str(path).endswith(".json"):
            return json.load(fh)
        return list(csv.DictReader(fh))


def report(records: list[dict]) -> str:
    """Plain-text results table showing both encodings of the sensitive-source flag.

    ``P(text)`` is 1 for the true sensitive feature and ``P(tab)`` is 0 for it;
    the two published conventions disagree, so both are printed.
    """
    head = ["P(text)", "P(tab)", "method", "D", "F", "S", "ACC", "DEOp+", "DEOp-", "DEOd"]
    lines = ["  ".join(f"{h:>7}" for h in head)]
    for r in records:
        true_s = r["sensitive_source"] == "true"
        cells = [int(true_s), int(not true_s), r["method"], r["D"], r["F"], r["S"],
                 f"{100 * float(r['acc']):.1f}", f"{float(r['deop_pos']):.2f}",
                 f"{float(r['deop_neg']):.2f}", f"{float(r['deod']):.2f}"]
        lines.append("  ".join(f"{str(c):>7}" for c in cells))
    lines.append("P(text): 1 = true sensitive feature.  P(tab): 0 = true sensitive feature.")
    return "\n".join(lines) + "\n"


def cross_validate(config: ExperimentConfig) -> CvOutcome:
    """Only the model-selection step of :func:`run_experiment`."""
    data = load_for(config)
    prep = _prepare(config, data)
    sub = _cv_sample(config, prep.train)
    cv_data = prep.train.subset(sub)
    folds = stratified_folds(cv_data, config.n_folds, config.seed)
    return cv_views(cv_data, [template_for(config, data)], config.grid(), folds,
                    config.metric, config.cv_solver(), prep.r_train[sub],
                    config.n_jobs)[0]


def sweep(config: ExperimentConfig, lam_values) -> list:
    """Test ACC and DEOd along lambda at the config's (or cross-validated) rho and theta."""
    from .selection import lambda_sweep
    if config.rho is None:
        rho, _, theta = cross_validate(config).chosen
        config = replace(config, rho=rho, theta=theta)
    data = load_for(config)
    prep = _prepare(config, data)
    template = template_for(config, data).with_hyper(rho=config.rho, theta=config.theta)
    return lambda_sweep(prep.train, prep.test, template, lam_values, config.solver(),
                        prep.r_train, prep.r_test)


def predict_sensitive(config: ExperimentConfig):
    """Fit the group predictor on the training split; return it, test predictions and data."""
    data = load_for(config)
    train, test = data.train(), data.test()
    predictor, _ = predict_training_groups(train, config.forest())
    return predictor, predictor.predict(test.base_features()), test


def group_statistics(data: Dataset) -> list[dict]:
    """Per-group sample share and positive-label rate over the whole dataset, in percent."""
    rows = []
    for t in range(1, data.k + 1):
        g = data.groups == t
        rows.append({"group": data.group_names[t - 1], "share": 100.0 * g.mean(),
                     "positive_rate": 100.0 * (data.labels[g] == 1).mean()})
    return rows
