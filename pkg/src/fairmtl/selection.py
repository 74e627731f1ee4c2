"""Hyperparameter grids and the two-step cross-validation protocol.

Step 1 finds the best mean validation accuracy ``A*``.  Step 2 keeps every
grid point whose mean accuracy is at least ``0.97 * A*`` and picks the one
with the lowest mean validation fairness measure.  Ties go to the larger
rho, then the smaller lambda, then the smaller theta.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset
from .fairness import accuracy_report, constraints_for, metric_value
from .model import ModelSpec, scores
from .solver import SolverConfig, solve

log = logging.getLogger(__name__)

SHORTLIST_RATIO = 0.97


def mix_values() -> np.ndarray:
    low = [2.0 ** -e for e in range(15, 0, -1)]
    high = [1 - 2.0 ** -e for e in range(2, 16)]
    return np.array([0.0, *low, *high, 1.0])


def rho_values() -> np.ndarray:
    return 10.0 ** np.arange(-6.0, 6.01, 0.5)


@dataclass(frozen=True)
class Grid:
    rho_values: tuple[float, ...]
    lam_values: tuple[float, ...] = (0.5,)
    theta_values: tuple[float, ...] = (0.5,)

    def __post_init__(self):
        for name in ("rho_values", "lam_values", "theta_values"):
            vals = np.asarray(getattr(self, name), dtype=float)
            if vals.size == 0:
                raise ValueError(f"{name} is empty")
            if np.any(np.diff(vals) <= 0):
                raise ValueError(f"{name} must be strictly increasing")
            object.__setattr__(self, name, tuple(float(v) for v in vals))

    def points(self, method: str) -> list[tuple[float, float, float]]:
        """Grid points ``(rho, lam, theta)``; lambda and theta only vary for MTL."""
        if method == "MTL":
            return [(r, l, t) for t in self.theta_values for l in self.lam_values
                    for r in self.rho_values]
        return [(r, self.lam_values[0], self.theta_values[0]) for r in self.rho_values]

    def size(self, method: str) -> int:
        return len(self.points(method))


def complete_grid() -> Grid:
    mix = tuple(mix_values())
    return Grid(tuple(rho_values()), mix, mix)


def thinned_grid() -> Grid:
    """Every other rho and nine mix values spread evenly over the mix index range."""
    mix = mix_values()
    picks = np.round(np.linspace(0, len(mix) - 1, 9)).astype(int)
    return Grid(tuple(rho_values()[::2]), tuple(mix[picks]), tuple(mix[picks]))


@dataclass
class PointScore:
    rho: float
    lam: float
    theta: float
    acc: float = float("nan")
    fairness: float = float("nan")
    converged: bool = True
    fold_acc: list[float] = field(default_factory=list)
    fold_fairness: list[float] = field(default_factory=list)

    @property
    def key(self) -> tuple[float, float, float]:
        return (self.rho, self.lam, self.theta)


@dataclass
class CvOutcome:
    points: list[PointScore]
    best_acc: float
    shortlist: list[tuple[float, float, float]]
    chosen: tuple[float, float, float]
    metric: str
    excluded: list[tuple[float, float, float]] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rho", "lambda", "theta", "mean_acc", f"mean_{self.metric}",
                    "converged", "shortlisted", "chosen"])
        short = set(self.shortlist)
        for p in self.points:
            w.writerow([repr(p.rho), repr(p.lam), repr(p.theta), repr(p.acc), repr(p.fairness),
                        int(p.converged), int(p.key in short), int(p.key == self.chosen)])
        return buf.getvalue()

    def chosen_record(self) -> dict:
        rho, lam, theta = self.chosen
        return {"rho": rho, "lambda": lam, "theta": theta, "best_acc": self.best_acc,
                "metric": self.metric, "shortlist_size": len(self.shortlist),
                "excluded": len(self.excluded)}

    def to_json(self) -> str:
        return json.dumps(self.chosen_record(), sort_keys=True)


def select(points: list[PointScore], metric: str = "EOd") -> CvOutcome:
    """Apply the two-step rule to already scored grid points."""
    valid = [p for p in points if p.converged and np.isfinite(p.acc) and np.isfinite(p.fairness)]
    excluded = [p.key for p in points if p not in valid]
    if not valid:
        raise RuntimeError("no grid point produced a converged model")
    best = max(p.acc for p in valid)
    # accuracy alone decides the shortlist; fairness is consulted only below
    short = [p for p in valid if p.acc >= SHORTLIST_RATIO * best]
    chosen = min(short, key=lambda p: (p.fairness, -p.rho, p.lam, p.theta))
    return CvOutcome(points, best, [p.key for p in short], chosen.key, metric, excluded)


def two_step_cv(data: Dataset, template: ModelSpec, grid: Grid, folds, metric: str = "EOd",
                config: SolverConfig | None = None, model_groups=None,
                n_jobs: int = 1) -> CvOutcome:
    """Score every grid point by k-fold validation and select one.

    ``model_groups`` are the group ids routed into the model (default: true
    groups); validation metrics always condition on ``data.groups``.  For a
    fixed fold, theta and lambda the solves run along decreasing rho, each
    warm started from the previous solution.
    """
    return cv_views(data, [template], grid, folds, metric, config, model_groups, n_jobs)[0]


def cv_views(data: Dataset, templates: list[ModelSpec], grid: Grid, folds, metric: str = "EOd",
             config: SolverConfig | None = None, model_groups=None,
             n_jobs: int = 1) -> list[CvOutcome]:
    """Run :func:`two_step_cv` for templates sharing one training problem.

    Templates may differ only in ``group_specific_prediction`` and only when
    no fairness constraint is set, so one solve per grid point serves all of
    them.
    """
    base = _training_key(templates[0])
    if any(_training_key(t) != base for t in templates):
        raise ValueError("templates must share the training problem")
    config = config or SolverConfig()
    routed = data.groups if model_groups is None else np.asarray(model_groups)
    jobs = [(data.subset(tr), data.subset(va), routed[tr], routed[va], templates, grid, metric,
             config) for tr, va in folds]
    if n_jobs > 1 and len(jobs) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            per_fold = list(pool.map(_fold_scores, jobs))
    else:
        per_fold = [_fold_scores(job) for job in jobs]

    pts = grid.points(templates[0].method)
    out = []
    for v in range(len(templates)):
        table = {p: PointScore(*p) for p in pts}
        # reduce in fold order so results do not depend on scheduling
        for fi, fold in enumerate(per_fold):
            for key, (ok, accs, fairs) in fold.items():
                ps = table[key]
                if not ok:
                    if ps.converged:
                        log.info("fold %d: %s excluded, solver did not converge", fi, key)
                    ps.converged = False
                    continue
                ps.fold_acc.append(accs[v])
                ps.fold_fairness.append(fairs[v])
        for ps in table.values():
            if ps.converged:
                ps.acc = float(np.mean(ps.fold_acc))
                ps.fairness = float(np.mean(ps.fold_fairness))
        res = select([table[p] for p in pts], metric)
        if res.excluded:
            log.info("%d of %d grid points excluded for non-convergence",
                     len(res.excluded), len(pts))
        out.append(res)
    return out


def _training_key(spec: ModelSpec):
    if spec.fairness_target == "none" and spec.method == "MTL":
        return replace(spec, group_specific_prediction=False)
    return spec


def _fold_scores(job) -> dict:
    """Validation scores of one fold: ``key -> (converged, accs, fairs)`` per view."""
    tr, va, r_tr, r_va, templates, grid, metric, config = job
    method = templates[0].method
    pts = grid.points(method)
    scores_by_key = {}
    for theta in _ordered(grid, method, "theta"):
        for lam in _ordered(grid, method, "lam"):
            warm = None
            for rho in sorted(grid.rho_values, reverse=True):
                key = (rho, lam, theta) if method == "MTL" else (rho, *pts[0][1:])
                specs = [t.with_hyper(rho=rho, lam=lam, theta=theta) for t in templates]
                res = solve(specs[0], tr, constraints_for(tr, specs[0], r_tr), config, r_tr, warm)
                warm = res.warm
                if not res.converged:
                    scores_by_key[key] = (False, (), ())
                    continue
                accs, fairs = [], []
                for spec in specs:
                    f = scores(res.params, va.X, r_va, spec)
                    accs.append(accuracy_report(f, va.labels, va.groups, va.k).acc)
                    fairs.append(metric_value(metric, f, va.labels, va.groups, va.k))
                scores_by_key[key] = (True, accs, fairs)
    return scores_by_key


def _ordered(grid: Grid, method: str, name: str):
    if method != "MTL":
        return [grid.lam_values[0] if name == "lam" else grid.theta_values[0]]
    return grid.lam_values if name == "lam" else grid.theta_values


@dataclass(frozen=True)
class SweepRow:
    lam: float
    acc: float
    deod: float


def lambda_sweep(train: Dataset, test: Dataset, template: ModelSpec, lam_values,
                 config: SolverConfig | None = None, train_groups=None,
                 test_groups=None) -> list[SweepRow]:
    """Train at fixed rho and theta for each lambda and evaluate on ``test``."""
    config = config or SolverConfig()
    r_tr = train.groups if train_groups is None else np.asarray(train_groups)
    r_te = test.groups if test_groups is None else np.asarray(test_groups)
    rows, warm = [], None
    for lam in lam_values:
        spec = template.with_hyper(lam=float(lam))
        res = solve(spec, train, constraints_for(train, spec, r_tr), config, r_tr, warm)
        warm = res.warm
        rep = accuracy_report(scores(res.params, test.X, r_te, spec), test.labels, test.groups,
                              test.k)
        rows.append(SweepRow(float(lam), rep.acc, rep.deod))
    return rows


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lambda", "acc", "deod"])
    for r in rows:
        w.writerow([repr(r.lam), repr(r.acc), repr(r.deod)])
    return buf.getvalue()
