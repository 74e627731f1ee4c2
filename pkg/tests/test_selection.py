import csv
import io
import json

import numpy as np
import pytest

from conftest import make_data, random_data
from fairmtl.dataset import stratified_folds
from fairmtl.fairness import accuracy_report
from fairmtl.model import ModelSpec, scores
from fairmtl.selection import (Grid, PointScore, complete_grid, cv_views, lambda_sweep,
                               mix_values, rho_values, select, sweep_csv, thinned_grid,
                               two_step_cv)
from fairmtl.solver import SolverConfig, solve


def test_rule_example():
    pts = [PointScore(1.0, 0, 0, 0.90, 0.10), PointScore(2.0, 0, 0, 0.89, 0.02),
           PointScore(3.0, 0, 0, 0.80, 0.00)]
    out = select(pts)
    assert out.best_acc == 0.90
    assert out.shortlist == [(1.0, 0, 0), (2.0, 0, 0)]
    assert out.chosen == (2.0, 0, 0)


def test_tie_break_order():
    same = [PointScore(r, l, t, 0.8, 0.1) for r in (0.1, 10.0) for l in (0.25, 0.5)
            for t in (0.5, 0.25)]
    assert select(same).chosen == (10.0, 0.25, 0.25)
    assert select([PointScore(0.5, 0.5, 0.5, 0.3, 0.9)]).chosen == (0.5, 0.5, 0.5)


def test_unconverged_points_excluded():
    pts = [PointScore(1.0, 0, 0, 0.99, 0.0, converged=False), PointScore(2.0, 0, 0, 0.7, 0.3)]
    out = select(pts)
    assert out.chosen == (2.0, 0, 0) and out.excluded == [(1.0, 0, 0)]
    with pytest.raises(RuntimeError):
        select(pts[:1])


def test_grids():
    mix = mix_values()
    assert len(mix) == 31 and mix[0] == 0 and mix[-1] == 1
    assert np.all(np.diff(mix) > 0)
    assert mix[1] == 2.0 ** -15 and mix[15] == 0.5 and mix[16] == 0.75
    rho = rho_values()
    assert len(rho) == 25 and rho[0] == pytest.approx(1e-6) and rho[-1] == pytest.approx(1e6)
    full = complete_grid()
    assert full.size("MTL") == 25 * 31 * 31 and full.size("STL") == 25
    thin = thinned_grid()
    assert thin.size("MTL") == 13 * 9 * 9
    assert thin.lam_values[0] == 0 and thin.lam_values[-1] == 1
    assert set(thin.rho_values) <= set(full.rho_values)
    with pytest.raises(ValueError):
        Grid((1.0, 1.0))
    with pytest.raises(ValueError):
        Grid(())


def _small_grid():
    return Grid((0.01, 0.1, 1.0), (0.0, 0.5, 1.0), (0.0, 0.5))


def test_cv_determinism_and_shortlist(rng):
    data = random_data(rng, 120, 3, 2)
    folds = stratified_folds(data, 4, seed=0)
    template = ModelSpec("MTL", 2, 3, fairness_target="EOd", group_specific_prediction=True)
    a = two_step_cv(data, template, _small_grid(), folds, "EOd")
    b = two_step_cv(data, template, _small_grid(), folds, "EOd")
    assert a.to_csv() == b.to_csv() and a.chosen == b.chosen
    chosen = next(p for p in a.points if p.key == a.chosen)
    assert chosen.acc >= 0.97 * a.best_acc
    assert a.chosen in a.shortlist
    assert set(a.shortlist) <= {p.key for p in a.points}
    assert len(a.points) == 18 and all(len(p.fold_acc) == 4 for p in a.points)
    rows = list(csv.DictReader(io.StringIO(a.to_csv())))
    assert len(rows) == 18 and sum(int(r["chosen"]) for r in rows) == 1
    assert json.loads(a.to_json())["shortlist_size"] == len(a.shortlist)


def test_cv_parallel_matches_serial(rng):
    data = random_data(rng, 80, 2, 2)
    folds = stratified_folds(data, 3, seed=1)
    template = ModelSpec("MTL", 2, 2)
    serial = two_step_cv(data, template, _small_grid(), folds, "EOd")
    parallel = two_step_cv(data, template, _small_grid(), folds, "EOd", n_jobs=2)
    assert serial.to_csv() == parallel.to_csv()


def test_cv_fold_scores_by_hand(rng):
    data = random_data(rng, 60, 2, 2)
    folds = stratified_folds(data, 3, seed=2)
    template = ModelSpec("STL", 2, 2)
    grid = Grid((0.1, 1.0))
    out = two_step_cv(data, template, grid, folds, "EOp+")
    point = out.points[1]
    spec = template.with_hyper(rho=1.0)
    expected = []
    for tr, va in folds:
        res = solve(spec, data.subset(tr))
        f = scores(res.params, data.X[va], data.groups[va], spec)
        expected.append(accuracy_report(f, data.labels[va], data.groups[va]).acc)
    # the CV path warm-starts along decreasing rho; agreement is to solver accuracy
    assert point.acc == pytest.approx(np.mean(expected), abs=1e-9)


def test_views_share_one_training_problem(rng):
    data = random_data(rng, 80, 2, 2)
    folds = stratified_folds(data, 3, seed=0)
    d0 = ModelSpec("MTL", 2, 2)
    d1 = ModelSpec("MTL", 2, 2, group_specific_prediction=True)
    both = cv_views(data, [d0, d1], _small_grid(), folds, "EOd")
    assert both[0].to_csv() == two_step_cv(data, d0, _small_grid(), folds, "EOd").to_csv()
    assert both[1].to_csv() == two_step_cv(data, d1, _small_grid(), folds, "EOd").to_csv()
    fair = ModelSpec("MTL", 2, 2, fairness_target="EOd")
    with pytest.raises(ValueError):
        cv_views(data, [fair, fair.with_hyper(), d1], _small_grid(), folds)


def test_sweep_cardinality_and_recovery(rng):
    data = random_data(rng, 100, 2, 2, test_fraction=0.4)
    train, test = data.train(), data.test()
    template = ModelSpec("MTL", 2, 2, rho=0.2, theta=1.0)
    rows = lambda_sweep(train, test, template, mix_values())
    assert len(rows) == 31 and [r.lam for r in rows] == list(mix_values())
    stl = ModelSpec("STL", 2, 2, rho=0.2)
    res = solve(stl, train)
    rep = accuracy_report(scores(res.params, test.X, test.groups, stl), test.labels, test.groups)
    assert rows[-1].acc == rep.acc and rows[-1].deod == rep.deod
    text = sweep_csv(rows)
    assert text.splitlines()[0] == "lambda,acc,deod" and len(text.splitlines()) == 32


def test_sweep_flat_for_duplicated_tasks(rng):
    X = rng.normal(size=(80, 2))
    y = np.where(X @ [1.0, -0.5] + 0.3 * rng.normal(size=80) > 0, 1, -1)
    # group 2 is an exact copy of group 1
    data = make_data(np.vstack([X, X]), np.repeat([1, 2], 80), np.concatenate([y, y]),
                     is_test=np.tile(np.arange(80) >= 50, 2))
    template = ModelSpec("MTL", 2, 2, rho=1e-3, theta=0.5, group_specific_prediction=True)
    rows = lambda_sweep(data.train(), data.test(), template, mix_values(),
                        SolverConfig(tolerance=1e-8))
    accs = np.array([r.acc for r in rows])
    # the oracle is direct evaluation: both copies always score alike
    assert all(r.deod == 0.0 for r in rows)
    assert np.ptp(accs) <= 0.04
