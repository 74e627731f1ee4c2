"""Linear equal-opportunity constraints and the DEO / accuracy metrics.

Constraints equalize, across groups, the mean score over each (group, class)
cell; they are linear in the stacked parameters.  Metrics use hard 0/1
predictions and are always conditioned on the groups passed in, which the
experiment layer keeps equal to the true groups.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .model import ModelSpec, ParamVector, augment, classify

CLASSES = {"EOp+": (1,), "EOp-": (-1,), "EOd": (1, -1)}


class InfeasibleConstraintError(ValueError):
    """A (group, class) cell needed by a constraint or metric is empty."""


def _class_name(cls: int) -> str:
    return "+" if cls > 0 else "-"


@dataclass(frozen=True, eq=False)
class GroupMeanVectors:
    """Per-group means of the augmented features over one label class.

    ``routed[t, r]`` sums the samples of true group ``t`` that the model routes
    to task ``r``, divided by the size of the (t, class) cell, so that
    ``routed[t].sum(axis=0) == means[t]``.  With routing equal to the true
    groups it is block diagonal.
    """

    cls: int
    means: np.ndarray
    routed: np.ndarray
    counts: np.ndarray

    @property
    def k(self) -> int:
        return self.means.shape[0]


def group_mean_vectors(data: Dataset, cls: int, model_groups=None) -> GroupMeanVectors:
    phi = augment(data.X)
    k = data.k
    routing = data.groups if model_groups is None else np.asarray(model_groups)
    d_prime = phi.shape[1]
    means = np.zeros((k, d_prime))
    routed = np.zeros((k, k, d_prime))
    counts = np.zeros(k, dtype=np.int64)
    for t in range(1, k + 1):
        cell = np.flatnonzero((data.groups == t) & (data.labels == cls))
        if len(cell) == 0:
            raise InfeasibleConstraintError(
                f"group {t} ('{data.group_names[t - 1]}') has no samples with label "
                f"{cls:+d}; the {_class_name(cls)} constraint is undefined")
        counts[t - 1] = len(cell)
        means[t - 1] = phi[cell].mean(axis=0)
        for r in range(1, k + 1):
            sel = cell[routing[cell] == r]
            if len(sel):
                routed[t - 1, r - 1] = phi[sel].sum(axis=0) / len(cell)
    return GroupMeanVectors(cls, means, routed, counts)


@dataclass(frozen=True, eq=False)
class ConstraintSet:
    rows: np.ndarray
    target: str = "shared"
    classes: tuple[int, ...] = ()

    @classmethod
    def empty(cls, size: int) -> "ConstraintSet":
        return cls(np.zeros((0, size)))

    @property
    def m(self) -> int:
        return self.rows.shape[0]

    def __len__(self):
        return self.m

    def violation(self, params: ParamVector) -> float:
        if self.m == 0:
            return 0.0
        return float(np.max(np.abs(self.rows @ params.stacked)))

    def to_text(self) -> str:
        head = f"# target={self.target} classes={','.join(_class_name(c) for c in self.classes)}"
        body = [" ".join(repr(float(v)) for v in row) for row in self.rows]
        return "\n".join([head, *body]) + "\n"


def build_constraints(means: dict[int, GroupMeanVectors] | list[GroupMeanVectors],
                      spec: ModelSpec) -> ConstraintSet:
    """Constraint rows ``c_j . W = 0`` for ``spec.fairness_target``.

    Shared family (D=0): ``w0 . (u_1 - u_t) = 0``.  Specific family (D=1):
    ``(w0 + v_1) . u_1 = (w0 + v_t) . u_t``.  Group 1 is the anchor.
    """
    if spec.fairness_target == "none":
        raise ValueError("fairness target is 'none'; no constraints to build")
    if not isinstance(means, dict):
        means = {u.cls: u for u in means}
    classes = CLASSES[spec.fairness_target]
    k, dp = spec.k, spec.d_prime
    rows = []
    for cls in classes:
        if cls not in means:
            raise ValueError(f"group means for class {_class_name(cls)} are missing")
        u = means[cls]
        if u.k != k or u.means.shape[1] != dp:
            raise ValueError("group means do not match the model layout")
        for t in range(2, k + 1):
            row = np.zeros((k + 1, dp))
            row[0] = u.means[0] - u.means[t - 1]
            if spec.group_specific_prediction:
                row[1:] = u.routed[0] - u.routed[t - 1]
            rows.append(row.ravel())
    target = "specific" if spec.group_specific_prediction else "shared"
    arr = np.array(rows) if rows else np.zeros((0, (k + 1) * dp))
    return ConstraintSet(arr, target, classes)


def constraints_for(data: Dataset, spec: ModelSpec, model_groups=None) -> ConstraintSet:
    """Constraints for ``spec`` built from the cells of ``data``; empty when the target is none."""
    if spec.fairness_target == "none":
        return ConstraintSet.empty(spec.size)
    means = {c: group_mean_vectors(data, c, model_groups) for c in CLASSES[spec.fairness_target]}
    return build_constraints(means, spec)


# ---------------------------------------------------------------------------
# metrics


def _n_groups(groups, k):
    return int(np.max(groups)) if k is None else k


def class_rates(scores, labels, groups, cls: int, k: int | None = None) -> np.ndarray:
    """Per-group rate of correct hard predictions among samples with label ``cls``."""
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    if not (len(scores) == len(labels) == len(groups)):
        raise ValueError("scores, labels and groups must have equal length")
    k = _n_groups(groups, k)
    correct = classify(scores) == labels
    rates = np.empty(k)
    for t in range(1, k + 1):
        cell = (groups == t) & (labels == cls)
        if not cell.any():
            raise InfeasibleConstraintError(f"group {t} has no samples with label {cls:+d}")
        rates[t - 1] = correct[cell].mean()
    return rates


def _spread(rates: np.ndarray) -> float:
    return float(np.abs(rates - rates.mean()).sum())


def deop(scores, labels, groups, cls: int, k: int | None = None) -> float:
    return _spread(class_rates(scores, labels, groups, cls, k))


def deod(scores, labels, groups, k: int | None = None) -> float:
    return (deop(scores, labels, groups, 1, k) + deop(scores, labels, groups, -1, k)) / 2


def metric_value(name: str, scores, labels, groups, k: int | None = None) -> float:
    """DEO metric by target name (``EOp+``, ``EOp-`` or ``EOd``)."""
    if name == "EOp+":
        return deop(scores, labels, groups, 1, k)
    if name == "EOp-":
        return deop(scores, labels, groups, -1, k)
    if name == "EOd":
        return deod(scores, labels, groups, k)
    raise ValueError(f"unknown fairness metric {name!r}")


def surrogate_deo(scores, labels, groups, name: str, k: int | None = None) -> float:
    """DEO computed with the linear loss ``(1 - y f) / 2`` in place of the 0/1 loss.

    This is the quantity the linear constraints drive to zero on the data they
    were built from.
    """
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    k = _n_groups(groups, k)
    vals = []
    for cls in CLASSES[name]:
        rates = np.empty(k)
        for t in range(1, k + 1):
            cell = (groups == t) & (labels == cls)
            if not cell.any():
                raise InfeasibleConstraintError(f"group {t} has no samples with label {cls:+d}")
            rates[t - 1] = 1 - np.mean((1 - cls * scores[cell]) / 2)
        vals.append(_spread(rates))
    return float(np.mean(vals))


def surrogate_gap(scores, labels, groups, cls: int, k: int | None = None) -> float:
    """Largest deviation of a group's mean score on class ``cls`` from group 1's."""
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    k = _n_groups(groups, k)
    means = np.array([scores[(groups == t) & (labels == cls)].mean() for t in range(1, k + 1)])
    return float(np.max(np.abs(means - means[0])))


@dataclass(frozen=True)
class FairnessReport:
    rates_pos: tuple[float, ...]
    rates_neg: tuple[float, ...]
    group_accuracy: tuple[float, ...]
    acc: float
    deop_pos: float
    deop_neg: float
    deod: float

    def to_record(self) -> dict:
        rec = {"ACC": self.acc, "DEOp+": self.deop_pos, "DEOp-": self.deop_neg, "DEOd": self.deod}
        for t, a in enumerate(self.group_accuracy, 1):
            rec[f"acc_g{t}"] = a
        return rec


def accuracy_report(scores, labels, groups, k: int | None = None) -> FairnessReport:
    scores, labels, groups = map(np.asarray, (scores, labels, groups))
    k = _n_groups(groups, k)
    correct = classify(scores) == labels
    acc = np.empty(k)
    for t in range(1, k + 1):
        g = groups == t
        if not g.any():
            raise ValueError(f"group {t} is empty")
        acc[t - 1] = correct[g].mean()
    pos = class_rates(scores, labels, groups, 1, k)
    neg = class_rates(scores, labels, groups, -1, k)
    dp, dn = _spread(pos), _spread(neg)
    return FairnessReport(tuple(pos), tuple(neg), tuple(acc), float(acc.mean()),
                          dp, dn, (dp + dn) / 2)
