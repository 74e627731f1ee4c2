"""Linear STL / ITL / MTL models over a stacked parameter vector.

Parameters are stored as one vector of ``k + 1`` blocks of length
``d' = d + 1`` (features plus a constant 1 for the bias): block 0 is the
shared model ``w0`` and block ``s`` the task offset ``v_s``.  Task weights
are always derived as ``w0 + v_s``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset, group_partition

METHODS = ("STL", "STL_GROUP_BIAS", "ITL", "MTL")
TARGETS = ("none", "EOp+", "EOp-", "EOd")
REGULARIZERS = ("common-mean", "literal")


@dataclass(frozen=True)
class ModelSpec:
    method: str
    k: int
    d: int
    rho: float = 1.0
    lam: float = 0.5
    theta: float = 0.5
    group_specific_prediction: bool = False
    fairness_target: str = "none"
    regularizer: str = "common-mean"
    bias: bool = True  # False pins the constant coordinate of every block to 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.fairness_target not in TARGETS:
            raise ValueError(f"unknown fairness target {self.fairness_target!r}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"unknown regularizer {self.regularizer!r}")
        if self.rho < 0:
            raise ValueError("rho must be non-negative")
        if not (0 <= self.lam <= 1 and 0 <= self.theta <= 1):
            raise ValueError("lambda and theta must lie in [0, 1]")
        if self.method == "STL" and self.group_specific_prediction:
            raise ValueError("STL has no group-specific prediction")
        if self.method in ("ITL", "STL_GROUP_BIAS") and not self.group_specific_prediction:
            raise ValueError(f"{self.method} predictions are always group specific")
        if self.k < 1 or self.d < 0:
            raise ValueError("k must be >= 1 and d >= 0")

    @property
    def d_prime(self) -> int:
        return self.d + 1

    @property
    def size(self) -> int:
        return (self.k + 1) * self.d_prime

    @property
    def constraint_family(self) -> str:
        return "specific" if self.group_specific_prediction else "shared"

    def with_hyper(self, rho=None, lam=None, theta=None) -> "ModelSpec":
        return replace(self, rho=self.rho if rho is None else rho,
                       lam=self.lam if lam is None else lam,
                       theta=self.theta if theta is None else theta)


def augment(X) -> np.ndarray:
    """Append the constant bias feature to every row."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return np.hstack([X, np.ones((X.shape[0], 1))])


@dataclass(frozen=True, eq=False)
class ParamVector:
    stacked: np.ndarray
    k: int
    d_prime: int
    method: str = "MTL"

    def __post_init__(self):
        v = np.array(self.stacked, dtype=np.float64).ravel()
        if v.size != (self.k + 1) * self.d_prime:
            raise ValueError(
                f"stacked length {v.size} != (k+1)*d' = {(self.k + 1) * self.d_prime}")
        v.setflags(write=False)
        object.__setattr__(self, "stacked", v)

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "ParamVector":
        return cls(np.zeros(spec.size), spec.k, spec.d_prime, spec.method)

    @classmethod
    def from_blocks(cls, w0, v, method="MTL") -> "ParamVector":
        w0 = np.asarray(w0, dtype=float)
        v = np.atleast_2d(np.asarray(v, dtype=float))
        return cls(np.concatenate([w0, v.ravel()]), v.shape[0], w0.size, method)

    @property
    def blocks(self) -> np.ndarray:
        return self.stacked.reshape(self.k + 1, self.d_prime)

    @property
    def w0(self) -> np.ndarray:
        return self.blocks[0]

    @property
    def v(self) -> np.ndarray:
        return self.blocks[1:]

    def task_weights(self) -> np.ndarray:
        return self.w0[None, :] + self.v

    def active_weights(self, s: int, group_specific_prediction: bool) -> np.ndarray:
        return self.w0 + self.v[s - 1] if group_specific_prediction else self.w0

    def to_text(self) -> str:
        header = json.dumps({"k": self.k, "d_prime": self.d_prime, "method": self.method},
                            sort_keys=True)
        lines = [header]
        for b in range(self.k + 1):
            for j in range(self.d_prime):
                lines.append(f"{b} {j} {float(self.blocks[b, j])!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ParamVector":
        lines = text.strip().splitlines()
        meta = json.loads(lines[0])
        k, dp = meta["k"], meta["d_prime"]
        blocks = np.zeros((k + 1, dp))
        for line in lines[1:]:
            b, j, val = line.split()
            blocks[int(b), int(j)] = float(val)
        return cls(blocks.ravel(), k, dp, meta.get("method", "MTL"))


def _check_x(x, s, spec):
    x = np.asarray(x, dtype=float).ravel()
    if x.size != spec.d:
        raise ValueError(f"feature vector has length {x.size}, expected {spec.d}")
    if not 1 <= s <= spec.k:
        raise ValueError(f"group {s} outside 1..{spec.k}")
    return x


def embed(x, s: int, spec: ModelSpec) -> np.ndarray:
    """Stacked feature map for one sample, so that ``params . embed = f(x, s)``."""
    x = _check_x(x, s, spec)
    phi = np.append(x, 1.0)
    out = np.zeros((spec.k + 1, spec.d_prime))
    if spec.method == "STL":
        out[0] = phi
    elif spec.method == "ITL":
        out[s] = phi
    elif spec.method == "MTL":
        out[0] = phi
        out[s] = phi
    else:  # STL_GROUP_BIAS: (phi(x), e_s)
        out[0, :-1] = x
        out[s, -1] = 1.0
    return out.ravel()


def _check_layout(params: ParamVector, spec: ModelSpec):
    if params.k != spec.k or params.d_prime != spec.d_prime:
        raise ValueError("parameter layout does not match the model spec")


def predict_score(params: ParamVector, x, s: int, spec: ModelSpec) -> float:
    _check_layout(params, spec)
    x = _check_x(x, s, spec)
    w = params.active_weights(s, spec.group_specific_prediction)
    return float(w[:-1] @ x + w[-1])


def scores(params: ParamVector, X, groups, spec: ModelSpec) -> np.ndarray:
    """Vectorized :func:`predict_score`; ``groups`` are the ids routed into the model."""
    _check_layout(params, spec)
    X = np.asarray(X, dtype=float)
    base = X @ params.w0[:-1] + params.w0[-1]
    if not spec.group_specific_prediction:
        return base
    V = params.v
    g = np.asarray(groups) - 1
    per_task = X @ V[:, :-1].T + V[:, -1]
    return base + per_task[np.arange(len(g)), g]


def classify(score) -> np.ndarray:
    """Sign of the score, with 0 mapped to -1."""
    return np.where(np.asarray(score) > 0, 1, -1)


def hinge(margins) -> np.ndarray:
    return np.maximum(0.0, 1.0 - margins)


def _group_means(values, groups, k) -> np.ndarray:
    sums = np.bincount(groups - 1, weights=values, minlength=k)
    counts = np.bincount(groups - 1, minlength=k)
    if np.any(counts == 0):
        raise ValueError(f"group(s) {np.flatnonzero(counts == 0) + 1} have no samples")
    return sums / counts


def penalty(params: ParamVector, spec: ModelSpec) -> float:
    """Regularizer value, including the factor rho."""
    w0, v = params.w0, params.v
    if spec.method == "STL":
        return spec.rho * float(w0 @ w0)
    if spec.method == "STL_GROUP_BIAS":
        return spec.rho * float(w0[:-1] @ w0[:-1] + v[:, -1] @ v[:, -1])
    if spec.method == "ITL":
        return spec.rho * float(np.sum(v * v)) / spec.k
    tasks = v if spec.regularizer == "common-mean" else w0[None, :] + v
    return spec.rho * (spec.lam * float(w0 @ w0)
                       + (1 - spec.lam) * float(np.sum(tasks * tasks)) / spec.k)


def group_objectives(params: ParamVector, data: Dataset, spec: ModelSpec,
                     model_groups=None) -> np.ndarray:
    """Per-group ITL objectives ``L_s(w_s) + rho ||w_s||^2``."""
    if spec.method != "ITL":
        raise ValueError("per-group objectives are defined for ITL only")
    routed = data.groups if model_groups is None else np.asarray(model_groups)
    m = data.labels * scores(params, data.X, routed, spec)
    risks = _group_means(hinge(m), data.groups, data.k)
    return risks + spec.rho * np.sum(params.v ** 2, axis=1)


def objective(params: ParamVector, data: Dataset, spec: ModelSpec, model_groups=None) -> float:
    """True (unsmoothed) hinge objective of the method.

    Risks are group-balanced: ``(1/k) sum_t`` of per-group average hinge loss,
    with groups taken from ``data.groups``.  ``model_groups`` (default: the
    true groups) selects which task model each sample is routed through.
    """
    _check_layout(params, spec)
    routed = data.groups if model_groups is None else np.asarray(model_groups)
    y, k = data.labels, data.k
    if spec.method == "ITL":
        return float(np.mean(group_objectives(params, data, spec, routed)))
    shared = hinge(y * scores(params, data.X, routed, _shared(spec)))
    if spec.method == "STL":
        risk = _group_means(shared, data.groups, k).mean()
    elif spec.method == "STL_GROUP_BIAS":
        m = y * scores(params, data.X, routed, spec)
        risk = _group_means(hinge(m), data.groups, k).mean()
    else:
        specific = hinge(y * scores(params, data.X, routed, _specific(spec)))
        risk = (spec.theta * _group_means(shared, data.groups, k).mean()
                + (1 - spec.theta) * _group_means(specific, data.groups, k).mean())
    return float(risk + penalty(params, spec))


def _shared(spec: ModelSpec) -> ModelSpec:
    return replace(spec, method="MTL", group_specific_prediction=False)


def _specific(spec: ModelSpec) -> ModelSpec:
    return replace(spec, method="MTL", group_specific_prediction=True)


def check_partition(data: Dataset):
    gi = group_partition(data)
    if np.any(gi.n == 0):
        raise ValueError("a group has no samples")
    return gi
