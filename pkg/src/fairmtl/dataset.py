"""Loading, encoding and indexing of the Adult, COMPAS and generic CSV datasets.

A :class:`Dataset` holds the encoded feature matrix together with the
sensitive group of every sample (ids ``1..k``) and the binary label
(``-1``/``+1``).  Train and test rows live in the same object and are told
apart by ``is_test``; continuous columns are standardized with training-split
statistics only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

ADULT_COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education-num",
    "marital-status", "occupation", "relationship", "race", "sex",
    "capital-gain", "capital-loss", "hours-per-week", "native-country", "income",
]
ADULT_CATEGORICAL = [
    "workclass", "education", "marital-status", "occupation",
    "relationship", "race", "sex", "native-country",
]
ADULT_SENSITIVE = {"G": ["sex"], "R": ["race"], "G+R": ["race", "sex"]}

COMPAS_FEATURES = [
    "age", "priors_count", "juv_fel_count", "juv_misd_count",
    "juv_other_count", "c_charge_degree",
]
COMPAS_CATEGORICAL = ["c_charge_degree"]
COMPAS_SENSITIVE = {"G": ["sex"], "R": ["race"], "G+R": ["sex", "race"]}

MISSING_MARKER = "?"
SCHEMAS = ("adult", "compas", "generic-csv", "internal")


class DatasetError(ValueError):
    """Raised when a file cannot be turned into a valid :class:`Dataset`."""


class Sample(NamedTuple):
    features: np.ndarray
    group: int
    label: int


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    groups: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    group_names: tuple[str, ...]
    sensitive_spec: tuple[str, ...] = ()
    includes_sensitive: bool = False
    is_test: np.ndarray | None = None
    # raw sensitive values of each group, used to rebuild the appended
    # one-hot columns when groups are replaced by predictions
    group_values: tuple[tuple[str, ...], ...] = ()
    sensitive_levels: tuple[tuple[str, ...], ...] = ()
    n_sensitive_columns: int = 0

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        groups = np.asarray(self.groups, dtype=np.int64)
        labels = np.asarray(self.labels, dtype=np.int64)
        is_test = (np.zeros(len(groups), dtype=bool) if self.is_test is None
                   else np.asarray(self.is_test, dtype=bool))
        if X.ndim != 2:
            raise DatasetError("feature matrix must be 2-D")
        n = X.shape[0]
        if not (len(groups) == len(labels) == len(is_test) == n):
            raise DatasetError("features, groups, labels and split mask differ in length")
        if n == 0:
            raise DatasetError("dataset is empty")
        if not np.all(np.isfinite(X)):
            raise DatasetError("non-finite feature values")
        if not np.all(np.isin(labels, (-1, 1))):
            raise DatasetError("labels must be -1 or +1")
        k = len(self.group_names)
        if groups.min() < 1 or groups.max() > k:
            raise DatasetError(f"group ids must lie in 1..{k}")
        empty = np.flatnonzero(np.bincount(groups, minlength=k + 1)[1:] == 0)
        if len(empty):
            raise DatasetError(f"group(s) {(empty + 1).tolist()} have no samples")
        if len(self.feature_names) != X.shape[1]:
            raise DatasetError("feature_names does not match the feature dimension")
        for arr in (X, groups, labels, is_test):
            arr.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "is_test", is_test)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def k(self) -> int:
        return len(self.group_names)

    @property
    def n_base(self) -> int:
        """Number of leading feature columns not derived from the sensitive attribute."""
        return self.d - self.n_sensitive_columns

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Sample:
        return Sample(self.X[i], int(self.groups[i]), int(self.labels[i]))

    def samples(self) -> list[Sample]:
        return [self[i] for i in range(self.n)]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, X=self.X[idx], groups=self.groups[idx],
                       labels=self.labels[idx], is_test=self.is_test[idx])

    def train(self) -> "Dataset":
        return self.subset(np.flatnonzero(~self.is_test))

    def test(self) -> "Dataset":
        if not self.is_test.any():
            raise DatasetError("dataset has no test split")
        return self.subset(np.flatnonzero(self.is_test))

    def base_features(self) -> np.ndarray:
        return self.X[:, : self.n_base]

    def sensitive_columns_for(self, groups) -> np.ndarray:
        """One-hot sensitive indicator block that the given group ids would produce."""
        groups = np.asarray(groups)
        blocks = []
        for j, levels in enumerate(self.sensitive_levels):
            vals = np.array([self.group_values[g - 1][j] for g in range(1, self.k + 1)])
            per_group = (vals[:, None] == np.array(levels)[None, :]).astype(float)
            blocks.append(per_group[groups - 1])
        return np.hstack(blocks) if blocks else np.zeros((len(groups), 0))

    def with_model_groups(self, groups) -> "Dataset":
        """Copy whose appended sensitive columns encode ``groups`` instead of the true ones.

        Group ids and labels are left untouched; only feature columns change.
        """
        if not self.includes_sensitive:
            return self
        X = self.X.copy()
        X[:, self.n_base:] = self.sensitive_columns_for(groups)
        return replace(self, X=X)


@dataclass(frozen=True)
class GroupIndex:
    members: tuple[np.ndarray, ...]
    positives: tuple[np.ndarray, ...]
    negatives: tuple[np.ndarray, ...]
    n: np.ndarray = field(repr=False)
    n_pos: np.ndarray = field(repr=False)
    n_neg: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return len(self.members)

    def cell(self, t: int, cls: int) -> np.ndarray:
        """Indices of group ``t`` (1-based) with label ``cls``."""
        return self.positives[t - 1] if cls > 0 else self.negatives[t - 1]

    def proportions(self) -> np.ndarray:
        return self.n / self.n.sum()


def group_partition(data: Dataset, groups=None) -> GroupIndex:
    groups = data.groups if groups is None else np.asarray(groups)
    members, pos, neg = [], [], []
    for t in range(1, data.k + 1):
        m = np.flatnonzero(groups == t)
        members.append(m)
        pos.append(m[data.labels[m] > 0])
        neg.append(m[data.labels[m] < 0])
    return GroupIndex(
        tuple(members), tuple(pos), tuple(neg),
        n=np.array([len(m) for m in members]),
        n_pos=np.array([len(m) for m in pos]),
        n_neg=np.array([len(m) for m in neg]),
    )


def stratified_folds(data: Dataset, n_folds: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split indices into folds with near-proportional (group, label) cell counts.

    Each cell is shuffled and dealt round-robin; every cell starts where the
    previous one stopped so fold sizes stay balanced as well.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(data.n, dtype=np.int64)
    offset = 0
    for t in range(1, data.k + 1):
        for cls in (1, -1):
            cell = np.flatnonzero((data.groups == t) & (data.labels == cls))
            name = data.group_names[t - 1]
            if len(cell) == 0:
                raise DatasetError(f"cell (group {t} '{name}', label {cls:+d}) is empty")
            if len(cell) < n_folds:
                log.warning("cell (group %d '%s', label %+d) has %d samples, fewer than "
                            "n_folds=%d; some folds will miss it", t, name, cls, len(cell),
                            n_folds)
            cell = rng.permutation(cell)
            fold_of[cell] = (offset + np.arange(len(cell))) % n_folds
            offset += len(cell)
    folds = []
    for f in range(n_folds):
        val = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        folds.append((train, val))
    return folds


def stratified_split(groups, labels, test_fraction: float, seed: int) -> np.ndarray:
    """Boolean test mask drawing ``test_fraction`` of every (group, label) cell."""
    rng = np.random.default_rng(seed)
    mask = np.zeros(len(groups), dtype=bool)
    for key in sorted(set(zip(groups.tolist(), labels.tolist()))):
        cell = np.flatnonzero((groups == key[0]) & (labels == key[1]))
        n_test = int(round(test_fraction * len(cell)))
        mask[rng.permutation(cell)[:n_test]] = True
    return mask


# ---------------------------------------------------------------------------
# encoding


def _encode(frame: pd.DataFrame, label: np.ndarray, is_test: np.ndarray,
            sensitive: list[str], categorical: list[str], continuous: list[str],
            include_sensitive: bool, sensitive_spec) -> Dataset:
    if len(frame) == 0:
        raise DatasetError("no rows left after filtering")
    missing = [c for c in sensitive if c not in frame.columns]
    if missing:
        raise DatasetError(f"sensitive column(s) missing: {missing}")

    sens = frame[sensitive].astype(str)
    keys = [tuple(r) for r in sens.itertuples(index=False, name=None)]
    train_keys = [key for key, te in zip(keys, is_test) if not te]
    counts: dict[tuple, int] = {}
    for key in train_keys:
        counts[key] = counts.get(key, 0) + 1
    for key in keys:
        counts.setdefault(key, 0)
    # canonical order: largest training group first, ties by name
    order = sorted(counts, key=lambda key: (-counts[key], key))
    if any(counts[key] == 0 for key in order):
        empty = [key for key in order if counts[key] == 0]
        raise DatasetError(f"group(s) with no training samples: {empty}")
    gid = {key: i + 1 for i, key in enumerate(order)}
    groups = np.array([gid[key] for key in keys], dtype=np.int64)

    blocks, names = [], []
    train_rows = ~is_test
    for col in continuous:
        v = pd.to_numeric(frame[col]).to_numpy(dtype=float)
        mu = v[train_rows].mean()
        sd = v[train_rows].std()
        blocks.append(((v - mu) / (sd if sd > 0 else 1.0))[:, None])
        names.append(col)
    for col in categorical:
        v = frame[col].astype(str).to_numpy()
        levels = sorted(set(v))
        blocks.append((v[:, None] == np.array(levels)[None, :]).astype(float))
        names.extend(f"{col}={lv}" for lv in levels)

    group_values = tuple(order)
    levels = tuple(tuple(sorted(set(sens[c]))) for c in sensitive)
    n_sens = sum(len(lv) for lv in levels) if include_sensitive else 0
    if include_sensitive:
        for c, lv in zip(sensitive, levels):
            v = sens[c].to_numpy()
            blocks.append((v[:, None] == np.array(lv)[None, :]).astype(float))
            names.extend(f"{c}={x}" for x in lv)

    X = np.hstack(blocks) if blocks else np.zeros((len(frame), 0))
    return Dataset(
        X=X, groups=groups, labels=label, feature_names=tuple(names),
        group_names=tuple("&".join(key) for key in order),
        sensitive_spec=tuple(sensitive_spec), includes_sensitive=include_sensitive,
        is_test=is_test, group_values=group_values, sensitive_levels=levels,
        n_sensitive_columns=n_sens,
    )


def _resolve_sensitive(spec, table: dict) -> list[str]:
    if isinstance(spec, str):
        if spec in table:
            return list(table[spec])
        return [c.strip() for c in spec.split(",") if c.strip()]
    return list(spec)


def _read_adult(path: Path) -> tuple[pd.DataFrame, np.ndarray]:
    if path.is_dir():
        train_path, test_path = path / "adult.data", path / "adult.test"
    else:
        train_path, test_path = path, path.with_name("adult.test")
    if not train_path.exists():
        raise DatasetError(f"Adult training file not found: {train_path}")
    frames = [pd.read_csv(train_path, names=ADULT_COLUMNS, skipinitialspace=True,
                          dtype=str, keep_default_na=False)]
    if test_path.exists():
        # the published test file starts with a "|1x3 Cross validator" line
        frames.append(pd.read_csv(test_path, names=ADULT_COLUMNS, skipinitialspace=True,
                                  dtype=str, keep_default_na=False, skiprows=1))
    else:
        log.warning("Adult test file %s not found; loading training rows only", test_path)
    frame = pd.concat(frames, ignore_index=True)
    is_test = np.concatenate([np.zeros(len(frames[0]), bool)]
                             + [np.ones(len(f), bool) for f in frames[1:]])
    keep = frame["income"].str.len() > 0
    return frame[keep].reset_index(drop=True), is_test[keep.to_numpy()]


def load_adult(path, sensitive_spec="G", include_sensitive=False, missing="drop",
               drop_fnlwgt=False) -> Dataset:
    frame, is_test = _read_adult(Path(path))
    if missing == "drop":
        ok = ~(frame == MISSING_MARKER).any(axis=1).to_numpy()
        frame, is_test = frame[ok].reset_index(drop=True), is_test[ok]
    elif missing != "keep":
        raise ValueError("missing must be 'drop' or 'keep'")
    income = frame["income"].str.rstrip(".")
    if not set(income) <= {">50K", "<=50K"}:
        raise DatasetError(f"non-binary label values: {sorted(set(income))}")
    label = np.where(income == ">50K", 1, -1)
    sensitive = _resolve_sensitive(sensitive_spec, ADULT_SENSITIVE)
    cat = [c for c in ADULT_CATEGORICAL if c not in sensitive]
    cont = [c for c in ADULT_COLUMNS
            if c not in ADULT_CATEGORICAL and c != "income" and c not in sensitive]
    if drop_fnlwgt:
        cont.remove("fnlwgt")
    return _encode(frame, label, is_test, sensitive, cat, cont, include_sensitive,
                   sensitive_spec if isinstance(sensitive_spec, str) else sensitive)


def load_compas(path, sensitive_spec="G", include_sensitive=False, compas_filter="none",
                test_fraction=0.3, split_seed=0) -> Dataset:
    path = Path(path)
    if path.is_dir():
        path = path / "compas-scores-two-years.csv"
    if not path.exists():
        raise DatasetError(f"COMPAS file not found: {path}")
    frame = pd.read_csv(path)
    if compas_filter == "propublica":
        frame = frame[(frame.days_b_screening_arrest <= 30)
                      & (frame.days_b_screening_arrest >= -30)
                      & (frame.is_recid != -1)
                      & (frame.c_charge_degree != "O")
                      & (frame.score_text != "N/A")]
    elif compas_filter != "none":
        raise ValueError("compas_filter must be 'none' or 'propublica'")
    frame = frame.reset_index(drop=True)
    days = (pd.to_datetime(frame.vr_offense_date)
            - pd.to_datetime(frame.compas_screening_date)).dt.days
    label = np.where((frame.is_violent_recid == 1) & (days <= 730), 1, -1)
    sensitive = _resolve_sensitive(sensitive_spec, COMPAS_SENSITIVE)
    missing = [c for c in sensitive if c not in frame.columns]
    if missing:
        raise DatasetError(f"sensitive column(s) missing: {missing}")
    keys = frame[sensitive].astype(str).agg("&".join, axis=1).to_numpy()
    _, key_ids = np.unique(keys, return_inverse=True)
    is_test = stratified_split(key_ids, label, test_fraction, split_seed)
    cat = [c for c in COMPAS_CATEGORICAL if c not in sensitive]
    cont = [c for c in COMPAS_FEATURES if c not in COMPAS_CATEGORICAL and c not in sensitive]
    return _encode(frame, label, is_test, sensitive, cat, cont, include_sensitive,
                   sensitive_spec if isinstance(sensitive_spec, str) else sensitive)


def _binary_labels(values: pd.Series, positive_label=None) -> np.ndarray:
    uniq = sorted(set(values.astype(str)))
    if len(uniq) > 2:
        raise DatasetError(f"non-binary label column with values {uniq[:5]}")
    if positive_label is not None:
        return np.where(values.astype(str) == str(positive_label), 1, -1)
    num = pd.to_numeric(values, errors="coerce")
    if num.notna().all():
        return np.where(num == num.max(), 1, -1)
    raise DatasetError("string label column needs an explicit positive_label")


def load_generic_csv(path, label_column, sensitive_spec, include_sensitive=False,
                     positive_label=None, categorical: Sequence[str] | None = None,
                     test_path=None) -> Dataset:
    frames = [pd.read_csv(path, dtype=str, keep_default_na=False, na_values=[""])]
    if test_path is not None:
        frames.append(pd.read_csv(test_path, dtype=str, keep_default_na=False, na_values=[""]))
    frame = pd.concat(frames, ignore_index=True)
    is_test = np.concatenate([np.zeros(len(frames[0]), bool)]
                             + [np.ones(len(f), bool) for f in frames[1:]])
    if label_column not in frame.columns:
        raise DatasetError(f"label column {label_column!r} missing")
    ok = ~frame.isna().any(axis=1).to_numpy()
    frame, is_test = frame[ok].reset_index(drop=True), is_test[ok]
    sensitive = _resolve_sensitive(sensitive_spec, {})
    label = _binary_labels(frame[label_column], positive_label)
    rest = [c for c in frame.columns if c != label_column and c not in sensitive]
    if categorical is None:
        categorical = [c for c in rest if pd.to_numeric(frame[c], errors="coerce").isna().any()]
    cat = [c for c in rest if c in categorical]
    cont = [c for c in rest if c not in categorical]
    return _encode(frame, label, is_test, sensitive, cat, cont, include_sensitive, sensitive)


def load_dataset(path, schema: str, sensitive_spec="G", include_sensitive=False, **options) -> Dataset:
    """Load and encode a dataset file.

    ``schema`` is one of ``adult``, ``compas``, ``generic-csv`` or
    ``internal`` (a snapshot written by :func:`save_internal_csv`).  Extra
    keyword options are passed to the schema-specific loader.
    """
    if schema == "adult":
        return load_adult(path, sensitive_spec, include_sensitive, **options)
    if schema == "compas":
        return load_compas(path, sensitive_spec, include_sensitive, **options)
    if schema == "generic-csv":
        return load_generic_csv(path, sensitive_spec=sensitive_spec,
                                include_sensitive=include_sensitive, **options)
    if schema == "internal":
        return load_internal_csv(path)
    raise DatasetError(f"unknown schema {schema!r}; expected one of {SCHEMAS}")


def save_internal_csv(data: Dataset, path) -> None:
    """Write the normalized snapshot: header ``f0..f{d-1},group,label``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{j}" for j in range(data.d)] + ["group", "label"])
        for x, g, y in zip(data.X, data.groups, data.labels):
            w.writerow([repr(float(v)) for v in x] + [int(g), int(y)])


def load_internal_csv(path) -> Dataset:
    """Read a snapshot file, or a directory holding ``train.csv`` and ``test.csv``.

    Snapshots keep features, groups and labels only, so predicted groups
    cannot be re-encoded into sensitive feature columns afterwards.
    """
    path = Path(path)
    if path.is_dir():
        parts = [_read_internal(path / "train.csv"), _read_internal(path / "test.csv")]
    else:
        parts = [_read_internal(path)]
    header = parts[0][0]
    if any(p[0] != header for p in parts):
        raise DatasetError("snapshot files have different headers")
    X = np.vstack([p[1] for p in parts])
    groups = np.concatenate([p[2] for p in parts])
    labels = np.concatenate([p[3] for p in parts])
    is_test = np.concatenate([np.full(len(p[2]), i > 0) for i, p in enumerate(parts)])
    k = int(groups.max())
    return Dataset(X=X, groups=groups, labels=labels, feature_names=tuple(header),
                   group_names=tuple(str(t) for t in range(1, k + 1)), is_test=is_test)


def _read_internal(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["group", "label"]:
        raise DatasetError("internal CSV must end with group,label columns")
    d = len(header) - 2
    X = np.array([[float(v) for v in r[:d]] for r in body]).reshape(len(body), d)
    groups = np.array([int(r[d]) for r in body], dtype=np.int64)
    labels = np.array([int(r[d + 1]) for r in body], dtype=np.int64)
    return header[:d], X, groups, labels
