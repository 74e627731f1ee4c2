from pathlib import Path

import numpy as np
import pytest

from fairmtl.dataset import Dataset

ROOT = Path(__file__).resolve().parents[1]
RAW = ROOT / "data" / "raw"


def make_data(X, groups, labels, is_test=None, k=None) -> Dataset:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    groups = np.asarray(groups)
    k = int(groups.max()) if k is None else k
    return Dataset(X=X, groups=groups, labels=np.asarray(labels),
                   feature_names=tuple(f"x{j}" for j in range(X.shape[1])),
                   group_names=tuple(f"g{t}" for t in range(1, k + 1)), is_test=is_test)


def random_data(rng, n, d, k, test_fraction=0.0) -> Dataset:
    """Gaussian features with a noisy linear label and every (group, label) cell filled."""
    while True:
        X = rng.normal(size=(n, d))
        groups = np.arange(n) % k + 1
        rng.shuffle(groups)
        w = rng.normal(size=d)
        shift = rng.normal(size=k)[groups - 1]
        labels = np.where(X @ w + shift + 0.5 * rng.normal(size=n) > 0, 1, -1)
        cells = {(g, y) for g, y in zip(groups, labels)}
        if len(cells) == 2 * k:
            break
    is_test = rng.random(n) < test_fraction if test_fraction else None
    return make_data(X, groups, labels, is_test, k)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def raw_dir():
    if not (RAW / "adult.data").exists():
        pytest.skip("raw Adult files not present")
    return RAW


@pytest.fixture(scope="session")
def compas_file():
    path = RAW / "compas-scores-two-years.csv"
    if not path.exists():
        pytest.skip("raw COMPAS file not present")
    return path


# one line per acceptance criterion, printed again at the end of the session
VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    def record(criterion: str, ok: bool, detail: str) -> bool:
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
