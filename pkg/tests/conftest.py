import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from gratin.datasets import Graph, GraphDataset

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

PKG_ROOT = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("GRATIN_DATA_ROOT", PKG_ROOT / "data"))


def random_graph(rng, n_min=2, n_max=12, p=0.3, feature_dim=3, num_classes=2, onehot=True):
    n = int(rng.integers(n_min, n_max + 1))
    iu, ju = np.triu_indices(n, k=1)
    mask = rng.random(len(iu)) < p
    edges = np.stack([iu[mask], ju[mask]], axis=1)
    if onehot:
        feats = np.eye(feature_dim)[rng.integers(feature_dim, size=n)]
    else:
        feats = rng.standard_normal((n, feature_dim))
    return Graph(n, edges, feats, int(rng.integers(num_classes)))


def random_dataset(rng, count, feature_dim=3, num_classes=2, **kw):
    graphs = [random_graph(rng, feature_dim=feature_dim, num_classes=num_classes, **kw) for _ in range(count)]
    return GraphDataset(graphs, num_classes, feature_dim, "toy")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mutag_root():
    root = DATA_ROOT / "MUTAG"
    if not (root / "MUTAG_A.txt").is_file():
        pytest.fail(f"MUTAG files not found under {root}")
    return root


ACCEPTANCE_LINES: list[str] = []


def record_acceptance(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
