import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from taskgraph.data import BBox, ObjectHypothesis, Scene  # noqa: E402
from taskgraph.model import ModelConfig  # noqa: E402


def make_scene(categories, features, scores=None, labels=None, image_id="img", boxes=None):
    n = len(categories)
    scores = [1.0] * n if scores is None else scores
    boxes = boxes or [BBox(10.0 * i, 5.0, 8.0, 6.0) for i in range(n)]
    objects = tuple(
        ObjectHypothesis(boxes[i], float(scores[i]), int(categories[i]),
                         np.asarray(features[i], dtype=np.float64), i)
        for i in range(n)
    )
    labels = {t: np.asarray(v, dtype=np.int8) for t, v in (labels or {}).items()}
    return Scene(image_id, 100, 100, objects, labels)


def random_scene(rng, n, K, F, M=2, score_range=(0.1, 1.0), image_id="rand"):
    return make_scene(
        rng.integers(K, size=n),
        rng.normal(size=(n, F)),
        rng.uniform(*score_range, size=n),
        {t: rng.integers(0, 2, size=n) for t in range(1, M + 1)},
        image_id=image_id,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(K=3, F=4, M=2, H=4, T=3, readout_hidden=5)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
