"""Synthetic scenes whose task labels depend on scene context.

Every category has a fixed feature prototype. An object's feature is its
prototype plus a latent quality ``a`` in coordinate 0 plus Gaussian noise.
For each task a preference order ranks a subset of "usable" categories; in
a scene, only the best-ranked usable category present is chosen, and among
its instances only those whose quality is within ``delta`` of the best one.

So identical-looking objects can be preferred in one scene and rejected in
another, depending on whether a better category is present. Appearance
alone cannot resolve that; only the category ranking and relative quality
within the scene can.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import BBox, Dataset, ObjectHypothesis, Scene
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 42
    K: int = 6
    F: int = 16
    M: int = 3
    train_scenes: int = 1500
    test_scenes: int = 400
    n_min: int = 2
    n_max: int = 6
    max_categories_per_scene: int = 3
    sigma: float = 0.1
    delta: float = 0.15
    usable_per_task: int = 4
    preferences: Optional[tuple[tuple[int, ...], ...]] = None
    score_noise: float = 0.3
    distractors_max: int = 2
    distractor_score: tuple[float, float] = (0.1, 0.4)
    image_size: tuple[int, int] = (640, 480)

    def __post_init__(self):
        if self.n_min < 1 or self.n_max < self.n_min:
            raise ConfigError("need 1 <= n_min <= n_max")
        if self.delta <= 0:
            raise ConfigError("delta must be > 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.F < 1 or self.K < 1 or self.M < 1:
            raise ConfigError("K, F and M must be >= 1")
        if not 1 <= self.usable_per_task <= self.K:
            raise ConfigError("usable_per_task must lie in [1, K]")
        if self.preferences is not None:
            if len(self.preferences) != self.M:
                raise ConfigError("need one preference order per task")
            for order in self.preferences:
                if len(set(order)) != len(order) or any(not 0 <= k < self.K for k in order):
                    raise ConfigError(f"invalid preference order {order}")


@dataclass
class SynthWorld:
    """The fixed, seed-derived parts shared by all splits."""

    prototypes: np.ndarray  # (K, F)
    preferences: list[list[int]]  # per task, best category first

    def rank(self, task: int, category: int) -> Optional[int]:
        order = self.preferences[task - 1]
        return order.index(category) if category in order else None


def make_world(cfg: SynthConfig) -> SynthWorld:
    rng = np.random.default_rng([cfg.seed, 0])
    protos = rng.normal(size=(cfg.K, cfg.F))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    protos *= 4.0 * cfg.sigma
    if cfg.preferences is not None:
        prefs = [list(p) for p in cfg.preferences]
    else:
        prefs = [rng.permutation(cfg.K)[: cfg.usable_per_task].tolist() for _ in range(cfg.M)]
    return SynthWorld(protos, prefs)


def label_scene(categories: np.ndarray, quality: np.ndarray, world: SynthWorld, task: int,
                delta: float) -> np.ndarray:
    """Preferred objects for one task under the context rule."""
    labels = np.zeros(len(categories), dtype=np.int8)
    ranks = [world.rank(task, int(c)) for c in categories]
    usable = [r for r in ranks if r is not None]
    if not usable:
        return labels
    best = world.preferences[task - 1][min(usable)]
    members = categories == best
    top = quality[members].max()
    labels[members & (quality >= top - delta)] = 1
    return labels


def _random_box(rng: np.random.Generator, width: int, height: int) -> BBox:
    w = rng.uniform(0.05, 0.4) * width
    h = rng.uniform(0.05, 0.4) * height
    x = rng.uniform(0, width - w)
    y = rng.uniform(0, height - h)
    return BBox(float(x), float(y), float(w), float(h))


@dataclass
class _SplitBuilder:
    cfg: SynthConfig
    features: list = field(default_factory=list)

    def add_feature(self, vec: np.ndarray) -> tuple[np.ndarray, int]:
        stored = np.asarray(vec, dtype=np.float32)
        self.features.append(stored)
        return stored, len(self.features) - 1

    def dataset(self, scenes: list[Scene]) -> Dataset:
        cfg = self.cfg
        mat = np.stack(self.features) if self.features else np.zeros((0, cfg.F), dtype=np.float32)
        return Dataset(scenes, cfg.K, cfg.F, cfg.M, [f"cat{k}" for k in range(cfg.K)], None, mat)


def _sample_layout(rng: np.random.Generator, cfg: SynthConfig):
    n = int(rng.integers(cfg.n_min, cfg.n_max + 1))
    n_cats = int(rng.integers(1, min(n, cfg.max_categories_per_scene, cfg.K) + 1))
    cats = rng.choice(cfg.K, size=n_cats, replace=False)
    assignment = np.concatenate([cats, rng.choice(cats, size=n - n_cats)])
    rng.shuffle(assignment)
    quality = rng.uniform(0.0, 1.0, size=n)
    return assignment.astype(np.int64), quality


def generate_dataset(cfg: SynthConfig = SynthConfig()) -> dict[str, Dataset]:
    """Build ``train``, ``test`` and ``test_noisy`` splits.

    Train scenes carry detection score 1. Test scenes perturb scores to
    ``1 - U(0, score_noise)``. ``test_noisy`` holds the same test scenes plus
    up to ``distractors_max`` low-score spurious detections each, which are
    never preferred.
    """
    world = make_world(cfg)
    width, height = cfg.image_size
    splits = {}
    train_b, test_b, noisy_b = (_SplitBuilder(cfg) for _ in range(3))
    train, test, noisy = [], [], []
    for split, count in (("train", cfg.train_scenes), ("test", cfg.test_scenes)):
        rng = np.random.default_rng([cfg.seed, 1 if split == "train" else 2])
        for i in range(count):
            cats, quality = _sample_layout(rng, cfg)
            n = len(cats)
            raw = world.prototypes[cats] + rng.normal(scale=cfg.sigma, size=(n, cfg.F))
            raw[:, 0] += quality
            boxes = [_random_box(rng, width, height) for _ in range(n)]
            labels = {t: label_scene(cats, quality, world, t, cfg.delta) for t in range(1, cfg.M + 1)}
            image_id = f"{split}{i:05d}"
            if split == "train":
                objs = []
                for k in range(n):
                    feat, row = train_b.add_feature(raw[k])
                    objs.append(ObjectHypothesis(boxes[k], 1.0, int(cats[k]), feat, row))
                train.append(Scene(image_id, width, height, tuple(objs), labels))
                continue
            scores = 1.0 - rng.uniform(0.0, cfg.score_noise, size=n)
            objs, noisy_objs = [], []
            for k in range(n):
                feat, row = test_b.add_feature(raw[k])
                objs.append(ObjectHypothesis(boxes[k], float(scores[k]), int(cats[k]), feat, row))
                feat, row = noisy_b.add_feature(raw[k])
                noisy_objs.append(ObjectHypothesis(boxes[k], float(scores[k]), int(cats[k]), feat, row))
            test.append(Scene(image_id, width, height, tuple(objs), labels))

            n_extra = int(rng.integers(0, cfg.distractors_max + 1))
            noisy_labels = {t: np.concatenate([v, np.zeros(n_extra, dtype=np.int8)])
                            for t, v in labels.items()}
            for _ in range(n_extra):
                cat = int(rng.integers(cfg.K))
                vec = world.prototypes[cat] + rng.normal(scale=cfg.sigma, size=cfg.F)
                vec[0] += rng.uniform(0.0, 1.0)
                feat, row = noisy_b.add_feature(vec)
                score = float(rng.uniform(*cfg.distractor_score))
                noisy_objs.append(ObjectHypothesis(_random_box(rng, width, height), score, cat, feat, row))
            noisy.append(Scene(image_id, width, height, tuple(noisy_objs), noisy_labels))
    splits["train"] = train_b.dataset(train)
    splits["test"] = test_b.dataset(test)
    splits["test_noisy"] = noisy_b.dataset(noisy)
    return splits
