"""Reference methods: pick-best-class, ranker confidence, classifier configs."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Scene
from .model import ModelConfig

DETECTION_THRESHOLD = 0.1


@dataclass
class ClassPreferenceTable:
    """Per task: ``fraction[c] = preferred[c] / total[c]`` over the train set."""

    preferred: dict[int, dict[int, int]]
    total: dict[int, dict[int, int]]

    def fraction(self, task: int, category: int) -> float:
        return self.preferred[task].get(category, 0) / self.total[task][category]

    def ranking(self, task: int) -> list[int]:
        """Categories seen for ``task``, best first; ties go to the lower index."""
        cats = self.total.get(task, {})
        return sorted(cats, key=lambda c: (-self.fraction(task, c), c))

    def rank_of(self, task: int) -> dict[int, int]:
        return {c: r for r, c in enumerate(self.ranking(task))}


def fit_class_preference(train: Dataset) -> ClassPreferenceTable:
    preferred: dict[int, Counter] = {t: Counter() for t in train.task_ids}
    total: dict[int, Counter] = {t: Counter() for t in train.task_ids}
    for scene in train.scenes:
        cats = scene.categories.tolist()
        for task, labels in scene.labels.items():
            for c, y in zip(cats, np.asarray(labels).tolist()):
                total[task][c] += 1
                preferred[task][c] += int(y)
    return ClassPreferenceTable(
        {t: dict(c) for t, c in preferred.items()}, {t: dict(c) for t, c in total.items()}
    )


def pick_best_class_predict(scene: Scene, table: ClassPreferenceTable, task: int,
                            threshold: float = DETECTION_THRESHOLD) -> np.ndarray:
    """Detection scores of the best-ranked category present; zero elsewhere."""
    scores = scene.scores
    out = np.zeros(len(scene))
    ranks = table.rank_of(task)
    survivors = [i for i, s in enumerate(scores) if s >= threshold]
    ranked = [(ranks[scene.objects[i].category], i) for i in survivors
              if scene.objects[i].category in ranks]
    if not ranked:
        return out
    best_rank = min(r for r, _ in ranked)
    for r, i in ranked:
        if r == best_rank:
            out[i] = scores[i]
    return out


def pick_best_class_confidences(scene: Scene, table: ClassPreferenceTable, M: int,
                                threshold: float = DETECTION_THRESHOLD) -> np.ndarray:
    return np.stack(
        [pick_best_class_predict(scene, table, t, threshold) for t in range(1, M + 1)], axis=1
    )


def rank_to_confidence(ranks, n: int) -> np.ndarray:
    """``c = 1 - (r - 1) / n`` for ranks ``r`` in ``1..n``."""
    ranks = np.asarray(ranks)
    if n < 1 or np.any(ranks < 1) or np.any(ranks > n):
        raise ValueError(f"ranks must lie in [1, {n}]")
    return 1.0 - (ranks - 1) / n


def ranker_confidences(ranking_scores, detection_scores,
                       threshold: float = DETECTION_THRESHOLD) -> np.ndarray:
    """Turn an external ranker's per-object scores into final confidences.

    Detections below ``threshold`` are dropped (confidence 0); the rest are
    ranked by descending ranking score, ties by object order.
    """
    ranking_scores = np.asarray(ranking_scores, dtype=np.float64)
    keep = np.flatnonzero(np.asarray(detection_scores) >= threshold)
    out = np.zeros(len(ranking_scores))
    if len(keep) == 0:
        return out
    order = keep[np.argsort(-ranking_scores[keep], kind="stable")]
    out[order] = rank_to_confidence(np.arange(1, len(order) + 1), len(order))
    return out


CLASSIFIER_VARIANTS = ("task-wise", "joint", "joint-class")


def classifier_config(base: ModelConfig, variant: str = "joint") -> tuple[ModelConfig, bool]:
    """Classifier baselines as graph-free model configs; returns ``(config, per_task)``."""
    if variant not in CLASSIFIER_VARIANTS:
        raise ValueError(f"variant must be one of {CLASSIFIER_VARIANTS}")
    cfg = replace(
        base,
        use_graph=False,
        use_class_input=variant == "joint-class",
        use_visual_input=True,
        use_bbox_input=False,
        use_weighted_aggregation=False,
        use_aux_head=False,
        fusion_mode="graph_only",
    )
    return cfg, variant == "task-wise"


ABLATIONS = ("classifier", "a", "b", "c", "d", "e", "f", "g", "h")


def ablation_config(base: ModelConfig, name: str) -> tuple[ModelConfig, bool]:
    """Config for one step of the ablation ladder; returns ``(config, per_task)``.

    ``classifier`` and a-b are graph-free; c adds the graph without score
    weighting, d adds weighting, e the auxiliary loss, f test-time fusion;
    g drops visual input and h swaps it for normalized box geometry.
    """
    if name == "classifier":
        return classifier_config(base, "task-wise")
    if name == "a":
        return classifier_config(base, "joint")
    if name == "b":
        return classifier_config(base, "joint-class")
    full = replace(base, use_graph=True, use_class_input=True, use_visual_input=True,
                   use_bbox_input=False)
    table = {
        "c": replace(full, use_weighted_aggregation=False, use_aux_head=False, fusion_mode="graph_only"),
        "d": replace(full, use_weighted_aggregation=True, use_aux_head=False, fusion_mode="graph_only"),
        "e": replace(full, use_weighted_aggregation=True, use_aux_head=True, fusion_mode="graph_only"),
        "f": replace(full, use_weighted_aggregation=True, use_aux_head=True, fusion_mode="average"),
        "g": replace(full, use_visual_input=False, use_aux_head=False, fusion_mode="graph_only"),
        "h": replace(full, use_visual_input=False, use_bbox_input=True, use_aux_head=False,
                     fusion_mode="graph_only"),
    }
    if name not in table:
        raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
    return table[name], False
