"""AP@0.5 evaluation against preferred objects and scene-context retrieval."""

from __future__ import annotations

import csv
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .data import BBox, Dataset, Scene

log = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class DetectionResult:
    image_id: str
    task_id: int
    bbox: BBox
    final_confidence: float


def compute_iou(a: BBox, b: BBox) -> float:
    ix = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    iy = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.w * a.h + b.w * b.h - inter)


@dataclass
class APResult:
    ap: float
    gt: int
    tp: int
    fp: int
    recall: np.ndarray
    precision: np.ndarray


def match_detections(detections: list[DetectionResult], ground_truth: dict[str, list[BBox]],
                     threshold: float = IOU_THRESHOLD) -> tuple[list[int], np.ndarray]:
    """Greedy matching in descending confidence; returns (order, is_tp)."""
    # Python's sort is stable, so equal confidences keep input order.
    order = sorted(range(len(detections)), key=lambda i: -detections[i].final_confidence)
    used = {img: [False] * len(boxes) for img, boxes in ground_truth.items()}
    is_tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        det = detections[i]
        boxes = ground_truth.get(det.image_id, [])
        best, best_iou = -1, threshold
        for g, box in enumerate(boxes):
            if used[det.image_id][g]:
                continue
            iou = compute_iou(det.bbox, box)
            if iou >= best_iou and (best < 0 or iou > best_iou):
                best, best_iou = g, iou
        if best >= 0:
            used[det.image_id][best] = True
            is_tp[rank] = True
    return order, is_tp


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated AP over a PR curve given in detection order."""
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def ap_at_05(detections: list[DetectionResult], ground_truth: dict[str, list[BBox]]) -> APResult:
    """Category-agnostic AP@0.5 for one task.

    ``ground_truth`` maps image ids to the boxes of preferred objects.
    Raises ``ValueError`` when there is no ground truth at all.
    """
    n_gt = sum(len(b) for b in ground_truth.values())
    if n_gt == 0:
        raise ValueError("AP is undefined without ground-truth instances")
    _, is_tp = match_detections(detections, ground_truth)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    return APResult(
        ap=interpolated_ap(recall, precision),
        gt=n_gt,
        tp=int(is_tp.sum()),
        fp=int((~is_tp).sum()),
        recall=recall,
        precision=precision,
    )


@dataclass
class EvalReport:
    per_task: dict[int, APResult]
    skipped_tasks: list[int] = field(default_factory=list)

    @property
    def map(self) -> float:
        if not self.per_task:
            return float("nan")
        return float(np.mean([r.ap for r in self.per_task.values()]))

    def to_json(self) -> dict:
        out = {
            str(t): {"ap": r.ap, "gt": r.gt, "tp": r.tp, "fp": r.fp}
            for t, r in sorted(self.per_task.items())
        }
        out["map"] = self.map
        return out

    def write_pr_csv(self, directory) -> list[str]:
        paths = []
        for task, r in sorted(self.per_task.items()):
            path = os.path.join(directory, f"pr_task{task}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["recall", "precision"])
                writer.writerows(zip(r.recall.tolist(), r.precision.tolist()))
            paths.append(path)
        return paths


def worker_count() -> int:
    env = os.environ.get("TASKGRAPH_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def score_dataset(score_fn: Callable[[Scene], np.ndarray], dataset: Dataset) -> dict[str, np.ndarray]:
    """Map each non-empty scene's image id to its ``(N, M)`` final confidences."""
    scenes = [s for s in dataset.scenes if len(s)]
    threads = min(worker_count(), max(1, len(scenes)))
    if threads == 1:
        results = [score_fn(s) for s in scenes]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(score_fn, scenes))
    return {s.image_id: np.asarray(r) for s, r in zip(scenes, results)}


def evaluate(confidences: dict[str, np.ndarray], test: Dataset,
             tasks: Optional[Iterable[int]] = None) -> EvalReport:
    """Per-task AP@0.5 and mAP.

    ``confidences`` maps image ids to ``(N, M)`` final confidences. Objects
    with confidence 0 are treated as suppressed (not emitted). Only scenes
    annotated for a task take part in that task's evaluation.
    """
    report = EvalReport({})
    for task in tasks or test.task_ids:
        detections, gt = [], {}
        for scene in test.scenes:
            if task not in scene.labels or not len(scene):
                continue
            labels = scene.labels[task]
            gt[scene.image_id] = [o.bbox for o, y in zip(scene.objects, labels) if y]
            conf = confidences[scene.image_id][:, task - 1]
            detections.extend(
                DetectionResult(scene.image_id, task, o.bbox, float(c))
                for o, c in zip(scene.objects, conf)
                if c > 0
            )
        if sum(len(b) for b in gt.values()) == 0:
            warnings.warn(f"task {task} has no ground-truth instances; excluded from mAP")
            report.skipped_tasks.append(task)
            continue
        report.per_task[task] = ap_at_05(detections, gt)
    return report


def average_reports(reports: list[EvalReport]) -> dict:
    """Mean per-task AP and mAP over repeated runs."""
    tasks = sorted(set().union(*(r.per_task for r in reports)))
    out = {str(t): {"ap": float(np.mean([r.per_task[t].ap for r in reports if t in r.per_task]))}
           for t in tasks}
    out["map"] = float(np.mean([r.map for r in reports]))
    out["runs"] = len(reports)
    return out


# --- scene-context retrieval -------------------------------------------------


def knn_retrieve(query_state: np.ndarray, pool: np.ndarray, k: int = 5,
                 exclude: Optional[int] = None) -> np.ndarray:
    """Indices of the ``k`` pool rows nearest to the query in Euclidean distance.

    ``exclude`` removes the query's own row. Ties go to the lower index. If
    fewer than ``k`` rows remain, all of them are returned.
    """
    if len(pool) == 0:
        raise ValueError("empty retrieval pool")
    dist = np.sqrt(((pool - query_state) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order[:k]


def category_presence(scene: Scene, K: int) -> np.ndarray:
    vec = np.zeros(K, dtype=bool)
    vec[scene.categories] = True
    return vec


def category_set_accuracy(query: np.ndarray, retrieved: Iterable[np.ndarray]) -> float:
    """Mean fraction of category slots where query and retrieved scenes agree."""
    retrieved = list(retrieved)
    if not retrieved:
        return 0.0
    return float(np.mean([np.mean(np.asarray(query) == np.asarray(r)) for r in retrieved]))


def context_analysis(state_fn: Callable[[Scene, int], tuple[np.ndarray, np.ndarray]],
                     dataset: Dataset, k: int = 5) -> dict[int, dict[str, float]]:
    """Category-set prediction accuracy when retrieving by ``h0`` vs ``hT``.

    ``state_fn(scene, task)`` returns the ``(h0, hT)`` node states of a
    scene. For each task, every object of the scenes annotated for it
    queries its ``k`` nearest neighbours among all those objects.
    """
    out = {}
    for task in dataset.task_ids:
        scenes = [s for s in dataset.scenes if task in s.labels and len(s)]
        if not scenes:
            continue
        h0s, hTs, owner = [], [], []
        for si, scene in enumerate(scenes):
            h0, hT = state_fn(scene, task)
            h0s.append(h0)
            hTs.append(hT)
            owner.extend([si] * len(scene))
        presence = np.stack([category_presence(s, dataset.K) for s in scenes])
        owner = np.asarray(owner)
        accs = {}
        for name, states in (("h0_acc", np.concatenate(h0s)), ("hT_acc", np.concatenate(hTs))):
            per_query = [
                category_set_accuracy(
                    presence[owner[q]], presence[owner[knn_retrieve(states[q], states, k, exclude=q)]]
                )
                for q in range(len(states))
            ]
            accs[name] = float(np.mean(per_query))
        out[task] = accs
    return out
