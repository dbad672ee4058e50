"""Scenes, object hypotheses, annotations and their on-disk formats.

Two files describe a dataset:

* a UTF-8 JSON scenes file holding boxes, categories, scores, labels and
  optional raw annotator votes, and
* a binary feature store (magic ``FTRS``) with one float32 row per object.

Feature extractors that crop image regions for the feature store should use
:func:`preprocess_bbox` so crops match the training-time geometry.
"""

from __future__ import annotations

import json
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from math import comb
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (
    DanglingReferenceError,
    DimensionMismatchError,
    FormatError,
    InvalidGeometryError,
    UndefinedStatisticError,
)

FEATURE_MAGIC = b"FTRS"
FEATURE_VERSION = 1
SCENES_VERSION = 1
_HEADER = struct.Struct("<4sIIQ")

DEFAULT_ANNOTATORS = 5
BOX_GROWTH = 1.1


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + self.w / 2.0, self.y + self.h / 2.0)

    def as_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def normalized(self, image_w: float, image_h: float) -> np.ndarray:
        return np.array(
            [self.x / image_w, self.y / image_h, self.w / image_w, self.h / image_h]
        )


@dataclass(frozen=True, eq=False)
class ObjectHypothesis:
    bbox: BBox
    detection_score: float
    category: int
    feature: Optional[np.ndarray] = None
    feature_row: int = -1

    def with_score(self, score: float) -> "ObjectHypothesis":
        return ObjectHypothesis(self.bbox, score, self.category, self.feature, self.feature_row)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ObjectHypothesis):
            return NotImplemented
        if (self.bbox, self.detection_score, self.category, self.feature_row) != (
            other.bbox,
            other.detection_score,
            other.category,
            other.feature_row,
        ):
            return False
        if self.feature is None or other.feature is None:
            return self.feature is other.feature
        return np.array_equal(self.feature, other.feature)


@dataclass(frozen=True)
class AnnotationVotes:
    """Per task, how many of ``annotators`` people selected each object."""

    selected: dict[int, np.ndarray]
    annotators: int = DEFAULT_ANNOTATORS

    def __post_init__(self):
        for task, counts in self.selected.items():
            counts = np.asarray(counts)
            if np.any(counts < 0) or np.any(counts > self.annotators):
                raise FormatError(
                    f"task {task}: vote counts must lie in [0, {self.annotators}]"
                )


@dataclass(frozen=True, eq=False)
class Scene:
    image_id: str
    image_width: int
    image_height: int
    objects: tuple[ObjectHypothesis, ...]
    labels: dict[int, np.ndarray] = field(default_factory=dict)
    votes: Optional[AnnotationVotes] = None

    def __post_init__(self):
        n = len(self.objects)
        for task, vec in self.labels.items():
            if len(vec) != n:
                raise FormatError(
                    f"scene {self.image_id}: label vector for task {task} has "
                    f"length {len(vec)}, expected {n}"
                )

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def annotated_tasks(self) -> list[int]:
        return sorted(self.labels)

    @property
    def scores(self) -> np.ndarray:
        return np.array([o.detection_score for o in self.objects], dtype=np.float64)

    @property
    def categories(self) -> np.ndarray:
        return np.array([o.category for o in self.objects], dtype=np.int64)

    def feature_matrix(self) -> np.ndarray:
        return np.stack([np.asarray(o.feature, dtype=np.float64) for o in self.objects])

    def bbox_matrix(self) -> np.ndarray:
        """Boxes normalized by image size, one row (x, y, w, h) per object."""
        return np.stack(
            [o.bbox.normalized(self.image_width, self.image_height) for o in self.objects]
        )

    def permuted(self, order) -> "Scene":
        order = list(order)
        return Scene(
            self.image_id,
            self.image_width,
            self.image_height,
            tuple(self.objects[i] for i in order),
            {t: np.asarray(v)[order] for t, v in self.labels.items()},
            None
            if self.votes is None
            else AnnotationVotes(
                {t: np.asarray(v)[order] for t, v in self.votes.selected.items()},
                self.votes.annotators,
            ),
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.image_id, self.image_width, self.image_height, self.objects) != (
            other.image_id,
            other.image_width,
            other.image_height,
            other.objects,
        ):
            return False
        if self.labels.keys() != other.labels.keys():
            return False
        if any(not np.array_equal(self.labels[t], other.labels[t]) for t in self.labels):
            return False
        if (self.votes is None) != (other.votes is None):
            return False
        if self.votes is not None:
            a, b = self.votes, other.votes
            if a.annotators != b.annotators or a.selected.keys() != b.selected.keys():
                return False
            return all(np.array_equal(a.selected[t], b.selected[t]) for t in a.selected)
        return True


@dataclass(eq=False)
class Dataset:
    scenes: list[Scene]
    K: int
    F: int
    M: int
    category_names: list[str]
    feature_store_path: Optional[Path] = None
    features: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.category_names) != self.K:
            raise FormatError(f"{len(self.category_names)} category names for K={self.K}")
        for scene in self.scenes:
            for obj in scene.objects:
                if not 0 <= obj.category < self.K:
                    raise FormatError(
                        f"scene {scene.image_id}: category {obj.category} outside [0, {self.K})"
                    )
                if obj.feature is not None and len(obj.feature) != self.F:
                    raise DimensionMismatchError(
                        f"scene {scene.image_id}: feature length {len(obj.feature)} != F={self.F}"
                    )
            for task in scene.labels:
                if not 1 <= task <= self.M:
                    raise FormatError(f"scene {scene.image_id}: task id {task} outside [1, {self.M}]")

    @property
    def task_ids(self) -> list[int]:
        return list(range(1, self.M + 1))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            (self.K, self.F, self.M, self.category_names)
            == (other.K, other.F, other.M, other.category_names)
            and self.scenes == other.scenes
        )


def preprocess_bbox(b: BBox, image_w: float, image_h: float) -> BBox:
    """Square the box around its center, grow it by 10% and clip to the image.

    The side of the square is ``max(w, h) * 1.1``. Clipping can break
    squareness for boxes near the image border.
    """
    if not (b.w > 0 and b.h > 0):
        raise InvalidGeometryError(f"degenerate box {b}")
    cx, cy = b.center
    side = max(b.w, b.h) * BOX_GROWTH
    x0 = max(cx - side / 2.0, 0.0)
    y0 = max(cy - side / 2.0, 0.0)
    x1 = min(cx + side / 2.0, float(image_w))
    y1 = min(cy + side / 2.0, float(image_h))
    return BBox(x0, y0, x1 - x0, y1 - y0)


def majority_vote(votes: AnnotationVotes) -> dict[int, np.ndarray]:
    """An object is preferred when strictly more than half the annotators chose it."""
    if votes.annotators < 1:
        raise ValueError("need at least one annotator")
    return {
        task: (2 * np.asarray(counts) > votes.annotators).astype(np.int8)
        for task, counts in votes.selected.items()
    }


def _pair_agreement(selected: np.ndarray, annotators: int) -> np.ndarray:
    selected = np.asarray(selected, dtype=np.int64)
    agree = np.array(
        [comb(int(s), 2) + comb(annotators - int(s), 2) for s in selected], dtype=np.float64
    )
    return agree / comb(annotators, 2)


def annotation_consistency(votes, task: int) -> float:
    """Probability that two annotators agree on whether an object is preferred.

    For each object the fraction of agreeing annotator pairs is computed, then
    averaged over every object annotated for ``task``. ``votes`` is either a
    single :class:`AnnotationVotes` or an iterable of them (e.g. one per scene).
    """
    if isinstance(votes, AnnotationVotes):
        votes = [votes]
    fractions = []
    for v in votes:
        if v is None or task not in v.selected:
            continue
        if v.annotators < 2:
            raise UndefinedStatisticError("agreement needs at least two annotators")
        fractions.append(_pair_agreement(v.selected[task], v.annotators))
    if not fractions or sum(len(f) for f in fractions) == 0:
        raise UndefinedStatisticError(f"no objects annotated for task {task}")
    return float(np.concatenate(fractions).mean())


@dataclass
class TaskStats:
    task_id: int
    selected_categories: int
    instances_of_selected: int
    chosen: int
    intra_class: int
    consistency: Optional[float]
    preferred_per_image: dict[int, int]
    preferred_per_category: dict[int, int]

    def to_json(self) -> dict:
        return {
            "selected_categories": self.selected_categories,
            "instances_of_selected": self.instances_of_selected,
            "chosen": self.chosen,
            "intra_class": self.intra_class,
            "consistency": self.consistency,
            "preferred_per_image": {str(k): v for k, v in sorted(self.preferred_per_image.items())},
            "preferred_per_category": {
                str(k): v for k, v in sorted(self.preferred_per_category.items())
            },
        }


def dataset_stats(ds: Dataset) -> dict[int, TaskStats]:
    """Per-task dataset statistics.

    Only scenes annotated for a task contribute to it. The intra-class count
    adds every instance of an (image, category) group in which at least one
    but not all instances are preferred.
    """
    report = {}
    for task in ds.task_ids:
        scenes = [s for s in ds.scenes if task in s.labels]
        chosen_per_cat: Counter = Counter()
        total_per_cat: Counter = Counter()
        per_image: Counter = Counter()
        intra = 0
        for scene in scenes:
            labels = np.asarray(scene.labels[task])
            cats = scene.categories
            per_image[int(labels.sum())] += 1
            groups: dict[int, list[int]] = defaultdict(list)
            for c, y in zip(cats.tolist(), labels.tolist()):
                groups[c].append(y)
                total_per_cat[c] += 1
                chosen_per_cat[c] += y
            for ys in groups.values():
                if 0 < sum(ys) < len(ys):
                    intra += len(ys)
        selected = [c for c, n in chosen_per_cat.items() if n > 0]
        vote_sets = [s.votes for s in scenes if s.votes is not None and task in s.votes.selected]
        consistency = annotation_consistency(vote_sets, task) if vote_sets else None
        report[task] = TaskStats(
            task_id=task,
            selected_categories=len(selected),
            instances_of_selected=sum(total_per_cat[c] for c in selected),
            chosen=sum(chosen_per_cat.values()),
            intra_class=intra,
            consistency=consistency,
            preferred_per_image=dict(per_image),
            preferred_per_category={c: chosen_per_cat[c] for c in sorted(selected)},
        )
    return report


# --- feature store -----------------------------------------------------------


def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    if features.ndim != 2:
        raise DimensionMismatchError("feature matrix must be 2-D")
    rows, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, dim, rows))
        fh.write(features.tobytes(order="C"))


def read_features(path, expected_dim: Optional[int] = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated feature header")
    magic, version, dim, rows = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FormatError(f"{path}: unsupported feature store version {version}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"{path}: feature dim {dim} != declared F={expected_dim}")
    body = raw[_HEADER.size :]
    if len(body) != rows * dim * 4:
        raise FormatError(f"{path}: body holds {len(body)} bytes, expected {rows * dim * 4}")
    return np.frombuffer(body, dtype="<f4").reshape(rows, dim)


# --- scenes file -------------------------------------------------------------


def default_features_path(scenes_path) -> Path:
    return Path(scenes_path).with_suffix(".ftrs")


def _require(obj: dict, key: str, where: str):
    try:
        return obj[key]
    except KeyError:
        raise FormatError(f"{where}: missing field {key!r}") from None


def load_dataset(scenes_path, features_path=None, require_features: bool = True) -> Dataset:
    """Read a scenes JSON file and its feature store.

    When ``features_path`` is None the sibling ``<stem>.ftrs`` is used. With
    ``require_features=False`` a missing store is tolerated and objects carry
    no feature vectors (enough for statistics and baselines).
    """
    scenes_path = Path(scenes_path)
    try:
        doc = json.loads(scenes_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{scenes_path}: invalid JSON ({exc})") from None
    if doc.get("version") != SCENES_VERSION:
        raise FormatError(f"{scenes_path}: unsupported scenes version {doc.get('version')!r}")
    K, F, M = (int(_require(doc, k, str(scenes_path))) for k in ("K", "F", "M"))

    features_path = Path(features_path) if features_path else default_features_path(scenes_path)
    features = None
    if features_path.exists():
        features = read_features(features_path, expected_dim=F)
    elif require_features:
        raise FileNotFoundError(f"feature store {features_path} not found")

    scenes = []
    for si, s in enumerate(_require(doc, "scenes", str(scenes_path))):
        where = f"{scenes_path} scene #{si}"
        objects = []
        for o in _require(s, "objects", where):
            x, y, w, h = (float(v) for v in _require(o, "bbox", where))
            row = int(_require(o, "feature_row", where))
            feat = None
            if features is not None:
                if not 0 <= row < len(features):
                    raise DanglingReferenceError(
                        f"{where}: feature_row {row} outside store of {len(features)} rows"
                    )
                feat = features[row]
            objects.append(
                ObjectHypothesis(
                    bbox=BBox(x, y, w, h),
                    detection_score=float(_require(o, "score", where)),
                    category=int(_require(o, "category", where)),
                    feature=feat,
                    feature_row=row,
                )
            )
        votes = None
        if s.get("votes"):
            raw_votes = dict(s["votes"])
            annotators = int(raw_votes.pop("annotators", DEFAULT_ANNOTATORS))
            votes = AnnotationVotes(
                {int(t): np.asarray(v, dtype=np.int64) for t, v in raw_votes.items()}, annotators
            )
        labels = {int(t): np.asarray(v, dtype=np.int8) for t, v in s.get("labels", {}).items()}
        if not labels and votes is not None:
            labels = majority_vote(votes)
        scenes.append(
            Scene(
                image_id=str(_require(s, "image_id", where)),
                image_width=int(_require(s, "width", where)),
                image_height=int(_require(s, "height", where)),
                objects=tuple(objects),
                labels=labels,
                votes=votes,
            )
        )
    ds = Dataset(
        scenes=scenes,
        K=K,
        F=F,
        M=M,
        category_names=list(doc.get("categories") or [str(k) for k in range(K)]),
        feature_store_path=features_path if features is not None else None,
        features=features,
    )
    return ds


def _scene_to_json(scene: Scene) -> dict:
    out = {
        "image_id": scene.image_id,
        "width": scene.image_width,
        "height": scene.image_height,
        "objects": [
            {
                "bbox": o.bbox.as_list(),
                "category": o.category,
                "score": o.detection_score,
                "feature_row": o.feature_row,
            }
            for o in scene.objects
        ],
        "labels": {str(t): [int(v) for v in vec] for t, vec in sorted(scene.labels.items())},
    }
    if scene.votes is not None:
        votes = {str(t): [int(v) for v in c] for t, c in sorted(scene.votes.selected.items())}
        votes["annotators"] = scene.votes.annotators
        out["votes"] = votes
    return out


def _feature_matrix_for_save(ds: Dataset) -> np.ndarray:
    if ds.features is not None:
        return np.asarray(ds.features, dtype="<f4")
    rows = max((o.feature_row for s in ds.scenes for o in s.objects), default=-1) + 1
    mat = np.zeros((rows, ds.F), dtype="<f4")
    for s in ds.scenes:
        for o in s.objects:
            if o.feature is None:
                raise FormatError("cannot save features: object without feature vector")
            mat[o.feature_row] = o.feature
    return mat


def save_dataset(ds: Dataset, scenes_path, features_path=None) -> None:
    scenes_path = Path(scenes_path)
    features_path = Path(features_path) if features_path else default_features_path(scenes_path)
    doc = {
        "version": SCENES_VERSION,
        "K": ds.K,
        "F": ds.F,
        "M": ds.M,
        "categories": list(ds.category_names),
        "scenes": [_scene_to_json(s) for s in ds.scenes],
    }
    scenes_path.write_text(json.dumps(doc), encoding="utf-8")
    if any(o.feature is not None for s in ds.scenes for o in s.objects):
        write_features(features_path, _feature_matrix_for_save(ds))
