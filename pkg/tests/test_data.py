import itertools
import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_scene
from taskgraph.data import (
    AnnotationVotes,
    BBox,
    Dataset,
    annotation_consistency,
    dataset_stats,
    load_dataset,
    majority_vote,
    preprocess_bbox,
    read_features,
    save_dataset,
    write_features,
)
from taskgraph.errors import (
    DanglingReferenceError,
    DimensionMismatchError,
    FormatError,
    InvalidGeometryError,
    UndefinedStatisticError,
)


@pytest.mark.parametrize(
    "box, image, expected",
    [
        (BBox(20, 20, 10, 10), (100, 100), BBox(19.5, 19.5, 11, 11)),
        (BBox(10, 20, 40, 20), (200, 200), BBox(8, 8, 44, 44)),
        (BBox(0, 0, 10, 10), (100, 100), BBox(0, 0, 10.5, 10.5)),
    ],
)
def test_preprocess_bbox_examples(box, image, expected):
    out = preprocess_bbox(box, *image)
    assert out.as_list() == pytest.approx(expected.as_list(), abs=1e-12)


@pytest.mark.parametrize("w, h", [(0, 5), (5, 0), (-1, 3)])
def test_preprocess_bbox_rejects_degenerate(w, h):
    with pytest.raises(InvalidGeometryError):
        preprocess_bbox(BBox(1, 1, w, h), 100, 100)


coords = st.floats(min_value=1.0, max_value=400.0, allow_nan=False)


@given(x=coords, y=coords, w=coords, h=coords)
def test_preprocess_bbox_unclipped_properties(x, y, w, h):
    big = 10_000.0
    out = preprocess_bbox(BBox(x + 1000, y + 1000, w, h), big, big)
    assert out.w == pytest.approx(out.h, rel=1e-12)
    assert out.center[0] == pytest.approx(x + 1000 + w / 2, rel=1e-12)
    assert out.center[1] == pytest.approx(y + 1000 + h / 2, rel=1e-12)
    assert out.area >= w * h


@given(x=coords, y=coords, w=coords, h=coords)
def test_preprocess_bbox_stays_in_image(x, y, w, h):
    W, H = 500.0, 500.0
    b = BBox(min(x, W - 1), min(y, H - 1), min(w, W - min(x, W - 1)), min(h, H - min(y, H - 1)))
    out = preprocess_bbox(b, W, H)
    assert out.x >= 0 and out.y >= 0
    assert out.x + out.w <= W + 1e-9 and out.y + out.h <= H + 1e-9


@pytest.mark.parametrize("count, preferred", [(3, 1), (2, 0), (0, 0), (5, 1)])
def test_majority_vote_of_five(count, preferred):
    assert majority_vote(AnnotationVotes({1: np.array([count])}, 5))[1][0] == preferred


def test_majority_vote_even_needs_strict_majority():
    labels = majority_vote(AnnotationVotes({1: np.array([2, 3])}, 4))[1]
    assert labels.tolist() == [0, 1]


@given(st.integers(1, 9), st.data())
def test_majority_vote_monotone(annotators, data):
    count = data.draw(st.integers(0, annotators - 1))
    before = majority_vote(AnnotationVotes({1: np.array([count])}, annotators))[1][0]
    after = majority_vote(AnnotationVotes({1: np.array([count + 1])}, annotators))[1][0]
    assert after >= before


def _pair_oracle(selected, annotators):
    votes = [1] * selected + [0] * (annotators - selected)
    pairs = list(itertools.combinations(range(annotators), 2))
    return sum(votes[a] == votes[b] for a, b in pairs) / len(pairs)


def test_consistency_unanimous():
    assert annotation_consistency(AnnotationVotes({1: np.array([5])}), 1) == 1.0


def test_consistency_three_of_five():
    value = annotation_consistency(AnnotationVotes({1: np.array([3])}), 1)
    assert value == pytest.approx(_pair_oracle(3, 5), abs=1e-15)
    assert value == pytest.approx(0.4, abs=1e-15)


def test_consistency_matches_pair_enumeration_and_averages():
    counts = np.array([0, 1, 2, 3, 4, 5])
    expected = np.mean([_pair_oracle(int(c), 5) for c in counts])
    assert annotation_consistency(AnnotationVotes({2: counts}), 2) == pytest.approx(expected)


@given(st.lists(st.booleans(), min_size=2, max_size=8), st.randoms())
def test_consistency_invariant_under_annotator_relabeling(votes, rnd):
    shuffled = votes[:]
    rnd.shuffle(shuffled)
    a = annotation_consistency(AnnotationVotes({1: np.array([sum(votes)])}, len(votes)), 1)
    b = annotation_consistency(AnnotationVotes({1: np.array([sum(shuffled)])}, len(votes)), 1)
    assert a == b


def test_consistency_empty_raises():
    with pytest.raises(UndefinedStatisticError):
        annotation_consistency(AnnotationVotes({1: np.array([], dtype=int)}), 1)
    with pytest.raises(UndefinedStatisticError):
        annotation_consistency(AnnotationVotes({2: np.array([1])}), 1)


def _dataset(scenes, K=3, F=2, M=1):
    return Dataset(scenes, K, F, M, [f"c{k}" for k in range(K)])


def test_stats_single_preferred_object():
    ds = _dataset([make_scene([0], [[0.0, 0.0]], labels={1: [1]})])
    st1 = dataset_stats(ds)[1]
    assert (st1.selected_categories, st1.instances_of_selected, st1.chosen, st1.intra_class) == (1, 1, 1, 0)


def test_stats_intra_class_counts_every_instance_of_the_group():
    ds = _dataset([make_scene([1, 1], [[0, 0], [0, 0]], labels={1: [1, 0]})])
    assert dataset_stats(ds)[1].intra_class == 2


def test_stats_counts():
    scenes = [
        make_scene([0, 0, 1], np.zeros((3, 2)), labels={1: [1, 1, 0], 2: [0, 0, 1]}, image_id="a"),
        make_scene([0, 2, 2, 2], np.zeros((4, 2)), labels={1: [0, 1, 0, 0]}, image_id="b"),
        make_scene([1], np.zeros((1, 2)), labels={2: [0]}, image_id="c"),
    ]
    report = dataset_stats(_dataset(scenes, M=2))
    t1, t2 = report[1], report[2]
    # task 1: chosen categories {0, 2}; instances of those in task-1 scenes: 0 x3, 2 x3
    assert (t1.selected_categories, t1.instances_of_selected, t1.chosen, t1.intra_class) == (2, 6, 3, 3)
    assert t1.preferred_per_image == {2: 1, 1: 1}
    assert t1.preferred_per_category == {0: 2, 2: 1}
    assert (t2.selected_categories, t2.instances_of_selected, t2.chosen, t2.intra_class) == (1, 2, 1, 0)


@given(st.lists(st.lists(st.integers(0, 1), min_size=1, max_size=5), min_size=1, max_size=6))
def test_stats_chosen_equals_label_sum(label_lists):
    scenes = [
        make_scene([i % 3 for i in range(len(ls))], np.zeros((len(ls), 2)), labels={1: ls}, image_id=str(j))
        for j, ls in enumerate(label_lists)
    ]
    assert dataset_stats(_dataset(scenes))[1].chosen == sum(map(sum, label_lists))


def test_stats_consistency_from_votes(tmp_path):
    path = tmp_path / "s.json"
    doc = {"version": 1, "K": 2, "F": 2, "M": 1, "categories": ["a", "b"], "scenes": [
        {"image_id": "x", "width": 10, "height": 10,
         "objects": [{"bbox": [0, 0, 1, 1], "category": 0, "score": 1.0, "feature_row": 0},
                     {"bbox": [2, 2, 1, 1], "category": 1, "score": 1.0, "feature_row": 1}],
         "votes": {"1": [5, 3], "annotators": 5}}]}
    path.write_text(json.dumps(doc))
    ds = load_dataset(path, require_features=False)
    assert ds.scenes[0].labels[1].tolist() == [1, 1]
    assert dataset_stats(ds)[1].consistency == pytest.approx((1.0 + 0.4) / 2)


# --- file formats ------------------------------------------------------------------


def _write_pair(tmp_path, rows=3, F=4):
    feats = np.arange(rows * F, dtype=np.float32).reshape(rows, F) / 7.0
    write_features(tmp_path / "s.ftrs", feats)
    doc = {"version": 1, "K": 2, "F": F, "M": 2, "categories": ["a", "b"], "scenes": [
        {"image_id": "x", "width": 64, "height": 48,
         "objects": [{"bbox": [1.5, 2.0, 10.0, 12.25], "category": 1, "score": 0.75, "feature_row": 2},
                     {"bbox": [5, 6, 7, 8], "category": 0, "score": 1.0, "feature_row": 0}],
         "labels": {"1": [1, 0]}, "votes": {"1": [4, 1], "annotators": 5}},
        {"image_id": "empty", "width": 10, "height": 10, "objects": [], "labels": {}},
    ]}
    (tmp_path / "s.json").write_text(json.dumps(doc))
    return feats


def test_load_reads_values(tmp_path):
    feats = _write_pair(tmp_path)
    ds = load_dataset(tmp_path / "s.json")
    obj = ds.scenes[0].objects[0]
    assert obj.bbox == BBox(1.5, 2.0, 10.0, 12.25)
    assert obj.detection_score == 0.75 and obj.category == 1
    assert np.array_equal(obj.feature, feats[2])
    assert len(ds.scenes[1]) == 0


def test_round_trip_is_exact(tmp_path):
    _write_pair(tmp_path)
    ds = load_dataset(tmp_path / "s.json")
    out = tmp_path / "out"
    out.mkdir()
    save_dataset(ds, out / "s.json")
    again = load_dataset(out / "s.json")
    assert again == ds
    assert (out / "s.ftrs").read_bytes() == (tmp_path / "s.ftrs").read_bytes()
    save_dataset(again, out / "t.json")
    assert (out / "t.json").read_text() == (out / "s.json").read_text()


def test_dangling_feature_row(tmp_path):
    _write_pair(tmp_path, rows=2)
    with pytest.raises(DanglingReferenceError):
        load_dataset(tmp_path / "s.json")


def test_dimension_mismatch(tmp_path):
    _write_pair(tmp_path)
    write_features(tmp_path / "s.ftrs", np.zeros((3, 32), dtype=np.float32))
    doc = json.loads((tmp_path / "s.json").read_text())
    doc["F"] = 16
    (tmp_path / "s.json").write_text(json.dumps(doc))
    with pytest.raises(DimensionMismatchError):
        load_dataset(tmp_path / "s.json")


def test_bad_magic_and_version(tmp_path):
    path = tmp_path / "f.ftrs"
    path.write_bytes(struct.pack("<4sIIQ", b"NOPE", 1, 2, 0))
    with pytest.raises(FormatError, match="magic"):
        read_features(path)
    path.write_bytes(struct.pack("<4sIIQ", b"FTRS", 9, 2, 0))
    with pytest.raises(FormatError, match="version"):
        read_features(path)


def test_errors_are_distinct_classes():
    kinds = {FormatError, DimensionMismatchError, DanglingReferenceError}
    assert len({k.exit_code for k in kinds}) == 3


def test_label_length_validated():
    with pytest.raises(FormatError):
        make_scene([0, 1], np.zeros((2, 2)), labels={1: [1]})
