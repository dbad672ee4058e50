from dataclasses import replace

import numpy as np
import pytest

from taskgraph.errors import ConfigError
from taskgraph.synthetic import SynthConfig, generate_dataset, label_scene, make_world


@pytest.fixture(scope="module")
def default_splits():
    return generate_dataset(SynthConfig())


@pytest.fixture(scope="module")
def world():
    return make_world(SynthConfig(K=5, M=2, preferences=((3, 1, 0), (2,))))


def test_single_usable_object_preferred(world):
    cats = np.array([4, 1, 4])
    assert label_scene(cats, np.array([0.2, 0.1, 0.9]), world, 1, 0.15).tolist() == [0, 1, 0]


def test_all_unusable_gives_zero_labels(world):
    cats = np.array([4, 0, 1])
    assert not label_scene(cats, np.array([0.5, 0.5, 0.5]), world, 2, 0.15).any()


def test_higher_ranked_category_wins(world):
    cats = np.array([1, 3, 0])
    assert label_scene(cats, np.array([0.9, 0.0, 0.9]), world, 1, 0.15).tolist() == [0, 1, 0]


def test_quality_margin_within_category(world):
    cats = np.array([1, 1, 1])
    labels = label_scene(cats, np.array([0.8, 0.7, 0.5]), world, 1, 0.15)
    assert labels.tolist() == [1, 1, 0]


def test_identical_object_labels_depend_on_context(world):
    # same category and quality; only the co-occurring category differs
    alone = label_scene(np.array([1, 4]), np.array([0.6, 0.3]), world, 1, 0.15)
    outranked = label_scene(np.array([1, 3]), np.array([0.6, 0.3]), world, 1, 0.15)
    assert alone[0] == 1 and outranked[0] == 0


def test_world_shape():
    cfg = SynthConfig()
    w = make_world(cfg)
    assert w.prototypes.shape == (cfg.K, cfg.F)
    assert np.allclose(np.linalg.norm(w.prototypes, axis=1), 4 * cfg.sigma)
    assert all(len(p) == cfg.usable_per_task and len(set(p)) == len(p) for p in w.preferences)


def test_deterministic_under_seed():
    cfg = SynthConfig(train_scenes=500, test_scenes=50)
    a, b = generate_dataset(cfg), generate_dataset(cfg)
    for split in a:
        assert a[split].scenes == b[split].scenes
        assert a[split].features.tobytes() == b[split].features.tobytes()
    counts = lambda ds: [int(sum(s.labels[t].sum() for s in ds.scenes)) for t in ds.task_ids]  # noqa: E731
    assert counts(a["train"]) == counts(b["train"])
    other = generate_dataset(replace(cfg, seed=43))
    assert counts(other["train"]) != counts(a["train"]) or other["train"].scenes != a["train"].scenes


def test_split_properties(default_splits):
    cfg = SynthConfig()
    train, test, noisy = default_splits["train"], default_splits["test"], default_splits["test_noisy"]
    assert len(train.scenes) == cfg.train_scenes and len(test.scenes) == cfg.test_scenes
    for s in train.scenes:
        assert np.all(s.scores == 1.0)
        assert cfg.n_min <= len(s) <= cfg.n_max
        assert len(set(s.categories.tolist())) <= cfg.max_categories_per_scene
        assert all(o.bbox.w > 0 and o.bbox.h > 0 for o in s.objects)
    scores = np.concatenate([s.scores for s in test.scenes])
    assert np.all((scores > 1 - cfg.score_noise) & (scores <= 1.0))
    for clean, dirty in zip(test.scenes, noisy.scenes):
        extra = len(dirty) - len(clean)
        assert 0 <= extra <= cfg.distractors_max
        for a, b in zip(dirty.objects, clean.objects):
            assert (a.bbox, a.detection_score, a.category) == (b.bbox, b.detection_score, b.category)
            assert np.array_equal(a.feature, b.feature)
        for t, labels in dirty.labels.items():
            assert not labels[len(clean):].any()
        lo, hi = cfg.distractor_score
        assert all(lo <= o.detection_score <= hi for o in dirty.objects[len(clean):])


def test_features_follow_generation_rule(default_splits):
    cfg = SynthConfig()
    w = make_world(cfg)
    ds = default_splits["train"]
    cats = np.concatenate([s.categories for s in ds.scenes])
    feats = np.concatenate([s.feature_matrix() for s in ds.scenes])
    resid = feats - w.prototypes[cats]
    assert abs(resid[:, 1:].std() - cfg.sigma) < 0.01
    assert abs(resid[:, 0].mean() - 0.5) < 0.02


def test_context_dependent_pairs_exist_for_every_task(default_splits):
    ds = default_splits["train"]
    w = make_world(SynthConfig())
    for t in ds.task_ids:
        chosen, rejected = set(), set()
        for s in ds.scenes:
            cats = s.categories
            labels = s.labels[t]
            present = set(cats.tolist())
            for c in present:
                r = w.rank(t, c)
                if r is None:
                    continue
                outranked = any((w.rank(t, o) is not None and w.rank(t, o) < r) for o in present)
                if labels[cats == c].any():
                    chosen.add(c)
                elif outranked:
                    rejected.add(c)
        assert chosen & rejected, t


def test_intra_category_differentiation_occurs(default_splits):
    ds = default_splits["train"]
    for t in ds.task_ids:
        partial = 0
        for s in ds.scenes:
            labels = s.labels[t]
            if not labels.any():
                continue
            best = s.categories[labels.astype(bool)][0]
            members = labels[s.categories == best]
            partial += 0 < members.sum() < len(members)
        assert partial > 0, t


@pytest.mark.parametrize("kwargs", [
    dict(n_min=0), dict(n_min=4, n_max=3), dict(delta=0.0), dict(sigma=-1.0),
    dict(usable_per_task=0), dict(preferences=((0, 0), (1,), (2,))), dict(preferences=((0,),)),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigError):
        SynthConfig(**kwargs)
