import json

import numpy as np
import pytest

from hoidistill.data import load_labels, load_split
from hoidistill.geometry import Box, iou
from hoidistill.synthworld import (
    OBJECT_RGB,
    VERB_RGB,
    RuleTable,
    SceneSpec,
    default_label_space,
    detector_stub,
    generate_dataset,
    generate_split,
    render_scene,
    sample_scene,
    zipf_weights,
)


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    labels = generate_dataset(root, seed=4, n_train=60, n_test=20)
    return root, labels


def test_deterministic(tmp_path):
    a = generate_dataset(tmp_path / "a", seed=2, n_train=8, n_test=3)
    b = generate_dataset(tmp_path / "b", seed=2, n_train=8, n_test=3)
    assert a == b
    for split in ("train", "test"):
        for name in ("images/data.bin", "proposals.json", "gt.json", "scenes.json"):
            assert (tmp_path / "a" / split / name).read_bytes() == (tmp_path / "b" / split / name).read_bytes()
    generate_dataset(tmp_path / "c", seed=3, n_train=8, n_test=3)
    assert (tmp_path / "c/train/images/data.bin").read_bytes() != (tmp_path / "a/train/images/data.bin").read_bytes()


def test_every_class_seen_in_train(world):
    root, labels = world
    assert labels.n == 30
    assert np.all(labels.train_counts() >= 1)
    assert load_labels(root) == labels


def test_rules_rederive_gt(world):
    root, labels = world
    rules = RuleTable(labels)
    for split in ("train", "test"):
        doc = json.loads((root / split / "scenes.json").read_text())
        for s in doc["scenes"]:
            scene = SceneSpec.from_json(s)
            for hi, oi, hoi in scene.interactions:
                h, o = scene.entities[hi], scene.entities[oi]
                assert rules.derive(h.box, o.box, o.class_id) == hoi


def test_rule_table_roundtrip():
    labels = default_label_space()
    rules = RuleTable(labels)
    for h in labels.hois:
        v, o = rules.decompose(h["id"])
        assert rules.hoi_id(v, o) == h["id"]
    assert RuleTable.sector(Box(10, 10, 12, 12), Box(30, 10, 32, 12), 6) == 0
    # image y points down, so "below" is the 90 degree sector
    assert RuleTable.sector(Box(10, 10, 12, 12), Box(10, 40, 12, 42), 6) == 2


def test_images_and_gt_shapes(world):
    root, _ = world
    split = load_split(root, "test", with_gt=True)
    assert len(split.image_ids) == 20
    for i in split.image_ids:
        img = split.images[i]
        assert img.shape == (64, 64, 3) and img.dtype == np.float32
        assert img.min() >= 0.0 and img.max() <= 1.0
    assert split.gt and all(1 <= g.hoi_id <= 30 for g in split.gt)
    # without the flag GT is not loaded at all
    assert load_split(root, "test").gt is None


def test_scene_has_bar_and_object_colours():
    labels = default_label_space()
    rules = RuleTable(labels)
    rng = np.random.default_rng(0)
    scene = sample_scene(rng, labels, rules, lambda r: 8)
    img = render_scene(scene, np.random.default_rng(1))
    verb, obj = rules.decompose(8)
    x1, y1, x2, y2, v = scene.bars[0]
    assert v == verb
    centre = img[int((y1 + y2) // 2), int((x1 + x2) // 2)]
    np.testing.assert_allclose(centre, VERB_RGB[verb], atol=1e-6)
    ob = scene.entities[scene.interactions[0][1]].box
    patch = img[int(ob.y1):int(ob.y2), int(ob.x1):int(ob.x2)]
    np.testing.assert_allclose(patch.mean(axis=(0, 1)), OBJECT_RGB[obj], atol=0.03)


def test_detector_recall(world):
    root, _ = world
    doc = json.loads((root / "test" / "scenes.json").read_text())
    split = load_split(root, "test")
    ious = []
    for s in doc["scenes"]:
        props = split.proposals[s["image_id"]]
        assert len(props) <= 20
        for e in s["entities"]:
            same = [p for p in props if p.class_id == e["class_id"]]
            ious.append(max((iou(p.box, Box.from_list(e["box"])) for p in same), default=0.0))
        for p in props:
            assert p.box.width > 0 and p.box.height > 0
            assert 0.0 <= p.box.x1 and p.box.x2 <= 64 and 0.0 <= p.box.y1 and p.box.y2 <= 64
    assert np.mean(ious) >= 0.5


def test_detector_exact_without_noise():
    labels = default_label_space()
    scene = sample_scene(np.random.default_rng(5), labels, RuleTable(labels), lambda r: 3)
    props = detector_stub(scene, 0, jitter=0.0, fp_rate=0.0)
    assert sorted(tuple(p.box.to_list()) for p in props) == sorted(tuple(e.box.to_list()) for e in scene.entities)
    assert all(p.is_human == (p.class_id == 1) for p in props)
    capped = detector_stub(scene, 0, fp_rate=50.0, cap=4)
    assert len(capped) == 4
    assert [p.score for p in capped] == sorted((p.score for p in capped), reverse=True)


def test_zipf_long_tail():
    w = zipf_weights(30, 1.2)
    assert w.sum() == pytest.approx(1.0)
    assert np.all(np.diff(w) < 0)
    assert w[0] / w[1] == pytest.approx(2 ** 1.2)
    labels = default_label_space()
    _, _, gts, _ = generate_split(0, "train", 300, labels, RuleTable(labels))
    counts = np.bincount([g.hoi_id for g in gts], minlength=31)[1:]
    # a long tail: some classes are rare while the head holds a large share
    assert (counts < 10).sum() >= 5
    assert np.sort(counts)[-3:].sum() >= 0.3 * counts.sum()
