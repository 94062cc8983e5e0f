import numpy as np
import pytest

from hoidistill.branches import BASELINE, EARLY, FULL, TF, TFSTAR, BranchOutputs, enumerate_pairs
from hoidistill.distill import (
    ConfigError,
    PairMismatchError,
    SupervisionCache,
    TrainConfig,
    class_subset,
    compute_losses,
    crop_resize,
    load_checkpoint,
    make_global_crop,
    make_union_crop,
    precompute_supervision,
    predict_student,
    predict_training_free,
    prepare_features,
    save_checkpoint,
    train,
    write_curve,
)
from hoidistill.geometry import Box, BoxError
from hoidistill.tensorcore import Tensor, gradcheck, leaf64


def softmax_np(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def kl_np(p, q, eps=1e-8):
    return (p * np.log((p + eps) / (q + eps))).sum(-1)


# -- crops ---------------------------------------------------------------------
def test_crops_have_teacher_resolution():
    img = np.random.default_rng(0).random((48, 64, 3)).astype(np.float32)
    assert make_global_crop(img, 32).shape == (32, 32, 3)
    assert make_union_crop(img, Box(-5, 3, 20, 30), 32).shape == (32, 32, 3)
    with pytest.raises(BoxError):
        make_union_crop(img, Box(70, 0, 80, 10), 32)


def test_crop_of_constant_region_is_constant():
    img = np.zeros((64, 64, 3), dtype=np.float32)
    # edge samples blend with the neighbouring pixel, so pad the region by one
    img[9:31, 19:41] = 0.7
    np.testing.assert_allclose(crop_resize(img, (20, 10, 40, 30), 32), 0.7, atol=1e-6)


def test_global_crop_is_centred_square():
    img = np.zeros((32, 64, 3), dtype=np.float32)
    img[:, 16:48] = 1.0
    np.testing.assert_allclose(make_global_crop(img, 32), 1.0, atol=1e-6)


# -- supervision -----------------------------------------------------------------
@pytest.fixture(scope="module")
def cache(small_world):
    return precompute_supervision(small_world["train"], small_world["teacher"])


def test_supervision_counts(small_world, cache):
    split = small_world["train"]
    n_pairs = 0
    for i in split.image_ids:
        h, w = split.images[i].shape[:2]
        m = len(enumerate_pairs(split.proposals[i], w, h))
        assert cache.d_u[i].shape == (m, 30)
        n_pairs += m
    # one image vector plus one vector per pair, nothing else
    assert cache.n_vectors == len(split.image_ids) + n_pairs
    for i in split.image_ids:
        np.testing.assert_allclose(cache.d_g[i].sum(), 1.0, atol=1e-5)
        if cache.d_u[i].shape[0]:
            np.testing.assert_allclose(cache.d_u[i].sum(-1), 1.0, atol=1e-5)


def test_cache_roundtrip(cache, tmp_path):
    cache.save(tmp_path / "sup")
    back = SupervisionCache.load(tmp_path / "sup")
    assert back.pair_hashes == cache.pair_hashes
    for i in cache.d_g:
        np.testing.assert_array_equal(back.d_g[i], cache.d_g[i])
        np.testing.assert_array_equal(back.d_u[i], cache.d_u[i])


def test_restricted_renormalises(cache):
    classes = class_subset(30, 5, seed=0)
    assert len(classes) == 5 and np.all(np.diff(classes) > 0)
    sub = cache.restricted(classes)
    i = next(iter(cache.d_g))
    ref = cache.d_g[i][classes] / cache.d_g[i][classes].sum()
    np.testing.assert_allclose(sub.d_g[i], ref, rtol=1e-5)
    assert np.array_equal(class_subset(30, None, 0), np.arange(30))


def test_stale_cache_is_detected(small_world, cache):
    bad = SupervisionCache(cache.d_g, cache.d_u, {i: "0" * 16 for i in cache.pair_hashes})
    with pytest.raises(PairMismatchError):
        prepare_features(small_world["train"], small_world["teacher"], cache=bad)


# -- losses -----------------------------------------------------------------------
def _toy(seed=0, n=4, m=(2, 0, 3)):
    r = np.random.default_rng(seed)
    b = len(m)
    offsets = np.concatenate([[0], np.cumsum(m)])
    d_g = softmax_np(r.normal(size=(b, n)))
    d_u = softmax_np(r.normal(size=(offsets[-1], n)))
    logits = [r.normal(size=(b, n)), r.normal(size=(offsets[-1], n)), r.normal(size=(offsets[-1], n))]
    return offsets, d_g, d_u, logits


def _reference(offsets, d_g, d_u, lg, lu, lho, route_u, route_ho):
    b = len(d_g)
    m = np.diff(offsets)
    L = {"g": kl_np(softmax_np(lg), d_g).mean()}
    for key, lo, route in (("u", lu, route_u), ("ho", lho, route_ho)):
        total = 0.0
        for i in range(b):
            if not m[i]:
                continue
            rows = slice(offsets[i], offsets[i + 1])
            if "u" in route:
                total += kl_np(softmax_np(lo[rows]), d_u[rows]).mean() / b
            if "g" in route:
                total += kl_np(softmax_np(lo[rows].max(0)), d_g[i]) / b
        L[key] = total
    return L


@pytest.mark.parametrize("route_u,route_ho", [("u", "g"), ("g", "u"), ("g+u", "g+u"), ("u", "u")])
def test_losses_match_reference(route_u, route_ho):
    offsets, d_g, d_u, (lg, lu, lho) = _toy()
    cfg = TrainConfig(routing_union=route_u, routing_ho=route_ho)
    out = BranchOutputs(Tensor(lg, dtype=np.float64), Tensor(lu, dtype=np.float64), Tensor(lho, dtype=np.float64), offsets)
    total, terms = compute_losses(out, d_g, d_u, cfg)
    ref = _reference(offsets, d_g, d_u, lg, lu, lho, route_u, route_ho)
    for k in ("g", "u", "ho"):
        assert float(terms[k].data) == pytest.approx(ref[k], rel=1e-6, abs=1e-9)
    assert float(total.data) == pytest.approx(sum(ref.values()), rel=1e-6)


def test_losses_vanish_at_teacher():
    offsets, d_g, d_u, _ = _toy(1, m=(1, 1))
    out = BranchOutputs(Tensor(np.log(d_g), dtype=np.float64), Tensor(np.log(d_u), dtype=np.float64),
                        Tensor(np.log(d_g), dtype=np.float64), offsets)
    # single pair per image: the bag max is the pair row itself
    total, _ = compute_losses(out, d_g, d_u, TrainConfig(routing_union="u", routing_ho="g"))
    assert abs(float(total.data)) < 1e-6


def test_losses_without_pairs():
    offsets, d_g, d_u, (lg, _, _) = _toy(2, m=(0, 0))
    # a batch without pairs has no pair logits at all
    out = BranchOutputs(Tensor(lg, dtype=np.float64), None, None, offsets)
    total, terms = compute_losses(out, d_g, d_u, TrainConfig())
    assert float(terms["u"].data) == 0.0 and float(terms["ho"].data) == 0.0
    assert float(total.data) == pytest.approx(kl_np(softmax_np(lg), d_g).mean())


def test_two_pair_loss_gradcheck():
    offsets, d_g, d_u, (lg, lu, lho) = _toy(3, m=(2,))
    leaves = [leaf64(lg), leaf64(lu), leaf64(lho)]
    cfg = TrainConfig(routing_union="g+u", routing_ho="g+u")

    def f():
        return compute_losses(BranchOutputs(*leaves, offsets), d_g, d_u, cfg)[0]

    assert gradcheck(f, leaves) < 1e-4


# -- config -----------------------------------------------------------------------
@pytest.mark.parametrize("bad", [
    {"variant": "nope"},
    {"routing_union": "x"},
    {"routing_global": "u"},
    {"decay_iter": 5000},
    {"dim": 30, "heads": 4},
    {"nprime": 0},
    {"loss_weights": {"g": 1.0}},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad).validate()


def test_config_unknown_key():
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"learning_rate": 1.0})
    cfg = TrainConfig(lr=0.5)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_training_free_variant_refuses_training(small_world, cache):
    with pytest.raises(ConfigError):
        train(small_world["train"], cache, small_world["teacher"], TrainConfig(variant=TF, total_iters=2, decay_iter=1))


# -- training -------------------------------------------------------------------------
def _cfg(**kw):
    base = dict(total_iters=6, decay_iter=3, batch_size=4, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_lr_keeps_parameters(small_world, cache):
    t = small_world["teacher"]
    res = train(small_world["train"], cache, t, _cfg(lr=0.0))
    from hoidistill.distill import build_student
    fresh = build_student(t, _cfg(lr=0.0))
    for k, v in fresh.state_dict().items():
        np.testing.assert_array_equal(res.net.state_dict()[k], v)


def test_training_is_deterministic_and_moves(small_world, cache, tmp_path):
    t = small_world["teacher"]
    a = train(small_world["train"], cache, t, _cfg())
    b = train(small_world["train"], cache, t, _cfg())
    assert a.curve == b.curve
    sa, sb = a.net.state_dict(), b.net.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    fresh = train(small_world["train"], cache, t, _cfg(lr=0.0)).net.state_dict()
    assert any(not np.array_equal(sa[k], fresh[k]) for k in sa)
    assert [row["lr"] for row in a.curve] == [1e-3] * 3 + [pytest.approx(1e-4)] * 3
    write_curve(tmp_path / "curve.csv", a.curve)
    assert (tmp_path / "curve.csv").read_text().startswith("iter,L_g,L_u,L_ho,total,lr")


def test_checkpoint_roundtrip(small_world, cache, tmp_path):
    t = small_world["teacher"]
    cfg = _cfg(total_iters=2, decay_iter=1)
    res = train(small_world["train"], cache, t, cfg)
    save_checkpoint(tmp_path / "ck", res.net, cfg)
    net, cfg2 = load_checkpoint(tmp_path / "ck", t)
    assert cfg2 == cfg
    test = small_world["test"]
    a = predict_student(res.net, test, t, cfg)
    b = predict_student(net, test, t, cfg2)
    assert [(d.image_id, d.hoi_id, d.score) for d in a] == [(d.image_id, d.hoi_id, d.score) for d in b]


@pytest.mark.parametrize("variant", [BASELINE, EARLY])
def test_other_variants_train(small_world, cache, variant):
    t = small_world["teacher"]
    cfg = _cfg(variant=variant, total_iters=2, decay_iter=1)
    res = train(small_world["train"], cache, t, cfg)
    if variant == BASELINE:
        assert all(row["L_g"] == 0.0 and row["L_u"] == 0.0 for row in res.curve)
    dets = predict_student(res.net, small_world["test"], t, cfg)
    assert dets and all(0.0 <= d.score <= 1.0 for d in dets)


def test_nprime_restricts_classes(small_world, cache):
    res = train(small_world["train"], cache, small_world["teacher"], _cfg(nprime=5, total_iters=2, decay_iter=1))
    assert len(res.classes) == 5


@pytest.mark.parametrize("variant", [TF, TFSTAR])
def test_training_free_predictions(small_world, variant):
    dets = predict_training_free(small_world["test"], small_world["teacher"], TrainConfig(variant=variant))
    assert dets
    assert all(np.isfinite(d.score) and 0.0 <= d.score <= 1.0 for d in dets)
