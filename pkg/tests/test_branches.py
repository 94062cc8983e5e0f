import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hoidistill.branches import (
    BASELINE,
    EARLY,
    FULL,
    TF,
    TFSTAR,
    ScoreBundle,
    StudentNetwork,
    bag_and_normalize,
    enumerate_pairs,
    extract_features,
    fuse,
    global_scores,
    ho_scores,
    union_scores,
)
from hoidistill.distill import score_bundles
from hoidistill.encoder import FeatureMap, HOIEmbedding, embed_prompts
from hoidistill.geometry import Box, Proposal
from hoidistill.tensorcore import Tensor, gradcheck

D = 8


def make_fm(seed=0):
    g = np.random.default_rng(seed).standard_normal((8, 8, D)).astype(np.float32)
    return FeatureMap(g, 64, 64, 8)


def make_emb(n=5, seed=0):
    return embed_prompts([f"a person is doing thing{i}" for i in range(n)], dim=D, seed=seed)


def props():
    return [
        Proposal(Box(2, 2, 12, 20), 0.9, 1, True),
        Proposal(Box(30, 30, 40, 48), 0.7, 1, True),
        Proposal(Box(14, 4, 22, 12), 0.8, 3, False),
        Proposal(Box(44, 40, 52, 50), 0.6, 2, False),
    ]


@pytest.fixture()
def net():
    return StudentNetwork(dim=D, heads=2, seed=0)


def test_global_scores_sum_to_one(net):
    s = global_scores(net, make_fm(), make_emb()).data
    assert abs(float(s.sum()) - 1.0) <= 1e-6


def test_single_class_degenerate(net):
    s = global_scores(net, make_fm(), make_emb(n=1)).data
    np.testing.assert_allclose(s, [1.0], atol=1e-7)


def test_global_gradcheck(net):
    net.astype(np.float64)
    emb = make_emb()
    w = Tensor(np.arange(1.0, 6.0), dtype=np.float64)
    params = [net.global_pool.q_proj.weight, net.global_pool.k_proj.bias, net.global_pool.v_proj.weight,
              net.global_pool.out_proj.weight]
    assert gradcheck(lambda: (global_scores(net, make_fm(), emb) * w).sum(), params) < 1e-4


def test_union_scores(net):
    fm, emb = make_fm(), make_emb()
    pair = enumerate_pairs(props(), 64, 64)[0]
    s = union_scores(net, fm, pair, emb).data
    assert abs(float(s.sum()) - 1.0) <= 1e-6
    np.testing.assert_array_equal(s, union_scores(net, fm, pair, emb).data)
    # a union covering the image differs from the global view because pools are separate
    full = Proposal(Box(0, 0, 64, 64), 0.9, 1, True)
    obj = Proposal(Box(10, 10, 20, 20), 0.9, 2, False)
    whole = enumerate_pairs([full, obj], 64, 64)[0]
    assert whole.union == Box(0, 0, 64, 64)
    assert not np.allclose(union_scores(net, fm, whole, emb).data, global_scores(net, fm, emb).data)


def test_ho_scores_shape_and_asymmetry(net):
    fm, emb = make_fm(), make_emb()
    pair = enumerate_pairs(props(), 64, 64)[0]
    s = ho_scores(net, fm, pair, emb).data
    assert s.shape == (5,)
    flipped = enumerate_pairs(
        [Proposal(pair.object.box, 0.9, 1, True), Proposal(pair.human.box, 0.9, 2, False)], 64, 64)[0]
    assert not np.allclose(s, ho_scores(net, fm, flipped, emb).data)


def test_ho_gradcheck(net):
    net.astype(np.float64)
    fm, emb = make_fm(), make_emb()
    pair = enumerate_pairs(props(), 64, 64)[0]
    w = Tensor(np.linspace(-1, 1, 5), dtype=np.float64)
    params = [net.ho_fc1.weight, net.ho_fc2.bias, net.spatial_proj.weight, net.ho_pool.v_proj.weight]
    assert gradcheck(lambda: (ho_scores(net, fm, pair, emb) * w).sum(), params) < 1e-4


def test_early_fusion_needs_union_vector():
    net = StudentNetwork(dim=D, heads=2, seed=0, early_fusion=True)
    pair = enumerate_pairs(props(), 64, 64)[0]
    with pytest.raises(ValueError):
        ho_scores(net, make_fm(), pair, make_emb())
    assert net.ho_fc1.weight.shape[0] == 3 * D + 64


def test_enumerate_pairs():
    pairs = enumerate_pairs(props(), 64, 64)
    assert len(pairs) == 4
    keys = [p.human.score * p.object.score for p in pairs]
    assert keys == sorted(keys, reverse=True)
    assert all(p.human.is_human and not p.object.is_human for p in pairs)
    assert len(enumerate_pairs(props(), 64, 64, cap=3)) == 3
    assert enumerate_pairs(props()[:2], 64, 64) == []


# -- bagging ---------------------------------------------------------------------
def test_bag_single_pair():
    s = np.array([[0.3, -1.2, 2.0]])
    s_hat, s_bar, p = bag_and_normalize(s)
    np.testing.assert_allclose(s_bar.data, 1.0)
    np.testing.assert_allclose(p.data, 1 / (1 + np.exp(-s)), rtol=1e-6)


def test_bag_identical_rows():
    _, s_bar, _ = bag_and_normalize(np.array([[1.0, 2.0], [1.0, 2.0]]))
    np.testing.assert_allclose(s_bar.data, 0.5)


def test_bag_recompute():
    s = np.random.default_rng(0).standard_normal((3, 4))
    s_hat, s_bar, p = bag_and_normalize(Tensor(s, dtype=np.float64))
    np.testing.assert_allclose(s_hat.data, s.max(axis=0))
    e = np.exp(s - s.max(axis=0))
    np.testing.assert_allclose(s_bar.data, e / e.sum(axis=0), atol=1e-12)
    np.testing.assert_allclose(p.data, s_bar.data / (1 + np.exp(-s.max(axis=0))), atol=1e-12)


def test_bag_empty():
    with pytest.raises(ValueError):
        bag_and_normalize(np.zeros((0, 3)))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 5)), elements=st.floats(-20, 20)))
def test_bag_invariants_and_equivariance(s):
    s_hat, s_bar, p = bag_and_normalize(Tensor(s, dtype=np.float64))
    b = ScoreBundle(np.full(s.shape[1], 1.0 / s.shape[1]), np.full(s.shape, 1.0 / s.shape[1]), s, s_hat.data,
                    s_bar.data, p.data)
    assert b.check()
    perm = np.random.default_rng(0).permutation(s.shape[0])
    _, s_bar2, p2 = bag_and_normalize(Tensor(s[perm], dtype=np.float64))
    np.testing.assert_allclose(s_bar2.data, s_bar.data[perm], atol=1e-12)
    np.testing.assert_allclose(p2.data, p.data[perm], atol=1e-12)


def test_bundle_check_catches_violations():
    s = np.array([[1.0, 0.0], [0.0, 1.0]])
    s_hat, s_bar, p = (t.data for t in bag_and_normalize(Tensor(s, dtype=np.float64)))
    good = ScoreBundle(np.array([0.5, 0.5]), np.full((2, 2), 0.5), s, s_hat, s_bar, p)
    assert good.check()
    with pytest.raises(AssertionError):
        ScoreBundle(np.array([0.6, 0.5]), good.s_u, s, s_hat, s_bar, p).check()
    with pytest.raises(AssertionError):
        ScoreBundle(good.s_g, good.s_u, s, s_hat + 0.1, s_bar, p).check()


# -- fusion ------------------------------------------------------------------------
def test_fuse_examples():
    ones = np.ones(3)
    np.testing.assert_allclose(fuse(ones, ones, ones, 1.0, 1.0, gamma=7.3), 1.0)
    np.testing.assert_allclose(fuse(ones, ones, ones, 0.5, 0.5, gamma=2.0), 0.0625)
    with pytest.raises(ValueError):
        fuse(ones, ones, ones, 1.0, 1.0, variant="nope")
    with pytest.raises(ValueError):
        fuse(ones, ones, ones, 1.0, 1.0, gamma=-1)


def test_fuse_variants():
    r = np.random.default_rng(0)
    s_g, s_u, p, d_g, d_u = (r.random(4) for _ in range(5))
    det = (0.9 * 0.8) ** 2.8
    np.testing.assert_allclose(fuse(s_g, s_u, p, 0.9, 0.8), s_g * s_u * p * det)
    np.testing.assert_allclose(fuse(s_g, s_u, p, 0.9, 0.8, variant=BASELINE), p * det)
    np.testing.assert_allclose(fuse(s_g, s_u, p, 0.9, 0.8, variant=EARLY), s_g * p * det)
    np.testing.assert_allclose(fuse(None, None, None, 0.9, 0.8, variant=TF, d_u=d_u), d_u * det)
    np.testing.assert_allclose(fuse(None, None, None, 0.9, 0.8, variant=TFSTAR, d_g=d_g, d_u=d_u), d_g * d_u * det)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(0.01, 1.0)), st.integers(0, 3), st.integers(0, 2),
       st.floats(0.0, 0.5), st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_fuse_monotone(f, which, k, bump, s_h, s_o):
    base = fuse(f[0], f[1], f[2], s_h, s_o)
    g = f.copy()
    if which < 3:
        g[which, k] += bump
        out = fuse(g[0], g[1], g[2], s_h, s_o)
    else:
        out = fuse(g[0], g[1], g[2], min(1.0, s_h + bump), s_o)
    assert np.all(out >= base - 1e-15)


def test_full_vs_baseline_uniform_is_rescaling():
    r = np.random.default_rng(1)
    n, m = 5, 6
    p = r.random((m, n))
    dets = r.uniform(0.6, 1.0, (m, 2))
    u = np.full(n, 1.0 / n)
    full = np.stack([fuse(u, u, p[i], *dets[i]) for i in range(m)])
    base = np.stack([fuse(u, u, p[i], *dets[i], variant=BASELINE) for i in range(m)])
    np.testing.assert_allclose(full, base / n**2, rtol=1e-12)
    assert np.array_equal(np.argsort(full, axis=0), np.argsort(base, axis=0))


def test_detections_invariant_to_pair_order(net):
    fm, emb = make_fm(), make_emb()

    def scored(ps):
        pairs = enumerate_pairs(ps, 64, 64)
        feats = extract_features(fm, 0, pairs)
        b = score_bundles(net, [feats], emb)[0]
        b.check(tol=1e-5)
        rows = [fuse(b.s_g, b.s_u[m], b.p_ho[m], p.human.score, p.object.score) for m, p in enumerate(pairs)]
        return sorted((tuple(p.human.box.to_list() + p.object.box.to_list()), tuple(np.round(r, 6)))
                      for p, r in zip(pairs, rows))

    ps = props()
    assert scored(ps) == scored(ps[::-1])
