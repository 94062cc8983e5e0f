"""Student scoring branches, pair bagging/normalisation and late fusion."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .encoder import AttentionPool, FeatureMap, HOIEmbedding, class_logits, roi_align_many
from .geometry import Box, Proposal, spatial_encode, union_box
from .tensorcore import (
    Linear,
    Module,
    Tensor,
    concatenate,
    getitem,
    max_,
    relu,
    sigmoid,
    softmax,
)

DEFAULT_GAMMA = 2.8
MAX_PAIRS = 64
SPATIAL_DIM = 64

FULL, BASELINE, TF, TFSTAR, EARLY = "full", "baseline", "tf", "tfstar", "early"
VARIANTS = (FULL, BASELINE, TF, TFSTAR, EARLY)


@dataclass(frozen=True)
class PairCandidate:
    human: Proposal
    object: Proposal
    union: Box
    spatial: np.ndarray

    def __post_init__(self):
        if not self.human.is_human:
            raise ValueError("pair human must be a human proposal")


def enumerate_pairs(proposals, img_w, img_h, cap=MAX_PAIRS):
    """All human x non-human proposal pairs, best ``cap`` by s_h * s_o."""
    humans = [p for p in proposals if p.is_human]
    objects = [p for p in proposals if not p.is_human]
    pairs = [(h, o) for h in humans for o in objects if h is not o]
    order = sorted(range(len(pairs)), key=lambda i: -(pairs[i][0].score * pairs[i][1].score))
    out = []
    for i in order[:cap]:
        h, o = pairs[i]
        out.append(PairCandidate(h, o, union_box(h.box, o.box), spatial_encode(h.box, o.box, img_w, img_h)))
    return out


def pair_hash(pairs):
    h = hashlib.sha256()
    for p in pairs:
        h.update(np.asarray(p.human.box.to_list() + p.object.box.to_list(), dtype="<f8").tobytes())
    return h.hexdigest()[:16]


@dataclass
class ImageFeatures:
    """Everything the trainable branches need from one image.

    Patches come from the frozen trunk, so they are constants for training.
    """

    image_id: int
    global_patch: np.ndarray  # (49, D)
    union_patches: np.ndarray  # (M, 49, D)
    human_patches: np.ndarray
    object_patches: np.ndarray
    spatial: np.ndarray  # (M, 12)
    pairs: list

    @property
    def m(self):
        return len(self.pairs)


def extract_features(fm: FeatureMap, image_id, pairs) -> ImageFeatures:
    d = fm.grid.shape[-1]
    boxes = [fm.full_box.to_list()]
    for p in pairs:
        boxes += [p.union.to_list(), p.human.box.to_list(), p.object.box.to_list()]
    patches = roi_align_many(fm, boxes).reshape(len(boxes), 49, d)
    rest = patches[1:].reshape(len(pairs), 3, 49, d)
    return ImageFeatures(
        image_id,
        patches[0],
        rest[:, 0],
        rest[:, 1],
        rest[:, 2],
        np.array([p.spatial for p in pairs], dtype=np.float32).reshape(len(pairs), 12),
        pairs,
    )


@dataclass
class BranchOutputs:
    """Logits for a batch of images; pair rows are concatenated image by image."""

    global_logits: Tensor | None  # (B, N)
    union_logits: Tensor | None  # (sum M, N)
    ho_logits: Tensor | None  # (sum M, N)
    offsets: np.ndarray  # (B + 1,) pair row offsets


class StudentNetwork(Module):
    """Global, union and human-object branches over a frozen feature map."""

    def __init__(self, dim=32, heads=4, seed=0, temperature=0.07, normalize=True, early_fusion=False,
                 init_pool_state=None):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.temperature = temperature
        self.normalize = normalize
        self.early_fusion = early_fusion
        self.global_pool = AttentionPool(dim, heads, seed=int(rng.integers(2**31)), name="global_pool")
        self.union_pool = AttentionPool(dim, heads, seed=int(rng.integers(2**31)), name="union_pool")
        self.ho_pool = AttentionPool(dim, heads, seed=int(rng.integers(2**31)), name="ho_pool")
        if init_pool_state is not None:
            for pool in (self.global_pool, self.union_pool, self.ho_pool):
                pool.load_state_dict(init_pool_state)
        self.spatial_proj = Linear(12, SPATIAL_DIM, rng, name="spatial_proj")
        d_in = 2 * dim + SPATIAL_DIM + (dim if early_fusion else 0)
        self.ho_fc1 = Linear(d_in, 2 * dim, rng, name="ho_fc1")
        self.ho_fc2 = Linear(2 * dim, dim, rng, name="ho_fc2")

    def branch_parameters(self, use_global, use_union_scores):
        params = []
        if use_global:
            params += self.global_pool.parameters()
        if use_union_scores or self.early_fusion:
            params += self.union_pool.parameters()
        params += self.ho_pool.parameters() + self.spatial_proj.parameters()
        params += self.ho_fc1.parameters() + self.ho_fc2.parameters()
        return params

    def _logits(self, v, emb):
        return class_logits(v, emb, self.temperature, self.normalize)

    def ho_vector(self, human_patches, object_patches, spatial, v_u=None):
        v_h = self.ho_pool(Tensor(human_patches))
        v_o = self.ho_pool(Tensor(object_patches))
        parts = [v_h, v_o, self.spatial_proj(Tensor(spatial))]
        if self.early_fusion:
            if v_u is None:
                raise ValueError("early fusion needs the union vector")
            parts.append(v_u)
        return self.ho_fc2(relu(self.ho_fc1(concatenate(parts, axis=-1))))

    def forward(self, feats, emb: HOIEmbedding, use_global=True, use_union=True, use_ho=True) -> BranchOutputs:
        offsets = np.concatenate([[0], np.cumsum([f.m for f in feats])]).astype(int)
        g = u = ho = None
        if use_global:
            g = self._logits(self.global_pool(Tensor(np.stack([f.global_patch for f in feats]))), emb)
        if offsets[-1] > 0:
            with_pairs = [f for f in feats if f.m]
            need_vu = use_union or (use_ho and self.early_fusion)
            v_u = self.union_pool(Tensor(np.concatenate([f.union_patches for f in with_pairs]))) if need_vu else None
            if use_union:
                u = self._logits(v_u, emb)
            if use_ho:
                v_ho = self.ho_vector(
                    np.concatenate([f.human_patches for f in with_pairs]),
                    np.concatenate([f.object_patches for f in with_pairs]),
                    np.concatenate([f.spatial for f in with_pairs]),
                    v_u,
                )
                ho = self._logits(v_ho, emb)
        return BranchOutputs(g, u, ho, offsets)

    # single-image views, used by tests and the scoring API
    def global_scores(self, fm: FeatureMap, emb):
        patch = roi_align_many(fm, [fm.full_box.to_list()]).reshape(1, 49, -1)
        return softmax(self._logits(self.global_pool(Tensor(patch)), emb), axis=-1)[0]

    def union_scores(self, fm: FeatureMap, pair: PairCandidate, emb):
        patch = roi_align_many(fm, [pair.union.to_list()]).reshape(1, 49, -1)
        return softmax(self._logits(self.union_pool(Tensor(patch)), emb), axis=-1)[0]

    def ho_scores(self, fm: FeatureMap, pair: PairCandidate, emb, v_u=None):
        p = roi_align_many(fm, [pair.human.box.to_list(), pair.object.box.to_list()]).reshape(2, 1, 49, -1)
        v = self.ho_vector(p[0], p[1], pair.spatial[None].astype(np.float32), v_u)
        return self._logits(v, emb)[0]


def global_scores(net, fm, emb):
    return net.global_scores(fm, emb)


def union_scores(net, fm, pair, emb):
    return net.union_scores(fm, pair, emb)


def ho_scores(net, fm, pair, emb):
    return net.ho_scores(fm, pair, emb)


def bag_and_normalize(s_ho):
    """Column max over pairs, pair-axis softmax, and sigmoid(max) * softmax.

    Works on a Tensor or array of shape (M, N); returns Tensors.
    """
    s = s_ho if isinstance(s_ho, Tensor) else Tensor(np.asarray(s_ho))
    if s.ndim != 2 or s.shape[0] == 0:
        raise ValueError("empty bag: image has no pairs")
    s_hat, _ = max_(s, axis=0)
    s_bar = softmax(s, axis=0)
    p_ho = s_bar * sigmoid(s_hat)
    return s_hat, s_bar, p_ho


@dataclass
class ScoreBundle:
    s_g: np.ndarray  # (N,)
    s_u: np.ndarray  # (M, N)
    s_ho: np.ndarray  # (M, N) raw
    s_hat: np.ndarray  # (N,)
    s_bar: np.ndarray  # (M, N)
    p_ho: np.ndarray  # (M, N)

    @property
    def m(self):
        return self.s_ho.shape[0]

    def check(self, tol=1e-6):
        """Raise AssertionError if any bundle invariant is violated."""
        assert abs(float(self.s_g.sum()) - 1.0) <= tol, "s_g does not sum to 1"
        if self.m:
            assert np.all(np.abs(self.s_u.sum(axis=1) - 1.0) <= tol), "s_u rows do not sum to 1"
            assert np.all(np.abs(self.s_bar.sum(axis=0) - 1.0) <= tol), "pair softmax columns do not sum to 1"
            assert np.array_equal(self.s_hat, self.s_ho.max(axis=0)), "s_hat is not the column max"
            expect = 1.0 / (1.0 + np.exp(-self.s_hat.astype(np.float64))) * self.s_bar
            assert np.allclose(self.p_ho, expect, rtol=1e-5, atol=1e-7), "p_ho mismatch"
        return True


def fuse(s_g, s_u, p_ho_row, s_h, s_o, gamma=DEFAULT_GAMMA, variant=FULL, d_g=None, d_u=None):
    """Final per-class interaction score of one pair.

    full: s_g * s_u * p_ho * det;  baseline: p_ho * det;  tf: d_u * det;
    tfstar: d_g * d_u * det;  early: s_g * p_ho * det  (union enters F_ho)
    with det = (s_h * s_o) ** gamma.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    det = (float(s_h) * float(s_o)) ** gamma
    if variant == FULL:
        return np.asarray(s_g) * np.asarray(s_u) * np.asarray(p_ho_row) * det
    if variant == BASELINE:
        return np.asarray(p_ho_row) * det
    if variant == TF:
        return np.asarray(d_u) * det
    if variant == TFSTAR:
        return np.asarray(d_g) * np.asarray(d_u) * det
    if variant == EARLY:
        return np.asarray(s_g) * np.asarray(p_ho_row) * det
    raise ValueError(f"unknown variant {variant!r}")
