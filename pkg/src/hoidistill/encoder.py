"""Visual trunk, ROI-Align, attention pooling, prompt embedding and the teacher.

The trunk is a fixed random convolutional stack (three 3x3 stride-2 stages
and a 1x1 lift to D channels). It is frozen and shared bit-for-bit between
teacher and student, so everything it produces is a constant with respect
to training and is computed in plain numpy.
"""
from __future__ import annotations

import hashlib
import math
import re
import zlib
from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, BoxError
from .tensorcore import (
    Linear,
    Module,
    Parameter,
    Tensor,
    l2_normalize,
    matmul,
    mean,
    multi_head_attention,
    load_archive,
    read_manifest,
    reshape,
    save_archive,
)

STRIDE = 8
POOL_SIZE = 7
MIN_IMAGE_EDGE = 16
STUDENT_MIN_EDGE = 128  # student input is upscaled to at least this edge
TRUNK_CHANNELS = (32, 64, 64)


class ImageTooSmallError(ValueError):
    pass


# -- trunk ---------------------------------------------------------------
def _conv3x3_s2(x, w, b):
    """3x3 stride-2 convolution with edge-replicate padding.

    x: (H, W, Cin), w: (3, 3, Cin, Cout) -> (ceil(H/2), ceil(W/2), Cout)
    Edge padding keeps a constant image constant everywhere.
    """
    h, wd, _ = x.shape
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)), mode="edge")
    ho, wo = (h + 1) // 2, (wd + 1) // 2
    out = np.zeros((ho, wo, w.shape[-1]), dtype=np.float32)
    for dy in range(3):
        for dx in range(3):
            tap = xp[dy : dy + 2 * ho : 2, dx : dx + 2 * wo : 2, :]
            out += tap @ w[dy, dx]
    return out + b


class Trunk(Module):
    def __init__(self, dim=32, seed=0, upsample=False):
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.upsample = bool(upsample)
        cin = 3
        for i, cout in enumerate(TRUNK_CHANNELS):
            std = math.sqrt(2.0 / (9 * cin))
            setattr(self, f"conv{i}_w", Parameter(rng.normal(0, std, (3, 3, cin, cout)), name=f"conv{i}_w", frozen=True))
            setattr(self, f"conv{i}_b", Parameter(rng.normal(0, 0.05, cout), name=f"conv{i}_b", frozen=True))
            cin = cout
        self.lift_w = Parameter(rng.normal(0, math.sqrt(1.0 / cin), (cin, dim)), name="lift_w", frozen=True)
        self.lift_b = Parameter(np.zeros(dim), name="lift_b", frozen=True)

    @property
    def stride(self):
        return STRIDE // 2 if self.upsample else STRIDE

    def __call__(self, image):
        # centre [0, 1] pixels so random filters respond to colour, not brightness
        x = (np.asarray(image, dtype=np.float32) - 0.5) * 2.0
        for i in range(len(TRUNK_CHANNELS)):
            x = np.maximum(_conv3x3_s2(x, getattr(self, f"conv{i}_w").data, getattr(self, f"conv{i}_b").data), 0.0)
        x = x @ self.lift_w.data + self.lift_b.data
        if self.upsample:
            x = _upsample2x(x)
        return x.astype(np.float32)

    def weight_hash(self):
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _interp_matrix(coords, size):
    """Rows of bilinear weights over ``size`` cells centred at k + 0.5."""
    c = np.clip(np.asarray(coords, dtype=np.float64) - 0.5, 0.0, size - 1)
    lo = np.floor(c).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = c - lo
    m = np.zeros(c.shape + (size,), dtype=np.float64)
    np.put_along_axis(m, lo[..., None], (1.0 - frac)[..., None], axis=-1)
    # hi == lo at the border; add instead of overwrite
    extra = np.zeros_like(m)
    np.put_along_axis(extra, hi[..., None], frac[..., None], axis=-1)
    return m + extra


def _upsample2x(grid):
    h, w, _ = grid.shape
    ay = _interp_matrix((np.arange(2 * h) + 0.5) / 2.0, h)
    ax = _interp_matrix((np.arange(2 * w) + 0.5) / 2.0, w)
    return separable_resample(ay, ax, grid).astype(np.float32)


@dataclass
class FeatureMap:
    grid: np.ndarray
    image_w: int
    image_h: int
    stride: float = STRIDE

    @property
    def full_box(self):
        return Box(0.0, 0.0, float(self.image_w), float(self.image_h))


def resize_region(image, box, out_h, out_w):
    """Bilinear resample of ``box`` (pixel corners) onto an ``out_h x out_w`` grid."""
    image = np.asarray(image, dtype=np.float32)
    h, w, _ = image.shape
    x1, y1, x2, y2 = box
    xs = x1 + (np.arange(out_w) + 0.5) * ((x2 - x1) / out_w)
    ys = y1 + (np.arange(out_h) + 0.5) * ((y2 - y1) / out_h)
    return separable_resample(_interp_matrix(ys, h), _interp_matrix(xs, w), image).astype(np.float32)


def encode_image(trunk: Trunk, image, min_edge=None) -> FeatureMap:
    """Stride-8 feature map of ``image``.

    With ``min_edge`` the image is first upscaled (aspect kept) so its short
    side is at least ``min_edge``; the map's stride stays in original pixels.
    """
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (h, w, 3) image, got {image.shape}")
    h, w, _ = image.shape
    if h < MIN_IMAGE_EDGE or w < MIN_IMAGE_EDGE:
        raise ImageTooSmallError(f"image {h}x{w} is below the {MIN_IMAGE_EDGE}px minimum")
    scale = 1.0
    if min_edge and min(h, w) < min_edge:
        scale = min_edge / min(h, w)
        image = resize_region(image, (0.0, 0.0, float(w), float(h)), round(h * scale), round(w * scale))
    return FeatureMap(trunk(image), image_w=w, image_h=h, stride=trunk.stride / scale)


# -- ROI-Align -------------------------------------------------------------
def roi_align_many(fm: FeatureMap, boxes, size=POOL_SIZE, samples=2) -> np.ndarray:
    """Pool every box in ``boxes`` ((R, 4) pixel corners) to (R, size, size, D).

    Each output cell averages ``samples x samples`` bilinear taps. Bilinear
    sampling is separable, so the averaged taps collapse to one weight matrix
    per axis.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(boxes[:, 0], 0, fm.image_w)
    y1 = np.clip(boxes[:, 1], 0, fm.image_h)
    x2 = np.clip(boxes[:, 2], 0, fm.image_w)
    y2 = np.clip(boxes[:, 3], 0, fm.image_h)
    if np.any(x2 <= x1) or np.any(y2 <= y1):
        raise BoxError("zero-area box after clamping to the image")
    s = float(fm.stride)
    H, W = fm.grid.shape[:2]
    offs = (np.arange(size)[:, None] + (np.arange(samples)[None, :] + 0.5) / samples).reshape(-1)
    xs = x1[:, None] / s + offs[None, :] * ((x2 - x1) / s / size)[:, None]
    ys = y1[:, None] / s + offs[None, :] * ((y2 - y1) / s / size)[:, None]
    px = _interp_matrix(xs, W).reshape(len(boxes), size, samples, W).mean(axis=2)
    py = _interp_matrix(ys, H).reshape(len(boxes), size, samples, H).mean(axis=2)
    return separable_resample(py, px, fm.grid).astype(np.float32)


def separable_resample(py, px, grid):
    """out[r, i, j] = sum_ab py[r, i, a] px[r, j, b] grid[a, b] (leading r optional)."""
    h, w, d = grid.shape
    rows = py @ grid.astype(np.float64).reshape(h, w * d)  # (..., I, W*D)
    rows = rows.reshape(rows.shape[:-1] + (w, d))
    return px[..., None, :, :] @ rows


def roi_align(fm: FeatureMap, box: Box) -> Tensor:
    return Tensor(roi_align_many(fm, [box.to_list()])[0])


# -- attention pooling -----------------------------------------------------
class AttentionPool(Module):
    """Query from the mean cell, keys/values from every cell, multi-head attention."""

    def __init__(self, dim, heads=4, seed=0, name="pool"):
        rng = np.random.default_rng(seed)
        self.heads = heads
        self.q_proj = Linear(dim, dim, rng, name=f"{name}.q")
        self.k_proj = Linear(dim, dim, rng, name=f"{name}.k")
        self.v_proj = Linear(dim, dim, rng, name=f"{name}.v")
        self.out_proj = Linear(dim, dim, rng, name=f"{name}.out")

    def __call__(self, patch):
        """(..., 7, 7, D) or (..., L, D) -> (..., D)"""
        x = patch if isinstance(patch, Tensor) else Tensor(patch)
        if x.ndim >= 3 and x.shape[-2] == x.shape[-3] == POOL_SIZE:
            x = reshape(x, x.shape[:-3] + (POOL_SIZE * POOL_SIZE, x.shape[-1]))
        q = self.q_proj(mean(x, axis=-2, keepdims=True))
        out = multi_head_attention(q, self.k_proj(x), self.v_proj(x), self.heads, self.out_proj)
        return reshape(out, out.shape[:-2] + (out.shape[-1],))


def attention_pool(pool: AttentionPool, patch) -> Tensor:
    return pool(patch)


# -- prompts and text embedding --------------------------------------------
IRREGULAR_ING = {
    "ride": "riding",
    "make": "making",
    "see": "seeing",
    "sit": "sitting",
    "run": "running",
    "swim": "swimming",
    "cut": "cutting",
    "hit": "hitting",
    "put": "putting",
    "get": "getting",
    "set": "setting",
    "lie": "lying",
    "tie": "tying",
    "dye": "dyeing",
    "be": "being",
}
NO_INTERACTION = "no_interaction"
_TOKEN = re.compile(r"^[a-z][a-z_]*$")


def _ing(verb):
    if verb in IRREGULAR_ING:
        return IRREGULAR_ING[verb]
    if verb.endswith("e") and not verb.endswith("ee") and len(verb) > 2:
        return verb[:-1] + "ing"
    return verb + "ing"


def build_prompt(verb, obj):
    for tok in (verb, obj):
        if not tok or not _TOKEN.match(tok):
            raise ValueError(f"bad label token {tok!r}")
    obj_words = obj.replace("_", " ")
    if verb == NO_INTERACTION:
        return f"a person and {obj_words}"
    head, *rest = verb.split("_")
    verb_words = " ".join([_ing(head), *rest])
    return f"a person is {verb_words} {obj_words}"


def build_prompts(labels):
    return [build_prompt(v, o) for v, o in labels]


@dataclass
class HOIEmbedding:
    matrix: np.ndarray  # (N, D), unit rows
    labels: list = field(default_factory=list)

    @property
    def n(self):
        return self.matrix.shape[0]

    def subset(self, idx):
        idx = list(idx)
        return HOIEmbedding(self.matrix[idx].copy(), [self.labels[i] for i in idx] if self.labels else [])


N_BUCKETS = 2048


def trigram_counts(text, buckets=N_BUCKETS):
    padded = f" {text} "
    counts = np.zeros(buckets, dtype=np.float64)
    for i in range(len(padded) - 2):
        counts[zlib.crc32(padded[i : i + 3].encode()) % buckets] += 1.0
    return counts


def embed_prompts(prompts, dim=32, seed=0, labels=None) -> HOIEmbedding:
    """Hashed character trigrams -> seeded Gaussian projection -> unit rows."""
    if len(prompts) < 1:
        raise ValueError("need at least one prompt")
    proj = np.random.default_rng(seed).standard_normal((N_BUCKETS, dim))
    counts = np.stack([trigram_counts(p) for p in prompts])
    emb = counts @ proj
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return HOIEmbedding(emb.astype(np.float32), list(labels) if labels is not None else [])


def class_logits(v, embedding, temperature=0.07, normalize=True):
    """``(W_T x v) / temperature`` for v of shape (..., D)."""
    if normalize:
        v = l2_normalize(v, axis=-1)
    w = Tensor(np.ascontiguousarray(embedding.matrix.T))
    return matmul(v, w) * (1.0 / temperature)


# -- teacher ----------------------------------------------------------------
TEACHER_RESOLUTION = 32


class TeacherModel(Module):
    """Frozen trunk + attention pool + HOI embedding, scoring square crops."""

    def __init__(self, trunk, pool, embedding, resolution=TEACHER_RESOLUTION, temperature=0.07, normalize=True):
        self.trunk = trunk
        self.pool = pool
        self.embedding = embedding
        self.resolution = resolution
        self.temperature = temperature
        self.normalize = normalize

    def patches(self, crops):
        crops = np.asarray(crops, dtype=np.float32)
        if crops.ndim == 3:
            crops = crops[None]
        r = self.resolution
        if crops.shape[1:] != (r, r, 3):
            raise ValueError(f"teacher expects {r}x{r}x3 crops, got {crops.shape[1:]}")
        out = []
        for crop in crops:
            fm = encode_image(self.trunk, crop)
            out.append(roi_align_many(fm, [fm.full_box.to_list()])[0])
        return np.stack(out)

    def logits_from_patches(self, patches, embedding=None):
        emb = embedding if embedding is not None else self.embedding
        return class_logits(self.pool(Tensor(patches)), emb, self.temperature, self.normalize)

    def score_patches(self, patches, embedding=None):
        logits = self.logits_from_patches(patches, embedding).data.astype(np.float64)
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)

    def score(self, crops, embedding=None):
        return self.score_patches(self.patches(crops), embedding)


def teacher_score(teacher: TeacherModel, crop) -> np.ndarray:
    """Probability vector over the teacher's HOI classes for one crop."""
    return teacher.score(np.asarray(crop)[None])[0]


def save_teacher(path, teacher: TeacherModel):
    tensors = {f"trunk.{k}": v for k, v in teacher.trunk.state_dict().items()}
    tensors.update({f"pool.{k}": v for k, v in teacher.pool.state_dict().items()})
    tensors["embedding"] = teacher.embedding.matrix
    extra = {
        "labels": [list(l) for l in teacher.embedding.labels],
        "dim": teacher.trunk.dim,
        "heads": teacher.pool.heads,
        "upsample": teacher.trunk.upsample,
        "resolution": teacher.resolution,
        "temperature": teacher.temperature,
        "normalize": teacher.normalize,
        "trunk_hash": teacher.trunk.weight_hash(),
    }
    return save_archive(path, tensors, extra)


def load_teacher(path) -> TeacherModel:
    _, extra = read_manifest(path)
    arrays = load_archive(path)
    trunk = Trunk(extra["dim"], upsample=extra["upsample"])
    trunk.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("trunk.")})
    trunk.freeze()
    if trunk.weight_hash() != extra["trunk_hash"]:
        raise ValueError(f"trunk weights in {path} do not match their recorded hash")
    pool = AttentionPool(extra["dim"], extra["heads"], name="teacher_pool")
    pool.load_state_dict({k[5:]: v for k, v in arrays.items() if k.startswith("pool.")})
    pool.freeze()
    emb = HOIEmbedding(arrays["embedding"], [tuple(l) for l in extra["labels"]])
    return TeacherModel(trunk, pool, emb, extra["resolution"], extra["temperature"], extra["normalize"])
