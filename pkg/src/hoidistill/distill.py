"""Teacher supervision, the three-term distillation objective and training."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .branches import (
    BASELINE,
    DEFAULT_GAMMA,
    EARLY,
    FULL,
    MAX_PAIRS,
    TF,
    TFSTAR,
    VARIANTS,
    ScoreBundle,
    StudentNetwork,
    enumerate_pairs,
    extract_features,
    fuse,
    pair_hash,
)
from .encoder import STUDENT_MIN_EDGE, TEACHER_RESOLUTION, TeacherModel, encode_image, resize_region
from .evaluator import Detection
from .geometry import Box, BoxError
from .tensorcore import (
    AdamW,
    NonFiniteError,
    Tensor,
    add,
    getitem,
    kl_divergence,
    load_archive,
    max_,
    mul,
    read_manifest,
    save_archive,
    softmax,
    sum_,
)

log = logging.getLogger(__name__)

ROUTES = ("g", "u", "g+u")


class ConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


class PairMismatchError(RuntimeError):
    pass


# -- crops -------------------------------------------------------------------
def crop_resize(image, box, size):
    """Bilinear resample of ``box`` (pixel corners) to ``size x size``; aspect is not kept."""
    return resize_region(image, box, size, size)


def make_global_crop(image, size=TEACHER_RESOLUTION):
    h, w = np.asarray(image).shape[:2]
    side = min(h, w)
    x0, y0 = (w - side) / 2.0, (h - side) / 2.0
    return crop_resize(image, (x0, y0, x0 + side, y0 + side), size)


def make_union_crop(image, b_u: Box, size=TEACHER_RESOLUTION):
    h, w = np.asarray(image).shape[:2]
    x1, y1 = max(0.0, b_u.x1), max(0.0, b_u.y1)
    x2, y2 = min(float(w), b_u.x2), min(float(h), b_u.y2)
    if x2 <= x1 or y2 <= y1:
        raise BoxError("union box has zero area inside the image")
    return crop_resize(image, (x1, y1, x2, y2), size)


# -- supervision cache -------------------------------------------------------
@dataclass
class SupervisionCache:
    d_g: dict  # image_id -> (N,)
    d_u: dict  # image_id -> (M, N)
    pair_hashes: dict  # image_id -> str

    @property
    def n_vectors(self):
        return sum(1 + self.d_u[i].shape[0] for i in self.d_g)

    def save(self, path):
        tensors = {}
        for i in self.d_g:
            tensors[f"img{i:06d}/d_g"] = self.d_g[i]
            if self.d_u[i].shape[0]:
                tensors[f"img{i:06d}/d_u"] = self.d_u[i]
        n = next(iter(self.d_g.values())).shape[0]
        extra = {"pair_hashes": {str(i): h for i, h in self.pair_hashes.items()}, "n_classes": n,
                 "pair_counts": {str(i): int(self.d_u[i].shape[0]) for i in self.d_g}}
        return save_archive(path, tensors, extra=extra)

    @classmethod
    def load(cls, path):
        arrays = load_archive(path)
        _, extra = read_manifest(path)
        n = extra["n_classes"]
        d_g, d_u, hashes = {}, {}, {}
        for key, h in extra["pair_hashes"].items():
            i = int(key)
            d_g[i] = arrays[f"img{i:06d}/d_g"]
            d_u[i] = arrays.get(f"img{i:06d}/d_u", np.zeros((0, n), dtype=np.float32))
            hashes[i] = h
        return cls(d_g, d_u, hashes)

    def restricted(self, classes):
        """Teacher distributions over a class subset (softmax over the subset)."""
        classes = np.asarray(classes)

        def renorm(x):
            x = x[..., classes].astype(np.float64)
            return (x / x.sum(axis=-1, keepdims=True)).astype(np.float32)

        return SupervisionCache(
            {i: renorm(v) for i, v in self.d_g.items()},
            {i: renorm(v) if v.shape[0] else v[:, classes] for i, v in self.d_u.items()},
            dict(self.pair_hashes),
        )


def precompute_supervision(split, teacher: TeacherModel, max_pairs=MAX_PAIRS) -> SupervisionCache:
    """One d_g per image, one d_u per enumerated pair."""
    d_g, d_u, hashes = {}, {}, {}
    for i in split.image_ids:
        img = split.images[i]
        h, w = img.shape[:2]
        pairs = enumerate_pairs(split.proposals[i], w, h, max_pairs)
        crops = [make_global_crop(img, teacher.resolution)]
        crops += [make_union_crop(img, p.union, teacher.resolution) for p in pairs]
        probs = teacher.score(np.stack(crops))
        d_g[i] = probs[0]
        d_u[i] = probs[1:].reshape(len(pairs), -1)
        hashes[i] = pair_hash(pairs)
    return SupervisionCache(d_g, d_u, hashes)


# -- config --------------------------------------------------------------------
@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    total_iters: int = 2000
    decay_iter: int = 1000
    gamma: float = DEFAULT_GAMMA
    dim: int = 32
    heads: int = 4
    seed: int = 0
    variant: str = FULL
    routing_global: str = "g"
    routing_union: str = "u"
    routing_ho: str = "g"
    nprime: int | None = None
    subset_seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    temperature: float = 0.07
    normalize: bool = True
    max_pairs: int = MAX_PAIRS
    student_min_edge: int = STUDENT_MIN_EDGE
    loss_weights: dict = field(default_factory=lambda: {"g": 1.0, "u": 1.0, "ho": 1.0})
    kl_teacher_first: bool = False

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if not 0 <= self.decay_iter < self.total_iters:
            raise ConfigError("decay_iter must lie in [0, total_iters)")
        for name in ("routing_global", "routing_union", "routing_ho"):
            if getattr(self, name) not in ROUTES:
                raise ConfigError(f"{name} must be one of {ROUTES}")
        if self.routing_global != "g":
            raise ConfigError("the global branch is supervised by d_g only")
        if self.dim % self.heads:
            raise ConfigError("dim must be divisible by heads")
        if self.batch_size < 1 or self.lr < 0 or self.gamma < 0:
            raise ConfigError("batch_size >= 1, lr >= 0 and gamma >= 0 required")
        if self.nprime is not None and self.nprime < 1:
            raise ConfigError("nprime must be positive")
        if set(self.loss_weights) != {"g", "u", "ho"}:
            raise ConfigError("loss_weights needs exactly the keys g, u, ho")
        return self

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    def to_dict(self):
        return asdict(self)

    @property
    def uses_global(self):
        return self.variant in (FULL, EARLY)

    @property
    def uses_union_scores(self):
        return self.variant == FULL

    @property
    def trainable(self):
        return self.variant in (FULL, BASELINE, EARLY)


def class_subset(n, nprime, seed):
    if nprime is None or nprime >= n:
        return np.arange(n)
    return np.sort(np.random.default_rng(seed).choice(n, size=nprime, replace=False))


# -- losses ----------------------------------------------------------------------
def _kl(s, d, teacher_first=False):
    return kl_divergence(d, s) if teacher_first else kl_divergence(s, d)


def _mil_max(logits, offsets, has_pairs):
    """Per-image column max over that image's pair rows -> (B', N)."""
    counts = np.diff(offsets)[has_pairs]
    starts = offsets[:-1][has_pairs]
    width = int(counts.max())
    idx = starts[:, None] + np.minimum(np.arange(width)[None, :], counts[:, None] - 1)
    # padded slots repeat the last real row, which cannot change the max
    s_hat, _ = max_(getitem(logits, (idx,)), axis=1)
    return s_hat


def compute_losses(out, d_g, d_u, config: TrainConfig):
    """Batch-mean loss terms.

    d_g: (B, N) teacher image distributions; d_u: (sum M, N) teacher union
    distributions in the same row order as the pair logits.
    """
    b = d_g.shape[0]
    offsets = out.offsets
    m = np.diff(offsets)
    has_pairs = m > 0
    tf = config.kl_teacher_first
    dt = np.float32
    zero = Tensor(np.zeros((), dtype=dt))
    terms = {"g": zero, "u": zero, "ho": zero}

    if out.global_logits is not None:
        terms["g"] = mul(sum_(_kl(softmax(out.global_logits), Tensor(d_g), tf)), 1.0 / b)

    row_w = None
    if has_pairs.any():
        per_row = np.repeat(1.0 / np.where(has_pairs, m, 1), m) / b
        row_w = Tensor(per_row.astype(dt))
        d_g_bag = Tensor(d_g[has_pairs])

    def per_pair(logits):
        return sum_(mul(_kl(softmax(logits), Tensor(d_u), tf), row_w))

    def bagged(logits):
        return mul(sum_(_kl(softmax(_mil_max(logits, offsets, has_pairs)), d_g_bag, tf)), 1.0 / b)

    for key, logits, route in (("u", out.union_logits, config.routing_union), ("ho", out.ho_logits, config.routing_ho)):
        if logits is None or row_w is None:
            continue
        term = zero
        if "u" in route:
            term = add(term, per_pair(logits))
        if "g" in route:
            term = add(term, bagged(logits))
        terms[key] = term

    total = zero
    for key in ("g", "u", "ho"):
        total = add(total, mul(terms[key], config.loss_weights[key]))
    return total, terms


# -- training ----------------------------------------------------------------------
def prepare_features(split, teacher, max_pairs=MAX_PAIRS, cache=None, min_edge=STUDENT_MIN_EDGE):
    """Frozen-trunk patches for every image; checks pair order against ``cache``."""
    feats = {}
    for i in split.image_ids:
        img = split.images[i]
        h, w = img.shape[:2]
        pairs = enumerate_pairs(split.proposals[i], w, h, max_pairs)
        if cache is not None and cache.pair_hashes.get(i) != pair_hash(pairs):
            raise PairMismatchError(f"image {i}: pairs differ from the supervision cache")
        feats[i] = extract_features(encode_image(teacher.trunk, img, min_edge), i, pairs)
    return feats


@dataclass
class TrainResult:
    net: StudentNetwork
    curve: list  # dict rows: iter, L_g, L_u, L_ho, total, lr
    classes: np.ndarray


def build_student(teacher: TeacherModel, config: TrainConfig):
    return StudentNetwork(
        dim=config.dim,
        heads=config.heads,
        seed=int(np.random.default_rng([config.seed, 11]).integers(2**31)),
        temperature=config.temperature,
        normalize=config.normalize,
        early_fusion=config.variant == EARLY,
        init_pool_state=teacher.pool.state_dict(),
    )


def train(split, cache: SupervisionCache, teacher: TeacherModel, config: TrainConfig, feats=None) -> TrainResult:
    """AdamW over the student branches; lr drops 10x at ``decay_iter``.

    Only images, proposals and teacher distributions are consumed here.
    """
    config.validate()
    if not config.trainable:
        raise ConfigError(f"variant {config.variant!r} has nothing to train")
    n = teacher.embedding.n
    classes = class_subset(n, config.nprime, config.subset_seed)
    emb = teacher.embedding.subset(classes)
    sup = cache.restricted(classes) if len(classes) < n else cache
    feats = feats if feats is not None else prepare_features(split, teacher, config.max_pairs, cache, config.student_min_edge)

    net = build_student(teacher, config)
    params = net.branch_parameters(config.uses_global, config.uses_union_scores)
    opt = AdamW(params, lr=config.lr, betas=(config.beta1, config.beta2), eps=config.eps, weight_decay=config.weight_decay)

    ids = list(split.image_ids)
    rng = np.random.default_rng([config.seed, 3])
    queue = []
    curve = []
    for it in range(config.total_iters):
        if it == config.decay_iter:
            opt.state.lr = config.lr * 0.1
        batch = []
        while len(batch) < min(config.batch_size, len(ids)):
            if not queue:
                queue = list(rng.permutation(ids))
            batch.append(int(queue.pop()))
        bf = [feats[i] for i in batch]
        out = net.forward(bf, emb, use_global=config.uses_global, use_union=config.uses_union_scores)
        d_g = np.stack([sup.d_g[i] for i in batch])
        rows = [sup.d_u[i] for i in batch if sup.d_u[i].shape[0]]
        d_u = np.concatenate(rows) if rows else np.zeros((0, len(classes)), dtype=np.float32)
        try:
            total, terms = compute_losses(out, d_g, d_u, config)
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"iteration {it}: non-finite loss ({exc})") from exc
        for key, t in terms.items():
            if not np.isfinite(t.data):
                raise TrainingDivergedError(f"iteration {it}: loss term L_{key} is not finite")
        curve.append({"iter": it, "L_g": float(terms["g"].data), "L_u": float(terms["u"].data),
                      "L_ho": float(terms["ho"].data), "total": float(total.data), "lr": opt.state.lr})
        if total.requires_grad:
            total.backward()
        for p in params:
            if p.grad is None:  # branch unreachable from this batch
                p.grad = np.zeros_like(p.data)
        opt.step()
        if it % 250 == 0:
            log.info("iter %d total %.4f", it, curve[-1]["total"])
    return TrainResult(net, curve, classes)


def write_curve(path, curve):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iter", "L_g", "L_u", "L_ho", "total", "lr"])
        w.writeheader()
        for row in curve:
            w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})


# -- inference ------------------------------------------------------------------------
def _np_softmax(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def score_bundles(net: StudentNetwork, feats, emb, variant=FULL):
    """Per-image ScoreBundles (numpy) for a list of ImageFeatures."""
    use_global = variant in (FULL, EARLY)
    out = net.forward(feats, emb, use_global=use_global, use_union=variant == FULL)
    bundles = []
    n = emb.n
    for b, f in enumerate(feats):
        lo, hi = out.offsets[b], out.offsets[b + 1]
        s_g = _np_softmax(out.global_logits.data[b]) if out.global_logits is not None else np.full(n, 1.0 / n)
        if f.m:
            s_ho = out.ho_logits.data[lo:hi].astype(np.float64)
            s_u = _np_softmax(out.union_logits.data[lo:hi]) if out.union_logits is not None else np.full((f.m, n), 1.0 / n)
            s_hat = s_ho.max(axis=0)
            s_bar = _np_softmax(s_ho, axis=0)
            p_ho = s_bar / (1.0 + np.exp(-s_hat))
        else:
            s_ho = s_u = s_bar = p_ho = np.zeros((0, n))
            s_hat = np.zeros(n)
        bundles.append(ScoreBundle(s_g, s_u, s_ho, s_hat, s_bar, p_ho))
    return bundles


def detections_from_scores(image_id, pairs, scores, class_ids=None):
    """Every (pair, class) entry becomes a detection; ``class_ids`` are 1-based."""
    dets = []
    n = scores.shape[1] if scores.ndim == 2 else 0
    class_ids = class_ids if class_ids is not None else np.arange(1, n + 1)
    for m, p in enumerate(pairs):
        for c in range(n):
            dets.append(Detection(image_id, p.human.box, p.object.box, int(class_ids[c]), float(scores[m, c])))
    return dets


def predict_student(net, split, teacher, config: TrainConfig, feats=None, batch=32):
    """Detections for every pair and class, fused per ``config.variant``."""
    feats = feats if feats is not None else prepare_features(split, teacher, config.max_pairs, min_edge=config.student_min_edge)
    emb = teacher.embedding
    dets = []
    ids = list(split.image_ids)
    for k in range(0, len(ids), batch):
        chunk = [feats[i] for i in ids[k : k + batch]]
        for f, bundle in zip(chunk, score_bundles(net, chunk, emb, config.variant)):
            if not f.m:
                continue
            scores = np.stack([
                fuse(bundle.s_g, bundle.s_u[m], bundle.p_ho[m], p.human.score, p.object.score, config.gamma, config.variant)
                for m, p in enumerate(f.pairs)
            ])
            dets += detections_from_scores(f.image_id, f.pairs, scores)
    return dets


def predict_training_free(split, teacher, config: TrainConfig, cache=None):
    """TF / TF*: teacher union (and image) scores times detector confidence."""
    cache = cache if cache is not None else precompute_supervision(split, teacher, config.max_pairs)
    dets = []
    for i in split.image_ids:
        img = split.images[i]
        pairs = enumerate_pairs(split.proposals[i], img.shape[1], img.shape[0], config.max_pairs)
        if not pairs:
            continue
        scores = np.stack([
            fuse(None, None, None, p.human.score, p.object.score, config.gamma, config.variant,
                 d_g=cache.d_g[i].astype(np.float64), d_u=cache.d_u[i][m].astype(np.float64))
            for m, p in enumerate(pairs)
        ])
        dets += detections_from_scores(i, pairs, scores)
    return dets


def save_checkpoint(path, net: StudentNetwork, config: TrainConfig):
    return save_archive(path, net.state_dict(), extra={"config": config.to_dict()})


def load_checkpoint(path, teacher):
    _, extra = read_manifest(path)
    config = TrainConfig.from_dict(extra["config"])
    net = build_student(teacher, config)
    net.load_state_dict(load_archive(path))
    return net, config
