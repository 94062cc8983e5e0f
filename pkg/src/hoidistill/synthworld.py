"""Procedural HOI scenes, a detector stub and teacher pretraining.

Every interaction is a person glyph, an object glyph placed in one of six
60-degree direction sectors around the person (the sector is the verb), and
a short "contact" bar between them drawn in the verb's colour. Object class
is carried by the object's colour. Labels are therefore recoverable both
from geometry (sector) and from appearance (bar/object colour). The
backdrop leans toward the colour of the scene's dominant object, a stand-in
for scene context that only the whole-image view can exploit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import GtInstance, LabelSpace, load_labels, load_split, save_split, write_json
from .distill import make_global_crop, make_union_crop
from .encoder import TEACHER_RESOLUTION
from .geometry import PERSON_CLASS, Box, Proposal, union_box

VERBS = ("hold", "ride", "carry", "kick", "throw", "lift")
OBJECTS = ("ball", "bicycle", "cup", "kite", "skateboard")

PERSON_RGB = (0.92, 0.86, 0.74)
OBJECT_RGB = (
    (0.95, 0.12, 0.10),
    (0.10, 0.80, 0.20),
    (0.15, 0.25, 0.95),
    (0.95, 0.90, 0.10),
    (0.85, 0.10, 0.85),
)
VERB_RGB = (
    (0.05, 0.95, 0.95),
    (1.00, 0.55, 0.00),
    (0.05, 0.05, 0.05),
    (0.55, 0.30, 0.10),
    (1.00, 1.00, 1.00),
    (0.40, 0.60, 1.00),
)
SECTOR_DEG = 60.0
ANGLE_JITTER_DEG = 12.0
BAR_HALF = 3.0  # contact bar half-thickness, px
OBJECT_SIZE = (6.0, 9.0)
CONTEXT_MIX = 0.25  # backdrop pull toward the dominant object's colour
BACKGROUND = 0.30
P_SINGLE = 0.8  # share of scenes with one interaction (rest have two)


def default_label_space(n_verbs=6, n_objects=5):
    return LabelSpace.full_grid(VERBS[:n_verbs], OBJECTS[:n_objects])


@dataclass
class Entity:
    class_id: int  # 1 = person, 2.. = objects
    box: Box
    appearance_seed: int = 0


@dataclass
class SceneSpec:
    width: int
    height: int
    entities: list = field(default_factory=list)
    interactions: list = field(default_factory=list)  # (human_idx, object_idx, hoi_id)
    bars: list = field(default_factory=list)  # (x1, y1, x2, y2, verb_idx) contact bars
    backdrop: tuple = (BACKGROUND, BACKGROUND, BACKGROUND)

    def to_json(self):
        return {
            "width": self.width,
            "height": self.height,
            "entities": [{"class_id": e.class_id, "box": e.box.to_list(), "appearance_seed": e.appearance_seed} for e in self.entities],
            "interactions": [list(t) for t in self.interactions],
            "bars": [list(b) for b in self.bars],
            "backdrop": [float(c) for c in self.backdrop],
        }

    @classmethod
    def from_json(cls, d):
        ents = [Entity(e["class_id"], Box.from_list(e["box"]), e["appearance_seed"]) for e in d["entities"]]
        return cls(d["width"], d["height"], ents, [tuple(t) for t in d["interactions"]], [tuple(b) for b in d["bars"]],
                   tuple(d.get("backdrop", (BACKGROUND,) * 3)))


# -- rule table --------------------------------------------------------------
class RuleTable:
    """Maps (verb, object) to the predicate that generates / recognises it.

    verb v  <=>  direction from person centre to object centre lies in the
                 sector centred at v * 60 degrees (image y axis points down)
    object  <=>  object glyph class
    """

    def __init__(self, label_space: LabelSpace):
        self.labels = label_space
        self.verb_index = {v: i for i, v in enumerate(label_space.verbs)}
        self.object_index = {o: i for i, o in enumerate(label_space.objects)}
        self._id = {(h["verb"], h["object"]): h["id"] for h in label_space.hois}

    def hoi_id(self, verb_idx, obj_idx):
        return self._id[(self.labels.verbs[verb_idx], self.labels.objects[obj_idx])]

    def decompose(self, hoi_id):
        h = self.labels.hois[hoi_id - 1]
        return self.verb_index[h["verb"]], self.object_index[h["object"]]

    @staticmethod
    def sector(h_box: Box, o_box: Box, n_sectors):
        hx, hy = h_box.center
        ox, oy = o_box.center
        ang = math.degrees(math.atan2(oy - hy, ox - hx)) % 360.0
        return int(round(ang / SECTOR_DEG)) % n_sectors

    def derive(self, h_box: Box, o_box: Box, object_class_id):
        verb = self.sector(h_box, o_box, len(self.labels.verbs))
        return self.hoi_id(verb, object_class_id - 2)


# -- rendering ---------------------------------------------------------------
def _paint(img, box, rgb, rng=None, texture=0.0):
    x1, y1 = int(round(box[0])), int(round(box[1]))
    x2, y2 = int(round(box[2])), int(round(box[3]))
    patch = np.broadcast_to(np.asarray(rgb, dtype=np.float32), (max(y2 - y1, 0), max(x2 - x1, 0), 3))
    if texture and rng is not None and patch.size:
        patch = patch + rng.normal(0.0, texture, patch.shape).astype(np.float32)
    img[y1:y2, x1:x2] = patch


def _ray_exit(w, h, dx, dy):
    """Distance from a w x h box centre to its border along unit (dx, dy)."""
    tx = (w / 2) / abs(dx) if abs(dx) > 1e-9 else math.inf
    ty = (h / 2) / abs(dy) if abs(dy) > 1e-9 else math.inf
    return min(tx, ty)


def _overlaps(a, b, margin):
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0] or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _inside(b, w, h, margin=1.0):
    return b[0] >= margin and b[1] >= margin and b[2] <= w - margin and b[3] <= h - margin


def _snap(b):
    return [float(round(v)) for v in b]


def _place_interaction(rng, w, h, verb_idx, n_verbs):
    hw, hh = rng.uniform(7, 9), rng.uniform(13, 17)
    ow = oh = rng.uniform(*OBJECT_SIZE)
    ang = math.radians(verb_idx * (360.0 / n_verbs) + rng.uniform(-ANGLE_JITTER_DEG, ANGLE_JITTER_DEG))
    dx, dy = math.cos(ang), math.sin(ang)
    gap = rng.uniform(3.0, 5.0)
    r = _ray_exit(hw, hh, dx, dy) + _ray_exit(ow, oh, dx, dy) + gap
    hx = rng.uniform(hw / 2 + 1, w - hw / 2 - 1)
    hy = rng.uniform(hh / 2 + 1, h - hh / 2 - 1)
    ox, oy = hx + r * dx, hy + r * dy
    hbox = _snap([hx - hw / 2, hy - hh / 2, hx + hw / 2, hy + hh / 2])
    obox = _snap([ox - ow / 2, oy - oh / 2, ox + ow / 2, oy + oh / 2])
    # contact bar centre points between the two glyph borders
    th, to = _ray_exit(hw, hh, dx, dy), r - _ray_exit(ow, oh, dx, dy)
    pts = [(hx + t * dx, hy + t * dy) for t in np.linspace(th, to, 6)]
    return hbox, obox, pts


def render_scene(scene: SceneSpec, rng) -> np.ndarray:
    img = np.broadcast_to(np.asarray(scene.backdrop, dtype=np.float32), (scene.height, scene.width, 3)).copy()
    img += rng.normal(0.0, 0.04, img.shape).astype(np.float32)
    tint = rng.uniform(-0.05, 0.05, 3).astype(np.float32)
    img += tint
    for x1, y1, x2, y2, verb in scene.bars:
        _paint(img, (x1, y1, x2, y2), VERB_RGB[verb])
    for e in scene.entities:
        erng = np.random.default_rng(e.appearance_seed)
        rgb = PERSON_RGB if e.class_id == PERSON_CLASS else OBJECT_RGB[(e.class_id - 2) % len(OBJECT_RGB)]
        _paint(img, e.box.to_list(), rgb, erng, texture=0.03)
        if e.class_id == PERSON_CLASS:
            # head marker: darker top band
            b = e.box
            _paint(img, (b.x1 + 1, b.y1, b.x2 - 1, b.y1 + 3), (0.55, 0.40, 0.30))
    return np.clip(img, 0.0, 1.0)


def sample_scene(rng, labels: LabelSpace, rules: RuleTable, class_sampler, width=64, height=64, forced_hoi=None):
    n_verbs = len(labels.verbs)
    n_objects = len(labels.objects)
    for _ in range(200):
        scene = SceneSpec(width, height)
        occupied = []  # all painted rectangles for overlap tests
        n_inter = 1 if rng.random() < P_SINGLE else 2
        for k in range(n_inter):
            hoi = forced_hoi if (k == 0 and forced_hoi is not None) else class_sampler(rng)
            verb, obj = rules.decompose(hoi)
            for _try in range(40):
                hbox, obox, pts = _place_interaction(rng, width, height, verb, n_verbs)
                if not (_inside(hbox, width, height) and _inside(obox, width, height)):
                    continue
                bars = [_snap([px - BAR_HALF, py - BAR_HALF, px + BAR_HALF, py + BAR_HALF]) for px, py in pts]
                hull = [min(b[0] for b in bars), min(b[1] for b in bars), max(b[2] for b in bars), max(b[3] for b in bars)]
                rects = [hbox, obox, hull]
                if any(_overlaps(r, o, 2.0) for r in rects for o in occupied):
                    continue
                if any(b[2] <= b[0] or b[3] <= b[1] for b in bars):
                    continue
                occupied.extend(rects)
                hi = len(scene.entities)
                scene.entities.append(Entity(PERSON_CLASS, Box(*hbox), int(rng.integers(2**31))))
                scene.entities.append(Entity(obj + 2, Box(*obox), int(rng.integers(2**31))))
                scene.interactions.append((hi, hi + 1, hoi))
                scene.bars.extend((*b, verb) for b in bars)
                break
        if not scene.interactions:
            continue
        # scene context: the backdrop leans toward the dominant interaction's object colour
        hi, oi, _ = max(scene.interactions,
                        key=lambda t: union_box(scene.entities[t[0]].box, scene.entities[t[1]].box).area)
        obj_rgb = np.asarray(OBJECT_RGB[(scene.entities[oi].class_id - 2) % len(OBJECT_RGB)])
        scene.backdrop = tuple(float(v) for v in (1 - CONTEXT_MIX) * BACKGROUND + CONTEXT_MIX * obj_rgb)
        # idle distractors
        n_idle_h = int(rng.random() < 0.3)
        n_idle_o = int(rng.choice(3, p=[0.5, 0.3, 0.2]))
        for cls in [PERSON_CLASS] * n_idle_h + [None] * n_idle_o:
            cid = cls if cls is not None else int(rng.integers(n_objects)) + 2
            for _try in range(20):
                if cid == PERSON_CLASS:
                    bw, bh = rng.uniform(7, 9), rng.uniform(13, 17)
                else:
                    bw = bh = rng.uniform(*OBJECT_SIZE)
                x, y = rng.uniform(1, width - bw - 1), rng.uniform(1, height - bh - 1)
                b = _snap([x, y, x + bw, y + bh])
                if any(_overlaps(b, o, 3.0) for o in occupied):
                    continue
                occupied.append(b)
                scene.entities.append(Entity(cid, Box(*b), int(rng.integers(2**31))))
                break
        return scene
    raise RuntimeError("could not place a scene")


def zipf_weights(n, exponent=1.2):
    w = 1.0 / np.arange(1, n + 1) ** exponent
    return w / w.sum()


# -- detector stub ---------------------------------------------------------
def detector_stub(scene: SceneSpec, seed, jitter=0.1, fp_rate=0.5, cap=20, n_objects=5):
    """Jittered ground-truth boxes plus random background false positives."""
    rng = np.random.default_rng(seed)
    out = []
    for e in scene.entities:
        b = e.box
        bw, bh = b.width, b.height
        d = rng.uniform(-jitter, jitter, 4) * np.array([bw, bh, bw, bh])
        out.append(_proposal(rng, [b.x1 + d[0], b.y1 + d[1], b.x2 + d[2], b.y2 + d[3]], e.class_id, scene))
    for _ in range(int(rng.poisson(fp_rate))):
        is_h = rng.random() < 0.5
        bw = rng.uniform(7, 9) if is_h else rng.uniform(*OBJECT_SIZE)
        bh = rng.uniform(13, 17) if is_h else bw
        x, y = rng.uniform(0, scene.width - bw), rng.uniform(0, scene.height - bh)
        cid = PERSON_CLASS if is_h else int(rng.integers(n_objects)) + 2
        out.append(_proposal(rng, [x, y, x + bw, y + bh], cid, scene))
    out.sort(key=lambda p: -p.score)
    return out[:cap]


def _proposal(rng, xyxy, class_id, scene):
    x1, y1, x2, y2 = xyxy
    x1, y1 = max(0.0, x1), max(0.0, y1)
    x2, y2 = min(float(scene.width), x2), min(float(scene.height), y2)
    # never emit degenerate boxes
    x2, y2 = max(x2, x1 + 1.0), max(y2, y1 + 1.0)
    score = float(rng.uniform(0.6, 1.0))
    return Proposal(Box(float(x1), float(y1), float(x2), float(y2)), score, int(class_id), class_id == PERSON_CLASS)


# -- dataset generation ------------------------------------------------------
SPLIT_CODE = {"train": 1, "test": 2}


def generate_split(seed, split, n_images, labels, rules, zipf_exponent=1.2, width=64, height=64,
                   detector_kwargs=None, force_coverage=False):
    detector_kwargs = detector_kwargs or {}
    n = labels.n
    order = np.random.default_rng([seed, 99]).permutation(n) + 1  # class rank -> hoi id
    probs = zipf_weights(n, zipf_exponent)

    def sampler(rng):
        return int(order[rng.choice(n, p=probs)])

    images, proposals, gts, scenes = {}, {}, [], []
    for image_id in range(n_images):
        rng = np.random.default_rng([seed, SPLIT_CODE[split], image_id])
        forced = int(order[image_id]) if force_coverage and image_id < n else None
        scene = sample_scene(rng, labels, rules, sampler, width, height, forced_hoi=forced)
        images[image_id] = render_scene(scene, rng)
        proposals[image_id] = detector_stub(
            scene, [seed, SPLIT_CODE[split], image_id, 7], n_objects=len(labels.objects), **detector_kwargs
        )
        for hi, oi, hoi in scene.interactions:
            gts.append(GtInstance(image_id, scene.entities[hi].box, scene.entities[oi].box, hoi))
        scenes.append({"image_id": image_id, **scene.to_json()})
    return images, proposals, gts, scenes


def generate_dataset(root, seed=0, n_train=600, n_test=200, label_space=None, zipf_exponent=1.2,
                     width=64, height=64, detector_kwargs=None):
    """Write a full train/test dataset under ``root``; returns the label space."""
    labels = label_space or default_label_space()
    rules = RuleTable(labels)
    counts = np.zeros(labels.n, dtype=int)
    for split, n_img in (("train", n_train), ("test", n_test)):
        images, props, gts, scenes = generate_split(
            seed, split, n_img, labels, rules, zipf_exponent, width, height, detector_kwargs,
            force_coverage=(split == "train" and n_img >= labels.n),
        )
        if split == "train":
            for g in gts:
                counts[g.hoi_id - 1] += 1
        save_split(root, split, images, props, gt=gts, scenes={"scenes": scenes})
    hois = [dict(h, train_count=int(c)) for h, c in zip(labels.hois, counts)]
    labels = LabelSpace(labels.verbs, labels.objects, hois)
    write_json(f"{root}/labels.json", labels.to_json())
    return labels


# -- teacher pretraining -----------------------------------------------------
def labeled_crops(split, resolution=TEACHER_RESOLUTION):
    """Centre crops labelled by the image's dominant HOI and GT union crops.

    The dominant HOI is the one whose union box is largest. Returns
    (crops, 0-based labels, kind) with kind 0 = global, 1 = union.
    """
    by_image = {}
    for g in split.gt:
        by_image.setdefault(g.image_id, []).append(g)
    crops, labels, kind = [], [], []
    for i in split.image_ids:
        gts = by_image.get(i, [])
        if not gts:
            continue
        img = split.images[i]
        dom = max(gts, key=lambda g: union_box(g.human_box, g.object_box).area)
        crops.append(make_global_crop(img, resolution))
        labels.append(dom.hoi_id - 1)
        kind.append(0)
        for g in gts:
            crops.append(make_union_crop(img, union_box(g.human_box, g.object_box), resolution))
            labels.append(g.hoi_id - 1)
            kind.append(1)
    return np.stack(crops), np.array(labels), np.array(kind)


def pretrain_teacher(root, epochs=60, seed=0, dim=32, heads=4, **kwargs):
    """Fit a CropTeacher on labelled train crops; report held-out accuracy.

    Returns ``(estimator, accuracy_report)``. The student never sees these
    labels; they only shape the teacher.
    """
    from .estimators import CropTeacher

    labels = load_labels(root)
    train_split = load_split(root, "train", with_gt=True)
    test_split = load_split(root, "test", with_gt=True)
    X, y, _ = labeled_crops(train_split)
    est = CropTeacher(labels=labels.pairs, dim=dim, heads=heads, epochs=epochs, seed=seed,
                      trunk_seed=seed, text_seed=seed, **kwargs).fit(X, y)
    Xt, yt, kt = labeled_crops(test_split)
    pred = est.predict(Xt)
    report = {
        "top1": float(np.mean(pred == yt)),
        "top1_global": float(np.mean(pred[kt == 0] == yt[kt == 0])),
        "top1_union": float(np.mean(pred[kt == 1] == yt[kt == 1])),
        "train_top1": float(np.mean(est.predict(X) == y)),
        "n_heldout": int(len(yt)),
    }
    return est, report
