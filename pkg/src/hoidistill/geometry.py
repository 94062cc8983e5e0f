"""Pixel-space boxes, proposals and the 12-d human-object spatial code."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PERSON_CLASS = 1


class BoxError(ValueError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle in continuous pixel coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise BoxError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise BoxError(f"degenerate box {vals}")

    @classmethod
    def from_list(cls, xs):
        return cls(*(float(v) for v in xs))

    def to_list(self):
        return [self.x1, self.y1, self.x2, self.y2]

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    @property
    def center(self):
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def clamp(self, width, height):
        return Box(max(0.0, self.x1), max(0.0, self.y1), min(float(width), self.x2), min(float(height), self.y2))


@dataclass(frozen=True)
class Proposal:
    box: Box
    score: float
    class_id: int
    is_human: bool

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"proposal score {self.score} outside [0, 1]")
        if self.is_human and self.class_id != PERSON_CLASS:
            raise ValueError("human proposals must carry the person class")

    def to_json(self):
        return {"box": self.box.to_list(), "score": self.score, "class_id": self.class_id, "is_human": self.is_human}

    @classmethod
    def from_json(cls, d):
        return cls(Box.from_list(d["box"]), float(d["score"]), int(d["class_id"]), bool(d["is_human"]))


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def union_box(a: Box, b: Box) -> Box:
    return Box(min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2))


def spatial_encode(b_h: Box, b_o: Box, img_w, img_h) -> np.ndarray:
    """Position, size, offset and log-size-ratio cues for a pair.

    Layout: human (cx, cy, w, h)/image, object (cx, cy, w, h)/image,
    center offset / image, log(w_o / w_h), log(h_o / h_h).
    Boxes are clamped to the image first.
    """
    b_h = b_h.clamp(img_w, img_h)
    b_o = b_o.clamp(img_w, img_h)
    W, H = float(img_w), float(img_h)
    hx, hy = b_h.center
    ox, oy = b_o.center
    return np.array(
        [
            hx / W, hy / H, b_h.width / W, b_h.height / H,
            ox / W, oy / H, b_o.width / W, b_o.height / H,
            (ox - hx) / W, (oy - hy) / H,
            math.log(b_o.width / b_h.width), math.log(b_o.height / b_h.height),
        ],
        dtype=np.float64,
    )


def iou_matrix(a, b):
    """Pairwise IoU for (n, 4) and (m, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)
