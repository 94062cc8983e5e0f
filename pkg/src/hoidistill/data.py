"""On-disk dataset layout and label-space JSON.

    <root>/labels.json
    <root>/<split>/images/        tensor archive, one (h, w, 3) entry per image
    <root>/<split>/proposals.json detector output
    <root>/<split>/gt.json        ground truth (never read by student training)
    <root>/<split>/scenes.json    generator scene records
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box, Proposal
from .tensorcore import load_archive, save_archive


class MissingInputError(FileNotFoundError):
    """A pipeline stage input does not exist."""


def image_key(image_id):
    return f"img{int(image_id):06d}"


@dataclass
class LabelSpace:
    verbs: list
    objects: list
    hois: list  # dicts: id, verb, object, train_count

    @property
    def n(self):
        return len(self.hois)

    @property
    def pairs(self):
        return [(h["verb"], h["object"]) for h in self.hois]

    def train_counts(self):
        return np.array([h.get("train_count", 0) for h in self.hois], dtype=int)

    def to_json(self):
        return {"verbs": list(self.verbs), "objects": list(self.objects), "hois": [dict(h) for h in self.hois]}

    @classmethod
    def from_json(cls, doc):
        hois = sorted(doc["hois"], key=lambda h: h["id"])
        ids = [h["id"] for h in hois]
        if ids != list(range(1, len(hois) + 1)):
            raise ValueError("hoi ids must be 1..N without gaps")
        return cls(list(doc["verbs"]), list(doc["objects"]), hois)

    @classmethod
    def full_grid(cls, verbs, objects):
        hois = []
        for v in verbs:
            for o in objects:
                hois.append({"id": len(hois) + 1, "verb": v, "object": o, "train_count": 0})
        return cls(list(verbs), list(objects), hois)


def read_json(path):
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"missing file {path}")
    return json.loads(path.read_text())


def write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_labels(root) -> LabelSpace:
    return LabelSpace.from_json(read_json(Path(root) / "labels.json"))


@dataclass
class GtInstance:
    image_id: int
    human_box: Box
    object_box: Box
    hoi_id: int


@dataclass
class Split:
    """Images and proposals of one split; ``gt`` stays None unless asked for."""

    image_ids: list
    images: dict  # image_id -> (h, w, 3) float32
    proposals: dict  # image_id -> list[Proposal]
    sizes: dict = field(default_factory=dict)  # image_id -> (w, h)
    gt: list | None = None


def proposals_to_json(proposals):
    return {
        "images": [
            {"image_id": int(i), "proposals": [p.to_json() for p in props]} for i, props in sorted(proposals.items())
        ]
    }


def proposals_from_json(doc):
    return {int(e["image_id"]): [Proposal.from_json(p) for p in e["proposals"]] for e in doc["images"]}


def gt_from_json(doc):
    return [
        GtInstance(int(d["image_id"]), Box.from_list(d["human"]), Box.from_list(d["object"]), int(d["hoi_id"]))
        for d in doc["instances"]
    ]


def gt_to_json(images, instances):
    return {
        "images": [{"id": int(i), "w": int(w), "h": int(h)} for i, (w, h) in sorted(images.items())],
        "instances": [
            {"image_id": g.image_id, "human": g.human_box.to_list(), "object": g.object_box.to_list(), "hoi_id": g.hoi_id}
            for g in instances
        ],
    }


def save_split(root, name, images, proposals, gt=None, scenes=None):
    d = Path(root) / name
    save_archive(d / "images", {image_key(i): img for i, img in images.items()})
    write_json(d / "proposals.json", proposals_to_json(proposals))
    if gt is not None:
        sizes = {i: (img.shape[1], img.shape[0]) for i, img in images.items()}
        write_json(d / "gt.json", gt_to_json(sizes, gt))
    if scenes is not None:
        write_json(d / "scenes.json", scenes)


def load_split(root, name, with_gt=False) -> Split:
    d = Path(root) / name
    if not (d / "images" / "manifest.json").exists():
        raise MissingInputError(f"no images for split {name!r} under {root}; run synth-gen first")
    arrays = load_archive(d / "images")
    images = {int(k[3:]): v for k, v in arrays.items()}
    proposals = proposals_from_json(read_json(d / "proposals.json"))
    ids = sorted(images)
    sizes = {i: (images[i].shape[1], images[i].shape[0]) for i in ids}
    gt = gt_from_json(read_json(d / "gt.json")) if with_gt else None
    return Split(ids, images, {i: proposals.get(i, []) for i in ids}, sizes, gt)
