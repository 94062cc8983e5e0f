"""HOI detection mAP: dual-IoU greedy matching, all-point AP, Full/Rare/Non-Rare."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Box, iou_matrix

IOU_THRESHOLD = 0.5
RARE_THRESHOLD = 10


@dataclass
class Detection:
    image_id: int
    human_box: Box
    object_box: Box
    hoi_id: int
    score: float

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass
class EvalReport:
    ap: np.ndarray  # per class, NaN where the class has no GT
    map_full: float
    map_rare: float
    map_nonrare: float
    n_gt: np.ndarray
    rare_mask: np.ndarray
    counts: dict = field(default_factory=dict)

    def to_json(self):
        return {
            "mAP_full": self.map_full,
            "mAP_rare": self.map_rare,
            "mAP_nonrare": self.map_nonrare,
            "per_class_ap": [None if np.isnan(a) else float(a) for a in self.ap],
            "n_gt": [int(n) for n in self.n_gt],
            "rare": [bool(r) for r in self.rare_mask],
            "counts": self.counts,
        }

    def to_markdown(self, name="model"):
        return (
            "| Exp | Full | Rare | Non-Rare |\n|---|---|---|---|\n"
            f"| {name} | {100 * self.map_full:.2f} | {100 * self.map_rare:.2f} | {100 * self.map_nonrare:.2f} |\n"
        )


def _sort_desc(scores):
    # stable: equal scores keep insertion order
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets, gts, hoi_id=None, threshold=IOU_THRESHOLD):
    """TP flags for ``dets`` (already sorted by descending score).

    Each detection takes the unmatched same-class GT in its image with the
    largest min(human IoU, object IoU), if that value reaches ``threshold``.
    """
    if hoi_id is not None:
        dets = [d for d in dets if d.hoi_id == hoi_id]
        gts = [g for g in gts if g.hoi_id == hoi_id]
    by_image = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    gt_h = np.array([g.human_box.to_list() for g in gts]).reshape(-1, 4)
    gt_o = np.array([g.object_box.to_list() for g in gts]).reshape(-1, 4)
    used = np.zeros(len(gts), dtype=bool)
    flags = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        cand = [j for j in by_image.get(d.image_id, []) if gts[j].hoi_id == d.hoi_id and not used[j]]
        if not cand:
            continue
        cand = np.array(cand)
        ov = np.minimum(iou_matrix([d.human_box.to_list()], gt_h[cand])[0], iou_matrix([d.object_box.to_list()], gt_o[cand])[0])
        k = int(np.argmax(ov))
        if ov[k] >= threshold:
            used[cand[k]] = True
            flags[i] = True
    return flags


def average_precision(flags, num_gt, eleven_point=False):
    """All-point interpolated AP of a ranked TP/FP list."""
    flags = np.asarray(flags, dtype=bool)
    if num_gt <= 0:
        return 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / float(num_gt)
    precision = tp / np.maximum(tp + fp, 1)
    if eleven_point:
        return float(np.mean([precision[recall >= t].max() if np.any(recall >= t) else 0.0 for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate(dets, gts, label_space, rare_threshold=RARE_THRESHOLD, eleven_point=False):
    n = label_space.n
    for d in dets:
        if not 1 <= d.hoi_id <= n:
            raise ValueError(f"detection has unknown hoi_id {d.hoi_id}")
    order = _sort_desc([d.score for d in dets])
    dets = [dets[i] for i in order]
    by_cls_d = [[] for _ in range(n)]
    by_cls_g = [[] for _ in range(n)]
    for d in dets:
        by_cls_d[d.hoi_id - 1].append(d)
    for g in gts:
        by_cls_g[g.hoi_id - 1].append(g)
    ap = np.full(n, np.nan)
    n_gt = np.array([len(g) for g in by_cls_g])
    for c in range(n):
        if n_gt[c] == 0:
            continue
        flags = match_detections(by_cls_d[c], by_cls_g[c])
        ap[c] = average_precision(flags, n_gt[c], eleven_point)
    rare = label_space.train_counts() < rare_threshold
    present = n_gt > 0

    def _mean(mask):
        sel = ap[mask & present]
        return float(sel.mean()) if sel.size else float("nan")

    return EvalReport(
        ap=ap,
        map_full=_mean(np.ones(n, dtype=bool)),
        map_rare=_mean(rare),
        map_nonrare=_mean(~rare),
        n_gt=n_gt,
        rare_mask=rare,
        counts={"rare_classes": int((rare & present).sum()), "nonrare_classes": int((~rare & present).sum()),
                "detections": len(dets), "gt": len(gts)},
    )


def detections_to_json(dets):
    out = {}
    for d in dets:
        out.setdefault(d.image_id, []).append(
            {"human": d.human_box.to_list(), "object": d.object_box.to_list(), "hoi_id": d.hoi_id, "score": d.score}
        )
    return [{"image_id": i, "detections": v} for i, v in sorted(out.items())]


def detections_from_json(doc):
    dets = []
    for entry in doc:
        for d in entry["detections"]:
            dets.append(Detection(int(entry["image_id"]), Box.from_list(d["human"]), Box.from_list(d["object"]), int(d["hoi_id"]), float(d["score"])))
    return dets
