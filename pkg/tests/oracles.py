"""Slow, independent reference implementations used by the test-suite."""
import numpy as np

from hoidistill.evaluator import Detection
from hoidistill.geometry import Box
from hoidistill.data import GtInstance


def iou_ref(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def match_ref(dets, gts, threshold=0.5):
    """Greedy matching by brute force over every GT; ``dets`` already ranked."""
    used = set()
    flags = []
    for d in dets:
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if j in used or g.image_id != d.image_id or g.hoi_id != d.hoi_id:
                continue
            ov = min(iou_ref(d.human_box.to_list(), g.human_box.to_list()),
                     iou_ref(d.object_box.to_list(), g.object_box.to_list()))
            if ov > best:
                best, best_j = ov, j
        hit = best_j is not None and best >= threshold
        if hit:
            used.add(best_j)
        flags.append(hit)
    return flags


def ap_ref(flags, num_gt):
    """Area under the interpolated PR curve, summed one TP at a time."""
    if num_gt == 0 or not flags:
        return 0.0
    prec, rec = [], []
    tp = 0
    for k, f in enumerate(flags, 1):
        tp += bool(f)
        prec.append(tp / k)
        rec.append(tp / num_gt)
    total, prev_r = 0.0, 0.0
    for k, f in enumerate(flags):
        if f:
            total += (rec[k] - prev_r) * max(prec[k:])
            prev_r = rec[k]
    return total


def map_ref(dets, gts, n_classes):
    ranked = sorted(dets, key=lambda d: -d.score)
    aps = []
    for c in range(1, n_classes + 1):
        g = [x for x in gts if x.hoi_id == c]
        if not g:
            aps.append(float("nan"))
            continue
        d = [x for x in ranked if x.hoi_id == c]
        aps.append(ap_ref(match_ref(d, g), len(g)))
    return np.array(aps)


def random_instance(rng, n_images=4, n_classes=3, max_gt=4, max_det=8, max_total=None):
    """GT plus detections that are jittered copies of GT or random boxes, with distinct scores.

    ``max_total`` caps the detection count over all images.
    """
    def box(near=None):
        if near is None:
            x, y = rng.uniform(0, 40, 2)
            return Box(x, y, x + rng.uniform(4, 20), y + rng.uniform(4, 20))
        b = np.array(near.to_list()) + rng.normal(0, 2.0, 4)
        b[2] = max(b[2], b[0] + 1)
        b[3] = max(b[3], b[1] + 1)
        return Box(*b)

    gts, dets = [], []
    for i in range(n_images):
        for _ in range(rng.integers(0, max_gt + 1)):
            gts.append(GtInstance(i, box(), box(), int(rng.integers(1, n_classes + 1))))
    scores = rng.permutation(max(1, n_images * max_det)) / (n_images * max_det) + 1e-3
    k = 0
    for i in range(n_images):
        mine = [g for g in gts if g.image_id == i]
        for _ in range(rng.integers(0, max_det + 1)):
            if mine and rng.random() < 0.6:
                g = mine[rng.integers(len(mine))]
                cls = g.hoi_id if rng.random() < 0.8 else int(rng.integers(1, n_classes + 1))
                dets.append(Detection(i, box(g.human_box), box(g.object_box), cls, float(scores[k])))
            else:
                dets.append(Detection(i, box(), box(), int(rng.integers(1, n_classes + 1)), float(scores[k])))
            k += 1
    if max_total is not None:
        keep = sorted(rng.permutation(len(dets))[:max_total])
        dets = [dets[j] for j in keep]
    return dets, gts
