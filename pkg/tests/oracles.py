"""Plain-Python reference implementations (no numpy vectorisation)."""

import numpy as np


def iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def nms(boxes, scores, thr):
    """Keep a box iff no higher-ranked kept box overlaps it by more than ``thr``."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if all(iou(boxes[i], boxes[j]) <= thr for j in kept):
            kept.append(i)
    return kept


def average_precision(dets, gt, thr=0.5):
    """11-point VOC AP. ``dets`` is a list of (scene, box, score); ``gt`` maps scene -> boxes."""
    n_gt = sum(len(v) for v in gt.values())
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    used = {k: [False] * len(v) for k, v in gt.items()}
    tp = []
    for i in order:
        sid, box, _ = dets[i]
        best, best_j = -1.0, -1
        for j, g in enumerate(gt.get(sid, [])):
            if used[sid][j]:
                continue
            o = iou(box, g)
            if o > best:
                best, best_j = o, j
        hit = best_j >= 0 and best >= thr
        if hit:
            used[sid][best_j] = True
        tp.append(hit)
    prec, rec = [], []
    hits = 0
    for k, t in enumerate(tp, 1):
        hits += t
        prec.append(hits / k)
        rec.append(hits / n_gt)
    ap = 0.0
    for t in [i / 10 for i in range(11)]:
        cands = [p for p, r in zip(prec, rec) if r >= t - 1e-12]
        ap += (max(cands) if cands else 0.0) / 11
    return ap


def random_boxes(rng, n):
    xy = rng.uniform(0, 0.8, size=(n, 2))
    wh = rng.uniform(0.05, 0.4, size=(n, 2))
    return np.concatenate([xy, np.minimum(xy + wh, 1.0)], axis=1)


def nms_instance(rng):
    n = int(rng.integers(1, 11))
    boxes = random_boxes(rng, n)
    # cluster some boxes so suppression actually happens
    boxes[n // 2:] = boxes[0] + rng.normal(0, 0.03, size=(n - n // 2, 4))
    boxes[:, 2:] = np.maximum(boxes[:, 2:], boxes[:, :2] + 0.01)
    scores = np.round(rng.uniform(size=n), 1)  # rounding creates ties
    return boxes, scores, float(rng.choice([0.3, 0.5, 0.7]))


def ap_instance(rng):
    """≤ 10 detections over two scenes with a few gt boxes each."""
    gt = {s: random_boxes(rng, int(rng.integers(1, 4))) for s in (0, 1)}
    dets = []
    for _ in range(int(rng.integers(0, 11))):
        s = int(rng.integers(0, 2))
        if rng.uniform() < 0.7:
            g = gt[s][rng.integers(len(gt[s]))]
            box = g + rng.normal(0, 0.04, size=4)
            box[2:] = np.maximum(box[2:], box[:2] + 0.01)
        else:
            box = random_boxes(rng, 1)[0]
        dets.append((s, box, float(np.round(rng.uniform(), 2))))
    return dets, gt
