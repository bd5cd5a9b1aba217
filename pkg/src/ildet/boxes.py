"""Box geometry on the unit square: IoU, delta encoding, decoding and NMS.

Boxes are ``(x_min, y_min, x_max, y_max)`` rows of float64 arrays.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


class BoxError(ValueError):
    """Degenerate or malformed box."""


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim == 1:
        b = b[None, :]
    if b.shape[-1] != 4:
        raise BoxError(f"boxes must have 4 coordinates, got shape {b.shape}")
    return b


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou(a, b) -> float:
    """IoU of two single boxes."""
    return float(iou_matrix(a, b)[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    a = as_boxes(a)
    b = as_boxes(b)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def _centers(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode(proposals, gt) -> np.ndarray:
    """Regression targets mapping each proposal onto its matched gt box.

    ``((gx - px)/pw, (gy - py)/ph, log(gw/pw), log(gh/ph))`` on centres and sizes.
    """
    p = as_boxes(proposals)
    g = as_boxes(gt)
    if p.shape != g.shape:
        raise BoxError(f"encode needs paired boxes, got {p.shape} and {g.shape}")
    px, py, pw, ph = _centers(p)
    gx, gy, gw, gh = _centers(g)
    if np.any(pw <= 0) or np.any(ph <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise BoxError("cannot encode a box with non-positive width or height")
    return np.stack([(gx - px) / pw, (gy - py) / ph, np.log(gw / pw), np.log(gh / ph)], axis=1)


# exp() argument cap, as in Fast R-CNN style decoders
_MAX_LOG_SCALE = np.log(1000.0 / 16)
_MIN_SIZE = 1e-6


def decode(proposals, deltas, clip: bool = True) -> np.ndarray:
    """Inverse of :func:`encode`; boxes clipped to the unit square by default.

    Clipped boxes are kept non-degenerate (width and height at least 1e-6).
    """
    p = as_boxes(proposals)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    px, py, pw, ph = _centers(p)
    cx = px + d[:, 0] * pw
    cy = py + d[:, 1] * ph
    w = pw * np.exp(np.minimum(d[:, 2], _MAX_LOG_SCALE))
    h = ph * np.exp(np.minimum(d[:, 3], _MAX_LOG_SCALE))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if clip:
        out = np.clip(out, 0.0, 1.0)
        # keep a strictly positive extent after clamping
        for lo, hi in ((0, 2), (1, 3)):
            too_small = out[:, hi] - out[:, lo] < _MIN_SIZE
            if np.any(too_small):
                mid = np.clip(0.5 * (out[too_small, lo] + out[too_small, hi]),
                              _MIN_SIZE / 2, 1 - _MIN_SIZE / 2)
                out[too_small, lo] = mid - _MIN_SIZE / 2
                out[too_small, hi] = mid + _MIN_SIZE / 2
    return out


def nms(boxes, scores, iou_threshold: float, max_keep: Optional[int] = None) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns kept indices in descending score order; equal scores are
    resolved by lower index first. A box is suppressed when its IoU with an
    already kept box exceeds ``iou_threshold``. Stops after ``max_keep``
    survivors when given.
    """
    b = as_boxes(boxes) if len(boxes) else np.zeros((0, 4))
    s = np.asarray(scores, dtype=np.float64)
    if len(s) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(s)), -s))
    b = b[order]
    x0, y0, x1, y1 = b.T
    areas = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    alive = np.ones(len(s), dtype=bool)
    keep = []
    for pos in range(len(s)):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        if max_keep is not None and len(keep) >= max_keep:
            break
        r = slice(pos + 1, None)
        iw = np.minimum(x1[pos], x1[r]) - np.maximum(x0[pos], x0[r])
        ih = np.minimum(y1[pos], y1[r]) - np.maximum(y0[pos], y0[r])
        inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
        union = areas[pos] + areas[r] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ov = np.where(union > 0, inter / union, 0.0)
        alive[r] &= ov <= iou_threshold
    return np.asarray(keep, dtype=np.int64)
