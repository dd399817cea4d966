"""Box geometry: IoU, greedy NMS, anchors and delta coding.

Boxes are ``(y1, x1, y2, x2)`` in pixels.
"""

from __future__ import annotations

import logging
import math

import numpy as np

log = logging.getLogger(__name__)

DELTA_STDS = np.array([0.1, 0.1, 0.2, 0.2])
MAX_LOG_SCALE = math.log(1000.0 / 16)


def box_area(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def iou(a, b) -> float:
    """Intersection over union of two boxes; degenerate boxes give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a[2] <= a[0] or a[3] <= a[1] or b[2] <= b[0] or b[3] <= b[1]:
        log.warning("degenerate box in iou: %s, %s", a.tolist(), b.tolist())
        return 0.0
    ih = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iw = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ih * iw
    return float(inter / (box_area(a) + box_area(b) - inter))


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ih = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    iw = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = ih * iw
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def descending_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score; ties keep the lower index first."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(scores.size), -scores))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy suppression: keep the best box, drop overlaps above ``iou_thresh``, repeat."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms scores must be finite")
    order = descending_order(scores)
    ov = iou_matrix(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for r in range(len(order)):
        if alive[r]:
            keep.append(order[r])
            alive &= ov[r] <= iou_thresh
    return np.array(keep, dtype=np.int64)


def make_anchors(h: int, w: int, stride: int, scales=(20.0, 32.0, 44.0)) -> np.ndarray:
    """Square anchors centred on a stride grid, ``(h * w * len(scales), 4)``.

    Ordering is row-major over the grid with scales innermost, matching the
    layout of the RPN head outputs.
    """
    cy = (np.arange(h) + 0.5) * stride
    cx = (np.arange(w) + 0.5) * stride
    cy, cx = np.meshgrid(cy, cx, indexing="ij")
    s = np.asarray(scales, dtype=np.float64)
    cy = cy[..., None]
    cx = cx[..., None]
    half = s / 2
    a = np.stack(np.broadcast_arrays(cy - half, cx - half, cy + half, cx + half), axis=-1)
    return a.reshape(-1, 4)


def encode(boxes: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Deltas taking ``ref`` boxes to ``boxes``, normalised by :data:`DELTA_STDS`."""
    boxes = np.asarray(boxes, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    rh, rw = ref[..., 2] - ref[..., 0], ref[..., 3] - ref[..., 1]
    rcy, rcx = ref[..., 0] + 0.5 * rh, ref[..., 1] + 0.5 * rw
    bh, bw = boxes[..., 2] - boxes[..., 0], boxes[..., 3] - boxes[..., 1]
    bcy, bcx = boxes[..., 0] + 0.5 * bh, boxes[..., 1] + 0.5 * bw
    d = np.stack([(bcy - rcy) / rh, (bcx - rcx) / rw, np.log(bh / rh), np.log(bw / rw)], axis=-1)
    return d / DELTA_STDS


def decode(deltas: np.ndarray, ref: np.ndarray) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64) * DELTA_STDS
    ref = np.asarray(ref, dtype=np.float64)
    rh, rw = ref[..., 2] - ref[..., 0], ref[..., 3] - ref[..., 1]
    rcy, rcx = ref[..., 0] + 0.5 * rh, ref[..., 1] + 0.5 * rw
    cy, cx = rcy + d[..., 0] * rh, rcx + d[..., 1] * rw
    h = rh * np.exp(np.clip(d[..., 2], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    w = rw * np.exp(np.clip(d[..., 3], -MAX_LOG_SCALE, MAX_LOG_SCALE))
    return np.stack([cy - h / 2, cx - w / 2, cy + h / 2, cx + w / 2], axis=-1)


def clip_boxes(boxes: np.ndarray, h: int, w: int) -> np.ndarray:
    b = np.array(boxes, dtype=np.float64)
    b[..., 0::2] = np.clip(b[..., 0::2], 0, h)
    b[..., 1::2] = np.clip(b[..., 1::2], 0, w)
    return b
