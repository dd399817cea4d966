"""Detection metrics: AP at an IoU threshold, best-detection IoU, extension coverage."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .boxes import box_area, descending_order, iou, iou_matrix

log = logging.getLogger(__name__)

__all__ = ["iou", "average_precision", "average_precision_50", "extension_coverage", "EvalReport"]


def average_precision(detections: Sequence[tuple], ground_truth: Mapping, thresh: float = 0.5) -> float | None:
    """All-point interpolated AP for one class.

    ``detections`` holds ``(image_id, score, box)`` triples and ``ground_truth``
    maps image id to an ``(n, 4)`` array. Detections are matched greedily by
    descending score (ties keep input order) to the GT of highest IoU in the
    same image; a hit on an already matched GT is a false positive. Returns
    ``None`` when there is no ground truth.
    """
    gts = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truth.items()}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0
    scores = np.array([d[1] for d in detections], dtype=np.float64)
    order = descending_order(scores)
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, _, box = detections[i]
        g = gts.get(img)
        if g is None or not len(g):
            continue
        ov = iou_matrix(np.asarray(box)[None], g)[0]
        j = int(np.argmax(ov))
        if ov[j] >= thresh and not taken[img][j]:
            taken[img][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    # precision envelope, then integrate over recall steps
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision_50(detections, ground_truth) -> float | None:
    return average_precision(detections, ground_truth, 0.5)


def extension_coverage(pred_box, full_gt_box, visible_region_box) -> float | None:
    """Fraction of the unseen part of the GT box (full minus visible) that ``pred_box`` covers.

    The unseen region is ``full \\ visible``; its area is ``A(full) - A(visible)``
    because visible lies inside full. ``None`` when nothing is unseen.
    """
    p = np.asarray(pred_box, dtype=np.float64)
    f = np.asarray(full_gt_box, dtype=np.float64)
    v = _intersect(np.asarray(visible_region_box, dtype=np.float64), f)
    hidden = box_area(f) - box_area(v)
    if hidden <= 1e-12:
        return None
    pf = _intersect(p, f)
    covered = box_area(pf) - box_area(_intersect(pf, v))
    return float(np.clip(covered / hidden, 0.0, 1.0))


def _intersect(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.array([max(a[0], b[0]), max(a[1], b[1]), min(a[2], b[2]), min(a[3], b[3])])


@dataclass
class EvalReport:
    ap50: dict[int, float | None]
    ap75: dict[int, float | None]
    nap50: float | None
    bap50: float | None
    mean_iou: float | None
    coverage: float | None
    probe_coverage: float | None
    mode: str
    novel_classes: tuple[int, ...]
    base_classes: tuple[int, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("nap50", "bap50", "mean_iou", "coverage", "probe_coverage"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ap50"] = {str(k): v for k, v in self.ap50.items()}
        d["ap75"] = {str(k): v for k, v in self.ap75.items()}
        d["novel_classes"] = list(self.novel_classes)
        d["base_classes"] = list(self.base_classes)
        return d

    def table(self) -> str:
        def fmt(v):
            return "  n/a " if v is None else f"{v:6.3f}"

        lines = [f"mode {self.mode}", "class  split   AP50   AP75"]
        for c in sorted(self.ap50):
            split = "novel" if c in self.novel_classes else "base"
            lines.append(f"{c:5d}  {split:5s} {fmt(self.ap50[c])} {fmt(self.ap75[c])}")
        lines += [
            f"nAP50          {fmt(self.nap50)}",
            f"bAP50          {fmt(self.bap50)}",
            f"mean IoU       {fmt(self.mean_iou)}",
            f"ext. coverage  {fmt(self.coverage)}",
            f"probe coverage {fmt(self.probe_coverage)}",
        ]
        for k, v in sorted(self.meta.items()):
            lines.append(f"{k}: {v}")
        return "\n".join(lines)


def _mean(xs: Iterable[float | None]) -> float | None:
    vals = [x for x in xs if x is not None]
    return float(np.mean(vals)) if vals else None


def class_ap(dets_per_image, samples, cls: int, thresh: float) -> float | None:
    detections, gt = [], {}
    for i, (d, s) in enumerate(zip(dets_per_image, samples)):
        gt[i] = s.boxes[s.classes == cls]
        m = d.classes == cls
        detections.extend((i, float(sc), b) for sc, b in zip(d.scores[m], d.boxes[m]))
    return average_precision(detections, gt, thresh)


def best_detection_ious(dets_per_image, samples) -> list[float]:
    """IoU of the top-scoring detection of each GT's class with that GT (0 if none)."""
    out = []
    for d, s in zip(dets_per_image, samples):
        for box, cls in zip(s.boxes, s.classes):
            m = d.classes == cls
            out.append(iou(d.boxes[m][np.argmax(d.scores[m])], box) if m.any() else 0.0)
    return out


def coverages(dets_per_image, samples, region: str = "visible") -> list[float]:
    """Extension coverage of each GT's best detection.

    ``region="visible"`` measures against the parts drawn in the image;
    ``region="head"`` against the parts of the fixed novel training view.
    """
    out = []
    for d, s in zip(dets_per_image, samples):
        seen = s.visible_boxes if region == "visible" else s.head_boxes
        for box, vis_box, cls in zip(s.boxes, seen, s.classes):
            m = d.classes == cls
            pred = d.boxes[m][np.argmax(d.scores[m])] if m.any() else np.zeros(4)
            c = extension_coverage(pred, box, vis_box)
            if c is not None:
                out.append(c)
    return out


def detect_all(detector, samples, batch: int = 16):
    out = []
    for i in range(0, len(samples), batch):
        out.extend(detector.detect(np.stack([s.image for s in samples[i:i + batch]])))
    return out


def evaluate(detector, dataset, mode: str | None = None, meta: dict | None = None) -> EvalReport:
    """Novel-only metrics for FSOD; per-class base and novel AP for G-FSOD.

    ``coverage`` is measured on the full novel test glyphs, taking the region of
    the fixed training view as the seen part; ``probe_coverage`` on the probe
    set of randomly occluded novel glyphs, taking the drawn parts as seen.
    """
    spec = dataset.spec
    mode = mode or spec.mode
    novel_dets = detect_all(detector, dataset.novel_test)
    probe_dets = detect_all(detector, dataset.novel_probe)
    ap50 = {c: class_ap(novel_dets, dataset.novel_test, c, 0.5) for c in spec.novel_classes}
    ap75 = {c: class_ap(novel_dets, dataset.novel_test, c, 0.75) for c in spec.novel_classes}
    bap50 = None
    if mode == "gfsod":
        base_dets = detect_all(detector, dataset.base_test)
        for c in spec.base_classes:
            ap50[c] = class_ap(base_dets, dataset.base_test, c, 0.5)
            ap75[c] = class_ap(base_dets, dataset.base_test, c, 0.75)
        bap50 = _mean(ap50[c] for c in spec.base_classes)
    return EvalReport(
        ap50=ap50, ap75=ap75,
        nap50=_mean(ap50[c] for c in spec.novel_classes),
        bap50=bap50,
        mean_iou=_mean(best_detection_ious(novel_dets, dataset.novel_test)),
        coverage=_mean(coverages(novel_dets, dataset.novel_test, "head")),
        probe_coverage=_mean(coverages(probe_dets, dataset.novel_probe, "visible")),
        mode=mode, novel_classes=spec.novel_classes, base_classes=spec.base_classes,
        meta=dict(meta or {}),
    )
