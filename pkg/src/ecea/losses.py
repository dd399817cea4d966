"""IoU-based target assignment and the combined detection loss ``L_rpn + lambda * L_roi``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .boxes import encode, iou_matrix

RPN_POS = 0.7
RPN_NEG = 0.3
ROI_POS = 0.5


@dataclass
class RPNTargets:
    labels: np.ndarray    # (B, A) 1 positive, 0 negative, -1 ignored
    deltas: np.ndarray    # (B, A, 4), meaningful where labels == 1


@dataclass
class ROITargets:
    labels: np.ndarray    # (R,) classifier label, 0 background
    deltas: np.ndarray    # (R, 4), meaningful where labels > 0


def assign_rpn(anchors: np.ndarray, gt_boxes: list[np.ndarray], rng: np.random.Generator | None = None,
               batch_per_image: int = 64, pos_fraction: float = 0.5) -> RPNTargets:
    """Positive at IoU >= 0.7 (plus the best anchor of each GT), negative below 0.3.

    When ``rng`` is given, anchors are subsampled to at most ``batch_per_image``
    per image with at most ``pos_fraction`` positives; the rest become ignored.
    """
    B, A = len(gt_boxes), anchors.shape[0]
    labels = np.full((B, A), -1, dtype=np.int64)
    deltas = np.zeros((B, A, 4))
    for b, gt in enumerate(gt_boxes):
        gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
        if not len(gt):
            labels[b] = 0
            continue
        ov = iou_matrix(anchors, gt)
        best_gt = ov.argmax(axis=1)
        best = ov[np.arange(A), best_gt]
        labels[b, best < RPN_NEG] = 0
        labels[b, best >= RPN_POS] = 1
        # each GT keeps its best anchor (lowest index on ties)
        top = ov.argmax(axis=0)
        labels[b, top] = 1
        best_gt[top] = np.arange(len(gt))
        pos = labels[b] == 1
        deltas[b, pos] = encode(gt[best_gt[pos]], anchors[pos])
        if rng is not None:
            _subsample(labels[b], rng, batch_per_image, pos_fraction)
    return RPNTargets(labels, deltas)


def _subsample(lab: np.ndarray, rng: np.random.Generator, total: int, pos_fraction: float) -> None:
    pos = np.nonzero(lab == 1)[0]
    neg = np.nonzero(lab == 0)[0]
    max_pos = int(total * pos_fraction)
    if len(pos) > max_pos:
        lab[rng.choice(pos, size=len(pos) - max_pos, replace=False)] = -1
    n_pos = min(len(pos), max_pos)
    max_neg = total - n_pos
    if len(neg) > max_neg:
        lab[rng.choice(neg, size=len(neg) - max_neg, replace=False)] = -1


def assign_roi(proposals: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray) -> ROITargets:
    """Proposal takes the label of its best GT when IoU >= 0.5, else background."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    R = len(proposals)
    labels = np.zeros(R, dtype=np.int64)
    deltas = np.zeros((R, 4))
    if R and len(gt_boxes):
        ov = iou_matrix(proposals, gt_boxes)
        j = ov.argmax(axis=1)
        pos = ov[np.arange(R), j] >= ROI_POS
        labels[pos] = np.asarray(gt_labels)[j[pos]]
        deltas[pos] = encode(gt_boxes[j[pos]], proposals[pos])
    return ROITargets(labels, deltas)


@dataclass
class LossBreakdown:
    total: Tensor
    rpn_obj: Tensor
    rpn_box: Tensor
    roi_cls: Tensor
    roi_box: Tensor
    lam: float

    @property
    def rpn(self) -> Tensor:
        return self.rpn_obj + self.rpn_box

    @property
    def roi(self) -> Tensor:
        return self.roi_cls + self.roi_box

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(), "rpn_obj": self.rpn_obj.item(), "rpn_box": self.rpn_box.item(),
            "roi_cls": self.roi_cls.item(), "roi_box": self.roi_box.item(),
        }


def _masked_mean(x: Tensor, mask: np.ndarray, denom: float) -> Tensor:
    return (x * Tensor(mask.astype(x.dtype))).sum() / max(denom, 1.0)


def rpn_loss(logits: Tensor, deltas: Tensor, targets: RPNTargets) -> tuple[Tensor, Tensor]:
    """Objectness BCE averaged over sampled anchors; smooth-L1 summed over positives / #positives."""
    sampled = targets.labels >= 0
    pos = targets.labels == 1
    obj = _masked_mean(ag.bce_with_logits(logits, np.clip(targets.labels, 0, 1)), sampled, sampled.sum())
    diff = deltas - Tensor(targets.deltas.astype(deltas.dtype))
    box = _masked_mean(ag.smooth_l1(diff, 1.0 / 9).sum(axis=-1), pos, pos.sum())
    return obj, box


def roi_loss(logits: Tensor, deltas: Tensor, targets: ROITargets) -> tuple[Tensor, Tensor]:
    """Cross-entropy over all ROIs; smooth-L1 refinement over positives."""
    R = logits.shape[0]
    if R == 0:
        z = Tensor(np.zeros((), dtype=logits.dtype))
        return z, z
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(R), targets.labels] = 1.0
    cls = -(ag.log_softmax(logits, axis=1) * Tensor(onehot)).sum() / R
    pos = targets.labels > 0
    diff = deltas - Tensor(targets.deltas.astype(deltas.dtype))
    box = _masked_mean(ag.smooth_l1(diff, 1.0 / 9).sum(axis=-1), pos, pos.sum())
    return cls, box


def loss_total(rpn_logits: Tensor, rpn_deltas: Tensor, roi_logits: Tensor, roi_deltas: Tensor,
               rpn_targets: RPNTargets, roi_targets: ROITargets, lam: float = 1.0) -> LossBreakdown:
    """``L = (BCE + smooth-L1)_rpn + lam * (CE + smooth-L1)_roi``; no positives means zero box terms."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    obj, rbox = rpn_loss(rpn_logits, rpn_deltas, rpn_targets)
    cls, bbox = roi_loss(roi_logits, roi_deltas, roi_targets)
    total = obj + rbox + (cls + bbox) * lam
    return LossBreakdown(total, obj, rbox, cls, bbox, lam)
