"""Toy two-stage detector: conv backbone, ECEA fusion neck, RPN and ROI heads."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .attention import EAConfig
from .autograd import Tensor
from .boxes import clip_boxes, decode, descending_order, make_anchors, nms
from .errors import ConfigError, DimensionError
from .fusion import STAGES, FusedFeatures, FusionConfig, FusionParams, StageBundle, fuse_stages

log = logging.getLogger(__name__)

BACKBONE_WIDTHS = (8, 16, 32, 64)   # stem, s3, s4, s5
PARAM_GROUPS = ("backbone", "ecea", "rpn", "roi")


@dataclass(frozen=True)
class DetectorConfig:
    fusion: FusionConfig = FusionConfig()
    num_classes: int = 8                    # foreground classes; label 0 is background
    anchor_scales: tuple[float, ...] = (20.0, 32.0, 44.0)
    backbone_kernel: int = 3
    pre_nms: int = 128
    rpn_nms: float = 0.7
    post_nms_train: int = 24
    post_nms_test: int = 16
    roi_grid: int = 4
    roi_hidden: int = 64
    det_nms: float = 0.5
    max_dets: int = 50

    def __post_init__(self):
        problems = []
        if self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if not self.anchor_scales or min(self.anchor_scales) <= 0:
            problems.append("anchor_scales must be positive")
        if self.backbone_kernel not in (2, 3):
            problems.append(f"backbone_kernel must be 2 or 3, got {self.backbone_kernel}")
        if self.roi_grid < 1:
            problems.append("roi_grid must be >= 1")
        if self.roi_hidden < 0:
            problems.append("roi_hidden must be >= 0")
        for name in ("pre_nms", "post_nms_train", "post_nms_test", "max_dets"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        if problems:
            raise ConfigError(problems)

    @property
    def ea(self) -> EAConfig:
        return self.fusion.ea

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales)

    @property
    def fused_channels(self) -> int:
        return 3 * self.fusion.ea.channels


def _normal(rng, shape, fan_in, dtype, scale=1.0):
    return Tensor((scale * rng.standard_normal(shape) / math.sqrt(fan_in)).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


@dataclass
class DetectorParams:
    backbone: dict[str, Tensor]
    fusion: FusionParams
    rpn: dict[str, Tensor]
    roi: dict[str, Tensor]

    @classmethod
    def init(cls, cfg: DetectorConfig, rng: np.random.Generator, dtype=np.float64) -> "DetectorParams":
        bb = {}
        cin = 3
        for i, cout in enumerate(BACKBONE_WIDTHS):
            # He-style scale keeps SiLU activations from shrinking layer to layer
            k = cfg.backbone_kernel
            bb[f"conv{i}.w"] = _normal(rng, (cout, cin, k, k), cin * k * k / 2, dtype)
            bb[f"conv{i}.b"] = _zeros((cout,), dtype)
            cin = cout
        widths = dict(zip(STAGES, BACKBONE_WIDTHS[1:]))
        fusion = FusionParams.init(widths, cfg.fusion, rng, dtype)
        F, A = cfg.fused_channels, cfg.num_anchors
        rpn = {
            "obj.w": _normal(rng, (F, A), F, dtype, 0.1),
            "obj.b": _zeros((A,), dtype),
            "delta.w": _normal(rng, (F, 4 * A), F, dtype, 0.1),
            "delta.b": _zeros((4 * A,), dtype),
        }
        feat = cfg.roi_grid ** 2 * F
        roi = {}
        if cfg.roi_hidden:
            roi["fc.w"] = _normal(rng, (feat, cfg.roi_hidden), feat, dtype)
            roi["fc.b"] = _zeros((cfg.roi_hidden,), dtype)
            feat = cfg.roi_hidden
        roi["cls.w"] = _normal(rng, (feat, cfg.num_classes + 1), feat, dtype, 0.1)
        roi["cls.b"] = _zeros((cfg.num_classes + 1,), dtype)
        roi["box.w"] = _normal(rng, (feat, 4), feat, dtype, 0.1)
        roi["box.b"] = _zeros((4,), dtype)
        return cls(bb, fusion, rpn, roi)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"backbone.{k}": v for k, v in self.backbone.items()}
        out.update({f"ecea.{k}": v for k, v in self.fusion.named_tensors().items()})
        out.update({f"rpn.{k}": v for k, v in self.rpn.items()})
        out.update({f"roi.{k}": v for k, v in self.roi.items()})
        return out

    def group(self, name: str) -> dict[str, Tensor]:
        if name not in PARAM_GROUPS:
            raise ConfigError(f"unknown parameter group {name!r}; choose from {PARAM_GROUPS}")
        return {k: v for k, v in self.named_tensors().items() if k.split(".", 1)[0] == name}

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_tensors().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mine = self.named_tensors()
        missing = sorted(set(mine) ^ set(state))
        if missing:
            raise ConfigError(f"parameter names differ: {missing[:5]}")
        for k, t in mine.items():
            if state[k].shape != t.shape:
                raise DimensionError(f"{k}: shape {state[k].shape} != {t.shape}")
            t.data = np.array(state[k], dtype=t.dtype, copy=True)


def toy_backbone(image: Tensor, params: dict[str, Tensor]) -> StageBundle:
    """Four stride-2 convolutions with SiLU; stages at strides 4, 8, 16.

    A 3x3 kernel uses padding 1; a 2x2 kernel tiles without overlap, so each
    stage-5 cell sees only its own 16x16 patch.
    """
    x = image if image.ndim == 4 else image.reshape((1,) + image.shape)
    H, W = x.shape[-2:]
    if H % 16 or W % 16:
        raise DimensionError(f"backbone input must be a multiple of 16, got {H}x{W}")
    feats = []
    for i in range(len(BACKBONE_WIDTHS)):
        w = params[f"conv{i}.w"]
        x = ag.silu(ag.conv2d(x, w, params[f"conv{i}.b"], stride=2, padding=w.shape[-1] // 2 if w.shape[-1] % 2 else 0))
        feats.append(x)
    s3, s4, s5 = feats[1:]
    if image.ndim == 3:
        s3, s4, s5 = (f.reshape(f.shape[1:]) for f in (s3, s4, s5))
    return StageBundle(s3, s4, s5)


def decouple_gradient(features: Tensor, c: float | None) -> Tensor:
    """Forward identity; the gradient passed upstream is multiplied by ``c``.

    ``c=None`` inserts nothing at all (the undecoupled graph).
    """
    return features if c is None else ag.scale_grad(features, c)


def _channel_last(fmap: Tensor) -> Tensor:
    B, C, h, w = fmap.shape
    return fmap.transpose(0, 2, 3, 1).reshape(B, h * w, C)


@dataclass
class RPNOutput:
    logits: Tensor        # (B, A_total)
    deltas: Tensor        # (B, A_total, 4)
    anchors: np.ndarray   # (A_total, 4)

    @property
    def objectness(self) -> np.ndarray:
        return ag._stable_sigmoid(self.logits.data)


def rpn_head(fused: FusedFeatures, params: dict[str, Tensor], anchors: np.ndarray,
             eta: float | None = 1.0) -> RPNOutput:
    """Two 1x1 heads over the fused map: objectness logits and box deltas per anchor."""
    x = _channel_last(decouple_gradient(fused.map, eta))
    B, P, _ = x.shape
    A = params["obj.b"].shape[0]
    if P * A != anchors.shape[0]:
        raise DimensionError(f"{P} locations x {A} scales != {anchors.shape[0]} anchors")
    logits = (ag.matmul(x, params["obj.w"]) + params["obj.b"]).reshape(B, P * A)
    deltas = (ag.matmul(x, params["delta.w"]) + params["delta.b"]).reshape(B, P * A, 4)
    return RPNOutput(logits, deltas, anchors)


@dataclass
class Proposals:
    boxes: np.ndarray        # (R, 4)
    scores: np.ndarray       # (R,) objectness
    anchor_index: np.ndarray  # (R,) source anchor


def select_proposals(rpn: RPNOutput, b: int, cfg: DetectorConfig, image_hw, top_k: int) -> Proposals:
    """Decode, keep the ``pre_nms`` best, suppress, keep ``top_k``; ties go to the lower anchor index."""
    scores = ag._stable_sigmoid(rpn.logits.data[b])
    boxes = clip_boxes(decode(rpn.deltas.data[b], rpn.anchors), *image_hw)
    order = descending_order(scores)[: cfg.pre_nms]
    keep = order[nms(boxes[order], scores[order], cfg.rpn_nms)][:top_k]
    return Proposals(boxes[keep], scores[keep], keep)


def rpn_forward(fused: FusedFeatures, anchors: np.ndarray, params: dict[str, Tensor], cfg: DetectorConfig,
                image_hw, eta: float | None = 1.0, top_k: int | None = None) -> tuple[RPNOutput, list[Proposals]]:
    out = rpn_head(fused, params, anchors, eta)
    k = cfg.post_nms_test if top_k is None else top_k
    return out, [select_proposals(out, b, cfg, image_hw, k) for b in range(out.logits.shape[0])]


@dataclass
class ROIOutput:
    logits: Tensor          # (R, num_classes + 1)
    deltas: Tensor          # (R, 4)
    boxes: np.ndarray       # (R, 4) the proposals actually used
    image_index: np.ndarray  # (R,)
    skipped: int = 0

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def refined(self) -> np.ndarray:
        return decode(self.deltas.data, self.boxes)


def roi_grid_points(boxes: np.ndarray, grid: int, stride: int) -> np.ndarray:
    """``(R, grid*grid, 2)`` bin-centre sample points in fused-map coordinates."""
    t = (np.arange(grid) + 0.5) / grid
    y = boxes[:, 0:1] + t[None, :] * (boxes[:, 2:3] - boxes[:, 0:1])
    x = boxes[:, 1:2] + t[None, :] * (boxes[:, 3:4] - boxes[:, 1:2])
    yy = np.repeat(y, grid, axis=1)
    xx = np.tile(x, (1, grid))
    # pixel p lies at map coordinate p / stride - 0.5 (cell centres at stride * (j + 0.5))
    return np.stack([yy, xx], axis=-1) / stride - 0.5


def roi_features(fmap: Tensor, proposals: list[np.ndarray], cfg: DetectorConfig, stride: int = 4):
    """Bilinear ``grid x grid`` crops, one row of ``grid*grid*C`` features per kept proposal.

    Zero-area proposals are dropped. Returns ``(features or None, kept boxes,
    image index, skipped count)``.
    """
    if fmap.ndim == 3:
        fmap = fmap.reshape((1,) + fmap.shape)
    feats, kept, idx, skipped = [], [], [], 0
    G2 = cfg.roi_grid ** 2
    for b, boxes in enumerate(proposals):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        skipped += int((~ok).sum())
        boxes = boxes[ok]
        if not len(boxes):
            continue
        pts = roi_grid_points(boxes, cfg.roi_grid, stride).reshape(1, -1, 2)
        crop = ag.sample_points(fmap[b:b + 1], Tensor(pts.astype(fmap.dtype)))
        feats.append(crop.reshape(len(boxes), G2 * fmap.shape[1]))
        kept.append(boxes)
        idx.append(np.full(len(boxes), b))
    if skipped:
        log.warning("roi_head skipped %d degenerate proposals", skipped)
    if not feats:
        return None, np.zeros((0, 4)), np.zeros(0, dtype=np.int64), skipped
    h = ag.concat(feats, axis=0) if len(feats) > 1 else feats[0]
    return h, np.concatenate(kept), np.concatenate(idx), skipped


def roi_head(fused: FusedFeatures, proposals: list[np.ndarray], params: dict[str, Tensor],
             cfg: DetectorConfig, gamma: float | None = 1.0) -> ROIOutput:
    """Crop each proposal from the fused map, then a small head to class logits and deltas."""
    fmap = decouple_gradient(fused.map, gamma)
    h, boxes, idx, skipped = roi_features(fmap, proposals, cfg, fused.stride)
    if h is None:
        z = np.zeros((0, cfg.num_classes + 1), dtype=fmap.dtype)
        return ROIOutput(Tensor(z), Tensor(np.zeros((0, 4), dtype=fmap.dtype)), boxes, idx, skipped)
    if "fc.w" in params:
        h = ag.silu(ag.matmul(h, params["fc.w"]) + params["fc.b"])
    logits = ag.matmul(h, params["cls.w"]) + params["cls.b"]
    deltas = ag.matmul(h, params["box.w"]) + params["box.b"]
    return ROIOutput(logits, deltas, boxes, idx, skipped)


@dataclass
class Detections:
    boxes: np.ndarray     # (D, 4)
    scores: np.ndarray    # (D,)
    classes: np.ndarray   # (D,) class ids


@dataclass
class ForwardResult:
    fused: FusedFeatures
    rpn: RPNOutput
    proposals: list[Proposals]
    extra: dict = field(default_factory=dict)


class Detector:
    """Parameters plus the forward pieces wired together."""

    def __init__(self, cfg: DetectorConfig, params: DetectorParams, class_ids: tuple[int, ...]):
        if len(class_ids) != cfg.num_classes:
            raise ConfigError(f"{len(class_ids)} class ids for {cfg.num_classes} classes")
        self.cfg = cfg
        self.params = params
        self.class_ids = tuple(int(c) for c in class_ids)
        self._anchors: dict[tuple[int, int], np.ndarray] = {}

    @classmethod
    def create(cls, cfg: DetectorConfig, class_ids, seed: int = 0, dtype=np.float64) -> "Detector":
        return cls(cfg, DetectorParams.init(cfg, np.random.default_rng(seed), dtype), class_ids)

    def anchors(self, h: int, w: int) -> np.ndarray:
        key = (h, w)
        if key not in self._anchors:
            self._anchors[key] = make_anchors(h // 4, w // 4, 4, self.cfg.anchor_scales)
        return self._anchors[key]

    def features(self, images: Tensor) -> FusedFeatures:
        return fuse_stages(toy_backbone(images, self.params.backbone), self.params.fusion, self.cfg.fusion)

    def forward(self, images: Tensor, eta: float | None = 1.0, top_k: int | None = None) -> ForwardResult:
        H, W = images.shape[-2:]
        fused = self.features(images)
        rpn, props = rpn_forward(fused, self.anchors(H, W), self.params.rpn, self.cfg, (H, W), eta, top_k)
        return ForwardResult(fused, rpn, props)

    def detect(self, images: np.ndarray) -> list[Detections]:
        """Inference: proposals, ROI scores, per-class NMS, top ``max_dets``."""
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        dtype = self.params.backbone["conv0.w"].dtype
        with ag.no_grad():
            fr = self.forward(Tensor(images.astype(dtype)))
            roi = roi_head(fr.fused, [p.boxes for p in fr.proposals], self.params.roi, self.cfg)
        H, W = images.shape[-2:]
        probs = roi.probs
        refined = clip_boxes(roi.refined(), H, W)
        out = []
        for b in range(images.shape[0]):
            sel = np.nonzero(roi.image_index == b)[0]
            boxes, scores, classes = [], [], []
            for label, cid in enumerate(self.class_ids, start=1):
                s = probs[sel, label]
                bx = refined[sel]
                valid = (bx[:, 2] > bx[:, 0]) & (bx[:, 3] > bx[:, 1])
                if not valid.any():
                    continue
                k = nms(bx[valid], s[valid], self.cfg.det_nms)
                boxes.append(bx[valid][k])
                scores.append(s[valid][k])
                classes.append(np.full(len(k), cid))
            if boxes:
                boxes, scores, classes = np.concatenate(boxes), np.concatenate(scores), np.concatenate(classes)
                order = descending_order(scores)[: self.cfg.max_dets]
                out.append(Detections(boxes[order], scores[order], classes[order]))
            else:
                out.append(Detections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)))
        return out

    def best_box(self, dets: Detections, cls: int) -> np.ndarray | None:
        m = dets.classes == cls
        if not m.any():
            return None
        i = np.nonzero(m)[0][np.argmax(dets.scores[m])]
        return dets.boxes[i]


def detector_config_for(fusion: FusionConfig, num_classes: int, **kw) -> DetectorConfig:
    return replace(DetectorConfig(fusion=fusion, num_classes=num_classes), **kw)
