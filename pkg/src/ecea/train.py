"""Training: SGD with momentum, one detection step, and the base-then-novel schedule."""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .attention import EAConfig
from .autograd import NumericError, Tensor
from .data import DetectionSample, PartWholeDataset, SplitSpec, generate_part_whole_dataset
from .errors import ConfigError, DivergenceError
from .fusion import FusionConfig
from .losses import LossBreakdown, ROITargets, assign_roi, assign_rpn, loss_total
from .metrics import EvalReport, evaluate
from .model import PARAM_GROUPS, Detector, DetectorConfig, roi_head

log = logging.getLogger(__name__)

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class TrainConfig:
    fusion: FusionConfig = FusionConfig(ea=EAConfig(channels=16, points=4, heads=4, layers=3))
    lam: float = 1.0
    base_eta: float = 0.0
    base_gamma: float = 0.75
    novel_eta: float = 0.0
    novel_gamma: float = 0.01
    lr: float = 0.01
    novel_lr: float | None = None
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 4
    base_steps: int = 1000
    novel_steps: int = 100
    seed: int = 0
    freeze_base: tuple[str, ...] = ()
    freeze_novel: tuple[str, ...] = ("backbone",)
    grad_clip: float = 10.0
    dtype: str = "float32"
    gt_jitter: int = 3
    detector: dict = field(default_factory=dict)   # extra DetectorConfig fields

    def __post_init__(self):
        object.__setattr__(self, "freeze_base", tuple(self.freeze_base))
        object.__setattr__(self, "freeze_novel", tuple(self.freeze_novel))
        problems = []
        for name in ("base_eta", "base_gamma", "novel_eta", "novel_gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                problems.append(f"{name} must be in [0, 1], got {v}")
        if not self.lam > 0:
            problems.append(f"lam must be > 0, got {self.lam}")
        if not self.lr > 0 or (self.novel_lr is not None and not self.novel_lr > 0):
            problems.append("learning rates must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            problems.append(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            problems.append("weight_decay must be >= 0")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.base_steps < 0 or self.novel_steps < 0:
            problems.append("step counts must be >= 0")
        for name in ("freeze_base", "freeze_novel"):
            bad = [g for g in getattr(self, name) if g not in PARAM_GROUPS]
            if bad:
                problems.append(f"{name}: unknown groups {bad}; choose from {PARAM_GROUPS}")
        if self.grad_clip <= 0:
            problems.append("grad_clip must be > 0")
        if self.dtype not in DTYPES:
            problems.append(f"dtype must be one of {sorted(DTYPES)}")
        if self.gt_jitter < 0:
            problems.append("gt_jitter must be >= 0")
        if problems:
            raise ConfigError(problems)

    @property
    def ea(self) -> EAConfig:
        return self.fusion.ea

    def stage(self, name: str) -> dict:
        if name == "base":
            return {"eta": self.base_eta, "gamma": self.base_gamma, "lr": self.lr,
                    "steps": self.base_steps, "freeze": self.freeze_base}
        return {"eta": self.novel_eta, "gamma": self.novel_gamma, "lr": self.novel_lr or self.lr,
                "steps": self.novel_steps, "freeze": self.freeze_novel}


class SGD:
    """``v <- mu v + g + wd * theta``; ``theta <- theta - lr * v``."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float, weight_decay: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grad_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2))
                             for p in self.params.values() if p.grad is not None))

    def step(self, clip: float | None = None) -> float:
        norm = self.grad_norm()
        if not math.isfinite(norm):
            raise NumericError(f"non-finite gradient norm {norm}")
        scale = min(1.0, clip / norm) if clip and norm > 0 else 1.0
        for k, p in self.params.items():
            g = np.zeros_like(p.data) if p.grad is None else p.grad * scale
            v = self.velocity[k]
            v *= self.momentum
            v += g + self.weight_decay * p.data
            p.data = p.data - self.lr * v
        return norm


def stack_batch(samples: list[DetectionSample], dtype) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype)


def _jittered(gt: np.ndarray, n: int, rng: np.random.Generator, hw) -> np.ndarray:
    if not n or not len(gt):
        return np.zeros((0, 4))
    h = gt[:, 2] - gt[:, 0]
    w = gt[:, 3] - gt[:, 1]
    scale = np.stack([h, w, h, w], axis=1)
    out = np.repeat(gt, n, axis=0) + 0.1 * np.repeat(scale, n, axis=0) * rng.standard_normal((len(gt) * n, 4))
    out[:, 0::2] = np.clip(out[:, 0::2], 0, hw[0])
    out[:, 1::2] = np.clip(out[:, 1::2], 0, hw[1])
    return out


def detection_loss(det: Detector, samples: list[DetectionSample], lam: float, eta: float | None,
                   gamma: float | None, rng: np.random.Generator, gt_jitter: int = 0,
                   forward: dict | None = None, rois: list[np.ndarray] | None = None) -> LossBreakdown:
    """Forward one batch and build the combined loss (no backward).

    ``eta``/``gamma`` of ``None`` build the graph without decoupling nodes.
    When ``forward`` is a dict it receives the intermediate results. ROI boxes
    are constants of the graph; passing ``rois`` pins them instead of taking
    the proposals of this forward pass.
    """
    dtype = det.params.backbone["conv0.w"].dtype
    images = Tensor(stack_batch(samples, dtype))
    H, W = images.shape[-2:]
    fr = det.forward(images, eta, top_k=det.cfg.post_nms_train)
    gts = [s.boxes for s in samples]
    labels = [np.array([det.class_ids.index(int(c)) + 1 for c in s.classes]) for s in samples]
    rpn_t = assign_rpn(fr.rpn.anchors, gts, rng)
    if rois is None:
        rois = [np.concatenate([p.boxes, g, _jittered(g, gt_jitter, rng, (H, W))])
                for p, g in zip(fr.proposals, gts)]
    roi = roi_head(fr.fused, rois, det.params.roi, det.cfg, gamma)
    lab = np.zeros(len(roi.boxes), dtype=np.int64)
    deltas = np.zeros((len(roi.boxes), 4))
    for b in range(len(samples)):
        m = roi.image_index == b
        t = assign_roi(roi.boxes[m], gts[b], labels[b])
        lab[m], deltas[m] = t.labels, t.deltas
    if forward is not None:
        forward.update(fused=fr.fused, rpn=fr.rpn, roi=roi, rpn_targets=rpn_t, rois=rois)
    return loss_total(fr.rpn.logits, fr.rpn.deltas, roi.logits, roi.deltas, rpn_t, ROITargets(lab, deltas), lam)


@dataclass
class StageResult:
    name: str
    steps: int
    losses: list[dict]
    wall: float
    diverged: bool = False


class _Frozen:
    """Context that turns off ``requires_grad`` for frozen groups and restores it."""

    def __init__(self, det: Detector, groups):
        self.tensors = [t for g in groups for t in det.params.group(g).values()]

    def __enter__(self):
        self.prev = [t.requires_grad for t in self.tensors]
        for t in self.tensors:
            t.requires_grad = False
            t.grad = None
        return self

    def __exit__(self, *exc):
        for t, r in zip(self.tensors, self.prev):
            t.requires_grad = r
        return False


def trainable_params(det: Detector, frozen) -> dict[str, Tensor]:
    return {k: v for k, v in det.params.named_tensors().items() if k.split(".", 1)[0] not in frozen}


def _batches(n: int, batch: int, steps: int, rng: np.random.Generator):
    """Epoch-wise shuffled index batches, wrapping across epochs."""
    buf = np.zeros(0, dtype=np.int64)
    for _ in range(steps):
        while len(buf) < batch:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:batch]
        buf = buf[batch:]


def train_stage(det: Detector, samples: list[DetectionSample], tcfg: TrainConfig, stage: str,
                rng: np.random.Generator, ckpt_dir: Path | None = None, log_every: int = 50) -> StageResult:
    """Run one stage in place on ``det``. On a non-finite loss or gradient the
    parameters are restored to the last good state (written to ``ckpt_dir``
    when given) and :class:`DivergenceError` is raised."""
    st = tcfg.stage(stage)
    losses: list[dict] = []
    t0 = time.perf_counter()
    if st["steps"] == 0 or not samples:
        return StageResult(stage, 0, losses, 0.0)
    with _Frozen(det, st["freeze"]):
        params = trainable_params(det, st["freeze"])
        opt = SGD(params, st["lr"], tcfg.momentum, tcfg.weight_decay)
        good = det.params.state()
        for step, idx in enumerate(_batches(len(samples), tcfg.batch_size, st["steps"], rng)):
            opt.zero_grad()
            try:
                lb = detection_loss(det, [samples[i] for i in idx], tcfg.lam, st["eta"], st["gamma"],
                                    rng, tcfg.gt_jitter)
                if not math.isfinite(lb.total.item()):
                    raise NumericError(f"loss is {lb.total.item()}")
                lb.total.backward()
                norm = opt.step(tcfg.grad_clip)
                for k, p in params.items():
                    if not np.all(np.isfinite(p.data)):
                        raise NumericError(f"parameter {k} became non-finite")
            except NumericError as e:
                det.params.load_state(good)
                path = None
                if ckpt_dir is not None:
                    path = save_detector(Path(ckpt_dir) / f"{stage}_last_good.bin", det, tcfg,
                                         {"stage": stage, "step": step, "diverged": True})
                losses.append({"stage": stage, "step": step, "total": float("nan")})
                raise DivergenceError(f"{stage} stage diverged at step {step}: {e}", path, losses) from e
            row = {"stage": stage, "step": step, **lb.values(), "grad_norm": norm}
            losses.append(row)
            if (step + 1) % 25 == 0:
                good = det.params.state()
            if log_every and (step + 1) % log_every == 0:
                log.info("%s step %d loss %.4f", stage, step + 1, row["total"])
    return StageResult(stage, st["steps"], losses, time.perf_counter() - t0)


def save_detector(path, det: Detector, tcfg: TrainConfig | None = None, meta: dict | None = None,
                  optimizer: dict | None = None) -> Path:
    m = {"class_ids": list(det.class_ids), "detector": asdict(det.cfg)}
    if tcfg is not None:
        m["train"] = asdict(tcfg)
        m["config_hash"] = ckpt_io.config_hash(asdict(tcfg))
    m.update(meta or {})
    return ckpt_io.save(path, ckpt_io.Checkpoint(det.params.state(), optimizer or {}, m))


def load_detector_state(path, det: Detector) -> ckpt_io.Checkpoint:
    """Load parameters into ``det``; the file is fully verified before anything is written."""
    ck = ckpt_io.load(path)
    det.params.load_state(ck.params)
    return ck


def clone_detector(det: Detector) -> Detector:
    new = Detector(det.cfg, copy.deepcopy(det.params), det.class_ids)
    for t in new.params.named_tensors().values():
        t.grad = None
        t.record = None
    return new


@dataclass
class TwoStageResult:
    base: Detector
    fsod: Detector
    metrics: dict[str, EvalReport]
    stages: list[StageResult]
    dataset: PartWholeDataset
    checkpoints: dict[str, Path] = field(default_factory=dict)

    @property
    def loss_rows(self) -> list[dict]:
        return [r for s in self.stages for r in s.losses]


def build_detector(tcfg: TrainConfig, spec: SplitSpec, **det_kw) -> Detector:
    det_kw = {**tcfg.detector, **det_kw}
    dcfg = DetectorConfig(fusion=tcfg.fusion, num_classes=spec.num_classes, **det_kw)
    return Detector.create(dcfg, spec.all_classes, seed=tcfg.seed, dtype=DTYPES[tcfg.dtype])


def run_base_stage(tcfg: TrainConfig, dataset: PartWholeDataset, ckpt_dir=None,
                   **det_kw) -> tuple[Detector, StageResult]:
    det = build_detector(tcfg, dataset.spec, **det_kw)
    rng = np.random.default_rng([tcfg.seed, 11])
    res = train_stage(det, dataset.base_train, tcfg, "base", rng, ckpt_dir)
    return det, res


def run_novel_stage(tcfg: TrainConfig, dataset: PartWholeDataset, base: Detector,
                    ckpt_dir=None) -> tuple[Detector, StageResult]:
    det = clone_detector(base)
    rng = np.random.default_rng([tcfg.seed, 13, dataset.spec.shots])
    res = train_stage(det, dataset.finetune_set(), tcfg, "novel", rng, ckpt_dir)
    return det, res


def run_two_stage(tcfg: TrainConfig, spec: SplitSpec, dataset: PartWholeDataset | None = None,
                  out_dir=None, base: tuple[Detector, StageResult] | None = None,
                  evaluate_stages: bool = True, **det_kw) -> TwoStageResult:
    """Base training on D_b, then fine-tuning on D_n (FSOD) or the balanced D_f (G-FSOD).

    ``base`` lets callers reuse an already trained base stage (it is cloned, not
    modified). Checkpoints ``base.bin`` and ``fsod.bin`` go to ``out_dir/ckpt``.
    """
    if dataset is None:
        dataset = generate_part_whole_dataset(spec, tcfg.seed)
    ckpt_dir = Path(out_dir) / "ckpt" if out_dir is not None else None
    if base is None:
        base = run_base_stage(tcfg, dataset, ckpt_dir, **det_kw)
    base_det, base_res = base
    paths = {}
    if ckpt_dir is not None:
        paths["base"] = save_detector(ckpt_dir / "base.bin", base_det, tcfg, {"stage": "base"})
    fsod_det, novel_res = run_novel_stage(tcfg, dataset, base_det, ckpt_dir)
    if ckpt_dir is not None:
        paths["fsod"] = save_detector(ckpt_dir / "fsod.bin", fsod_det, tcfg, {"stage": "novel"})
    metrics = {}
    if evaluate_stages:
        meta = {"seed": tcfg.seed, "config_hash": ckpt_io.config_hash(asdict(tcfg))}
        metrics["base"] = evaluate(base_det, dataset, "gfsod", meta={**meta, "stage": "base"})
        metrics["novel"] = evaluate(fsod_det, dataset, spec.mode, meta={**meta, "stage": "novel"})
    return TwoStageResult(base_det, fsod_det, metrics, [base_res, novel_res], dataset, paths)


def baseline_config(tcfg: TrainConfig) -> TrainConfig:
    """Same run without attention: projection-only fusion."""
    return replace(tcfg, fusion=replace(tcfg.fusion, use_attention=False))
