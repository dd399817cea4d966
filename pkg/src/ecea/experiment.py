"""Experiment runner: generate, train, evaluate, and write artifacts.

Output layout of :func:`run_experiment`::

    out/report.json, report.txt, loss.csv      aggregate over seeds
    out/seed_<s>/report.json, report.txt, loss.csv
    out/seed_<s>/ckpt/base.bin, fsod.bin
    out/seed_<s>/traces/<stage>_layer<l>.csv
    out/seed_<s>/heatmaps/<stage>_layer<l>.pgm
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from .attention import AttentionTrace, EAConfig
from .checkpoint import config_hash
from .config import ExperimentConfig, build, with_value
from .data import SplitSpec, generate_part_whole_dataset, write_pnm
from .errors import ConfigError, DivergenceError
from .fusion import FusionConfig, stage_ablation_mode
from .gradcheck import GradCheckReport, grad_check
from .metrics import EvalReport, evaluate
from .model import Detector, DetectorConfig
from .train import (TrainConfig, baseline_config, detection_loss, load_detector_state, run_base_stage, run_two_stage,
                    save_detector)

log = logging.getLogger(__name__)

SCALARS = ("nap50", "bap50", "mean_iou", "coverage", "probe_coverage")
STAGE_SUBSETS = (("s3",), ("s4",), ("s5",), ("s4", "s5"), ("s3", "s4", "s5"))
LOSS_FIELDS = ("seed", "stage", "step", "total", "rpn_obj", "rpn_box", "roi_cls", "roi_box", "grad_norm")


# -- artifacts ---------------------------------------------------------------

def splat(trace: AttentionTrace, batch_index: int = 0) -> np.ndarray:
    """Accumulate attention weights onto the ``(H, W)`` grid by bilinear splatting.

    Locations are clamped to the grid as in sampling, so the map receives the
    weight of every tap and sums to the number of (query, head) pairs.
    """
    loc = trace.locations if trace.locations.ndim == 4 else trace.locations[batch_index]
    wts = trace.weights if trace.weights.ndim == 3 else trace.weights[batch_index]
    H, W = trace.height, trace.width
    y = np.clip(loc[..., 0].reshape(-1), 0, H - 1)
    x = np.clip(loc[..., 1].reshape(-1), 0, W - 1)
    w = wts.reshape(-1).astype(np.float64)
    y0 = np.minimum(np.floor(y).astype(np.int64), H - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), W - 1)
    fy, fx = y - y0, x - x0
    y1, x1 = np.minimum(y0 + 1, H - 1), np.minimum(x0 + 1, W - 1)
    out = np.zeros(H * W)
    for yy, xx, k in ((y0, x0, (1 - fy) * (1 - fx)), (y0, x1, (1 - fy) * fx),
                      (y1, x0, fy * (1 - fx)), (y1, x1, fy * fx)):
        np.add.at(out, yy * W + xx, w * k)
    return out.reshape(H, W)


def to_gray(heat: np.ndarray) -> np.ndarray:
    """Normalize to ``[0, 255]`` uint8 by the layer maximum (all-zero stays zero)."""
    top = float(heat.max()) if heat.size else 0.0
    if top <= 0:
        return np.zeros(heat.shape, dtype=np.uint8)
    return np.clip(np.rint(heat / top * 255), 0, 255).astype(np.uint8)


def attention_traces(det: Detector, image: np.ndarray) -> dict[str, list[AttentionTrace]]:
    dtype = det.params.backbone["conv0.w"].dtype
    with ag.no_grad():
        fused = det.features(ag.Tensor(np.asarray(image, dtype=dtype)[None]))
    return fused.traces


def write_attention_artifacts(det: Detector, image: np.ndarray, out_dir, traces: bool = True,
                              heatmaps: bool = True) -> list[Path]:
    out_dir = Path(out_dir)
    written = []
    for stage, layers in sorted(attention_traces(det, image).items()):
        for tr in layers:
            stem = f"{stage}_layer{tr.layer}"
            if traces:
                p = out_dir / "traces" / f"{stem}.csv"
                p.parent.mkdir(parents=True, exist_ok=True)
                with open(p, "w", newline="") as f:
                    w = csv.writer(f)
                    w.writerow(["layer", "qy", "qx", "head", "point", "y", "x", "weight"])
                    w.writerows(tr.rows())
                written.append(p)
            if heatmaps:
                p = out_dir / "heatmaps" / f"{stem}.pgm"
                p.parent.mkdir(parents=True, exist_ok=True)
                write_pnm(p, to_gray(splat(tr)))
                written.append(p)
    return written


def write_loss_csv(path, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=LOSS_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)
    return path


def _write_report(out_dir: Path, payload: dict, text: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out_dir / "report.txt").write_text(text + "\n")


def checkpoint_roundtrip(det: Detector, path, images: np.ndarray) -> bool:
    """Save, reload into a fresh detector, and compare parameters and detections bit for bit."""
    save_detector(path, det)
    fresh = Detector.create(det.cfg, det.class_ids, seed=0, dtype=det.params.backbone["conv0.w"].dtype)
    load_detector_state(path, fresh)
    a, b = det.params.state(), fresh.params.state()
    if a.keys() != b.keys() or any(a[k].tobytes() != b[k].tobytes() or a[k].dtype != b[k].dtype for k in a):
        return False
    for da, db in zip(det.detect(images), fresh.detect(images)):
        for f in ("boxes", "scores", "classes"):
            if getattr(da, f).tobytes() != getattr(db, f).tobytes():
                return False
    return True


def pipeline_grad_check(seed: int = 0, image_size: int = 32, ea: EAConfig | None = None,
                        max_coords: int | None = 12, backbone_kernel: int = 2,
                        offset_scale: float = 0.3) -> GradCheckReport:
    """Finite-difference check of the full detection loss (backbone, attention
    stacks, fusion, RPN and ROI heads) in float64 with eta = gamma = 1.

    Offset weights start at zero, which puts every ring point of the first head
    on an integer grid position where bilinear sampling has a kink; they are
    randomized first so the check runs at a generic point.
    """
    ea = ea or EAConfig(channels=8, points=4, heads=2, layers=2)
    spec = SplitSpec(base_per_class=1, test_per_class=1, probe_per_class=1, image_size=image_size)
    ds = generate_part_whole_dataset(spec, seed)
    dcfg = DetectorConfig(fusion=FusionConfig(ea=ea), num_classes=spec.num_classes, backbone_kernel=backbone_kernel)
    det = Detector.create(dcfg, spec.all_classes, seed=seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 5])
    params = det.params.named_tensors()
    for name, t in params.items():
        if name.endswith("w_offset"):
            t.data = offset_scale * rng.standard_normal(t.shape)
    samples = ds.base_train[:1]
    # ROI boxes are graph constants, so they are pinned at the base point
    fwd: dict = {}
    detection_loss(det, samples, 1.0, 1.0, 1.0, np.random.default_rng(seed), 0, forward=fwd)
    rois = fwd["rois"]

    def loss(*_):
        return detection_loss(det, samples, 1.0, 1.0, 1.0, np.random.default_rng(seed), 0, rois=rois).total

    return grad_check(loss, list(params.values()), h=1e-5, tol=1e-4, names=list(params),
                      max_coords=max_coords, seed=seed)


# -- aggregation -------------------------------------------------------------

def summarize(reports: list[EvalReport]) -> dict:
    """Mean and population std of each scalar metric over runs (absent values skipped)."""
    out = {}
    for name in SCALARS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[name] = {"mean": float(np.mean(vals)) if vals else None,
                     "std": float(np.std(vals)) if vals else None, "n": len(vals)}
    return out


def summary_table(summary: dict, header: str = "") -> str:
    lines = [header] if header else []
    for name, s in summary.items():
        if s["mean"] is None:
            lines.append(f"{name:15s}   n/a")
        else:
            lines.append(f"{name:15s} {s['mean']:.4f} +- {s['std']:.4f} (n={s['n']})")
    return "\n".join(lines)


# -- single experiment -------------------------------------------------------

@dataclass
class ExperimentResult:
    out_dir: Path | None
    reports: list[EvalReport]
    summary: dict
    seeds: list[int]
    wall: float
    config_hash: str
    loss_rows: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"config_hash": self.config_hash, "seeds": self.seeds, "wall_seconds": self.wall,
                "summary": self.summary, "runs": [r.to_dict() for r in self.reports]}


def resolve(cfg: ExperimentConfig, seed: int | None = None, mode: str | None = None,
            shots: int | None = None, runs: int | None = None) -> ExperimentConfig:
    """Apply command-line overrides through the same validation as the file."""
    raw = cfg.raw
    if seed is not None:
        raw = with_value(raw, "train.seed", seed)
    if mode is not None:
        raw = with_value(raw, "split.mode", mode)
    if shots is not None:
        raw = with_value(raw, "split.shots", shots)
    if runs is not None:
        raw = with_value(raw, "runs", runs)
    return build(raw)


def run_seed(cfg: ExperimentConfig, seed: int, out_dir: Path | None) -> tuple[EvalReport, list[dict]]:
    tcfg = replace(cfg.train, seed=seed)
    t0 = time.perf_counter()
    dataset = generate_part_whole_dataset(cfg.split, seed)
    art = cfg.artifacts
    ckpt_out = out_dir if (out_dir is not None and art.get("checkpoints", True)) else None
    try:
        res = run_two_stage(tcfg, cfg.split, dataset, out_dir=ckpt_out)
    except DivergenceError as e:
        if out_dir is not None:
            write_loss_csv(out_dir / "loss.csv", [{"seed": seed, **r} for r in e.losses])
        raise
    rows = [{"seed": seed, **r} for r in res.loss_rows]
    report = res.metrics["novel"]
    report.meta.update(wall_seconds=round(time.perf_counter() - t0, 3), seed=seed,
                       shots=cfg.split.shots, config_hash=config_hash(cfg.raw))
    if out_dir is not None:
        write_loss_csv(out_dir / "loss.csv", rows)
        if art.get("traces", True) or art.get("heatmaps", True):
            probe = dataset.novel_test[0].image if dataset.novel_test else dataset.base_test[0].image
            write_attention_artifacts(res.fsod, probe, out_dir, art.get("traces", True), art.get("heatmaps", True))
        _write_report(out_dir, {"seed": seed, "novel": report.to_dict(), "base": res.metrics["base"].to_dict()},
                      report.table())
    return report, rows


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> ExperimentResult:
    """``cfg.runs`` seeds starting at ``cfg.train.seed``; mean and std over seeds."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    seeds = [cfg.train.seed + i for i in range(cfg.runs)]
    reports, rows = [], []
    for s in seeds:
        sd = out / f"seed_{s}" if out is not None else None
        try:
            r, lr = run_seed(cfg, s, sd)
        except DivergenceError:
            if out is not None:
                write_loss_csv(out / "loss.csv", rows)
            raise
        reports.append(r)
        rows.extend(lr)
    res = ExperimentResult(out, reports, summarize(reports), seeds, time.perf_counter() - t0,
                           config_hash(cfg.raw), rows)
    if out is not None:
        write_loss_csv(out / "loss.csv", rows)
        payload = res.to_dict()
        payload["config"] = cfg.raw
        text = summary_table(res.summary, f"mode {cfg.split.mode}  shots {cfg.split.shots}  seeds {seeds}")
        _write_report(out, payload, text)
    return res


# -- sweeps ------------------------------------------------------------------

def _label(key: str, value) -> str:
    v = "+".join(map(str, value)) if isinstance(value, list) else str(value)
    return f"{key.split('.')[-1]}={v}"


def _sweep_entry(args) -> tuple[int, dict]:
    index, raw, key, value, out_dir = args
    cfg = build(with_value(raw, key, value))
    res = run_experiment(cfg, out_dir)
    row = {"key": key, "value": value, "label": _label(key, value), "config_hash": res.config_hash,
           "wall_seconds": res.wall}
    for name, s in res.summary.items():
        row[f"{name}_mean"], row[f"{name}_std"] = s["mean"], s["std"]
    return index, row


def sweep(cfg: ExperimentConfig, key: str, values, out_dir=None, workers: int = 1) -> list[dict]:
    """One row per value in the given order, whatever order entries finish in.

    Each entry owns ``out_dir/<key>=<value>/``. Values are validated up front so
    a bad value fails before any training starts.
    """
    values = list(values)
    problems = []
    for v in values:
        try:
            build(with_value(cfg.raw, key, v))
        except ConfigError as e:
            problems.extend(f"{_label(key, v)}: {p}" for p in e.problems)
    if problems:
        raise ConfigError(problems)
    out = Path(out_dir) if out_dir is not None else None
    jobs = [(i, cfg.raw, key, v, out / _label(key, v) if out is not None else None) for i, v in enumerate(values)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            done = list(pool.map(_sweep_entry, jobs))
    else:
        done = [_sweep_entry(j) for j in jobs]
    rows = [row for _, row in sorted(done, key=lambda t: t[0])]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "sweep.json").write_text(json.dumps(rows, indent=2) + "\n")
        cols = list(rows[0].keys())
        with open(out / "sweep.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=cols)
            w.writeheader()
            for r in rows:
                w.writerow({**r, "value": json.dumps(r["value"])})
        (out / "sweep.txt").write_text(sweep_table(rows) + "\n")
    return rows


def sweep_table(rows: list[dict], metric: str = "mean_iou") -> str:
    lines = [f"{'value':>14s}  {'nAP50':>7s}  {'IoU':>7s}  {'cover':>7s}"]
    for r in rows:
        def f(name):
            v = r.get(f"{name}_mean")
            return "    n/a" if v is None else f"{v:7.4f}"
        lines.append(f"{r['label']:>14s}  {f('nap50')}  {f('mean_iou')}  {f('coverage')}")
    return "\n".join(lines)


def curve_shape(values, tol: float = 0.0) -> str:
    """Classify a curve: increasing, plateau (rise then stay within ``tol`` of the
    maximum), peaked (rise then fall), decreasing, flat, or irregular."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2 or np.ptp(v) <= tol:
        return "flat"
    k = int(np.argmax(v))
    if np.any(np.diff(v[:k + 1]) < -tol):
        return "irregular"
    if k == len(v) - 1:
        return "increasing"
    if np.all(v[k] - v[k + 1:] <= tol):
        return "plateau"
    if np.all(np.diff(v[k:]) <= tol):
        return "decreasing" if k == 0 else "peaked"
    return "irregular"


# -- studies used by the acceptance suite --------------------------------------

@dataclass
class ArmResult:
    """Novel metrics of one (arm, seed, shots) cell plus the trained base detector."""
    arm: str
    seed: int
    shots: int
    report: EvalReport


def _spec_for(split: SplitSpec, shots: int) -> SplitSpec:
    return replace(split, shots=shots)


def shots_study(tcfg: TrainConfig, split: SplitSpec, seed: int, shots=(1, 5), arm: str = "ecea",
                base: tuple | None = None) -> tuple[list[ArmResult], tuple]:
    """Train one base stage and fine-tune it once per K.

    The base split does not depend on K, so the base stage is shared.
    """
    tcfg = replace(tcfg, seed=seed)
    if base is None:
        base = run_base_stage(tcfg, generate_part_whole_dataset(_spec_for(split, shots[0]), seed))
    out = []
    for k in shots:
        spec = _spec_for(split, k)
        ds = generate_part_whole_dataset(spec, seed)
        res = run_two_stage(tcfg, spec, ds, base=base, evaluate_stages=False)
        out.append(ArmResult(arm, seed, k, evaluate(res.fsod, ds, spec.mode, meta={"seed": seed, "arm": arm})))
    return out, base


def transfer_study(tcfg: TrainConfig, split: SplitSpec, seeds, shots=(1, 5), bases: dict | None = None) -> dict:
    """ECEA against the projection-only baseline; returns per-cell results and mean gaps.

    ``bases`` (optional) receives the trained ECEA base stages keyed by seed.
    """
    cells: list[ArmResult] = []
    for s in seeds:
        for arm, cfg in (("ecea", tcfg), ("baseline", baseline_config(tcfg))):
            res, base = shots_study(cfg, split, s, shots, arm)
            cells.extend(res)
            if arm == "ecea" and bases is not None:
                bases[s] = base

    def mean(arm, metric):
        return float(np.mean([getattr(c.report, metric) for c in cells if c.arm == arm]))

    gaps = {m: mean("ecea", m) - mean("baseline", m) for m in ("mean_iou", "coverage", "probe_coverage", "nap50")}
    return {"cells": cells, "gaps": gaps,
            "ecea": {m: mean("ecea", m) for m in gaps}, "baseline": {m: mean("baseline", m) for m in gaps}}


def stage_study(tcfg: TrainConfig, split: SplitSpec, seeds, shots=(1, 5), subsets=STAGE_SUBSETS,
                bases: dict | None = None) -> dict:
    """Novel mean IoU per attention stage subset, averaged over seeds and K.

    ``bases`` may hold already trained full-fusion base stages keyed by seed.
    """
    full = tuple(tcfg.fusion.stages)
    table = {}
    for sub in subsets:
        cfg = replace(tcfg, fusion=stage_ablation_mode(tcfg.fusion, sub))
        vals = []
        for s in seeds:
            base = bases.get(s) if (bases and tuple(sub) == full) else None
            res, _ = shots_study(cfg, split, s, shots, "+".join(sub), base)
            vals.extend(r.report.mean_iou for r in res)
        table["+".join(sub)] = float(np.mean(vals))
    ranking = sorted(table, key=lambda k: -table[k])
    return {"mean_iou": table, "ranking": ranking}
