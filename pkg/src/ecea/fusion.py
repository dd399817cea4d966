"""Three-scale fusion: project, add positional encoding, attend, upsample-add, concat."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .attention import AttentionTrace, EAConfig, EALayerParams, init_stack, stack_forward
from .autograd import Tensor
from .errors import ConfigError, DimensionError

STAGES = ("s3", "s4", "s5")
STRIDES = {"s3": 4, "s4": 8, "s5": 16}


@dataclass
class StageBundle:
    s3: Tensor
    s4: Tensor
    s5: Tensor
    strides: tuple[int, int, int] = (4, 8, 16)

    def __post_init__(self):
        h3, w3 = self.s3.shape[-2:]
        h4, w4 = self.s4.shape[-2:]
        h5, w5 = self.s5.shape[-2:]
        if (h4 * 2, w4 * 2) != (h3, w3) or (h5 * 2, w5 * 2) != (h4, w4):
            raise DimensionError(
                f"stage sizes must halve exactly: {(h3, w3)}, {(h4, w4)}, {(h5, w5)}"
            )
        if tuple(self.strides) != (4, 8, 16):
            raise DimensionError(f"stage strides must be (4, 8, 16), got {self.strides}")

    def __getitem__(self, name: str) -> Tensor:
        return getattr(self, name)


@dataclass
class FusedFeatures:
    map: Tensor
    channels: int
    stride: int = 4
    traces: dict[str, list[AttentionTrace]] = field(default_factory=dict)


@dataclass(frozen=True)
class FusionConfig:
    ea: EAConfig = EAConfig()
    stages: tuple[str, ...] = STAGES
    use_attention: bool = True
    positional_encoding: bool = True

    def __post_init__(self):
        if not self.stages:
            raise ConfigError("stage subset must be non-empty")
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stages {bad}; choose from {STAGES}")
        object.__setattr__(self, "stages", tuple(s for s in STAGES if s in self.stages))

    def attends(self, stage: str) -> bool:
        return self.use_attention and stage in self.stages


def stage_ablation_mode(cfg: FusionConfig, subset) -> FusionConfig:
    """Variant of ``cfg`` that runs attention only on the stages in ``subset``."""
    subset = tuple(subset)
    if not subset:
        raise ConfigError("stage subset must be non-empty")
    return replace(cfg, stages=subset)


def positional_encoding_2d(h: int, w: int, c: int) -> np.ndarray:
    """Fixed sinusoidal ``c x h x w`` encoding.

    The first ``c/2`` channels encode the row, the rest the column, each as
    interleaved ``sin, cos`` pairs over geometric frequencies.
    """
    if c % 4:
        raise ConfigError(f"positional encoding needs channels divisible by 4, got {c}")
    pairs = c // 4
    freqs = 1.0 / (10000.0 ** (np.arange(pairs) / pairs))

    def encode(n):
        ang = np.arange(n)[:, None] * freqs[None, :]
        return np.stack([np.sin(ang), np.cos(ang)], axis=-1).reshape(n, 2 * pairs)

    rows = np.broadcast_to(encode(h)[:, None, :], (h, w, 2 * pairs))
    cols = np.broadcast_to(encode(w)[None, :, :], (h, w, 2 * pairs))
    return np.transpose(np.concatenate([rows, cols], axis=-1), (2, 0, 1)).copy()


def project_stage(s: Tensor, w_proj: Tensor) -> Tensor:
    """Per-location linear map ``C_i -> C`` (a 1x1 convolution without bias)."""
    if s.shape[-3] != w_proj.shape[0]:
        raise DimensionError(f"stage has {s.shape[-3]} channels, projection expects {w_proj.shape[0]}")
    unbatched = s.ndim == 3
    if unbatched:
        s = s.reshape((1,) + s.shape)
    B, Ci, h, w = s.shape
    C = w_proj.shape[1]
    out = ag.matmul(s.transpose(0, 2, 3, 1).reshape(B, h * w, Ci), w_proj)
    out = out.reshape(B, h, w, C).transpose(0, 3, 1, 2)
    return out.reshape(C, h, w) if unbatched else out


@dataclass
class FusionParams:
    proj: dict[str, Tensor]
    stacks: dict[str, list[EALayerParams]]

    @classmethod
    def init(cls, widths: dict[str, int], cfg: FusionConfig, rng: np.random.Generator,
             dtype=np.float64) -> "FusionParams":
        C = cfg.ea.channels
        proj = {
            s: Tensor((rng.standard_normal((widths[s], C)) / math.sqrt(widths[s])).astype(dtype),
                      requires_grad=True)
            for s in STAGES
        }
        stacks = {s: init_stack(cfg.ea, rng, dtype) if cfg.attends(s) else [] for s in STAGES}
        return cls(proj, stacks)

    def named_tensors(self) -> dict[str, Tensor]:
        out = {f"proj.{s}": t for s, t in self.proj.items()}
        for s, layers in self.stacks.items():
            for i, layer in enumerate(layers):
                for k, t in layer.named_tensors().items():
                    out[f"ea.{s}.{i}.{k}"] = t
        return out


def fuse_stages(bundle: StageBundle, params: FusionParams, cfg: FusionConfig) -> FusedFeatures:
    """Fuse the three stages into one ``3C`` map at stride 4.

    ``f4 = up(phi5) + phi4``, ``f3 = up(f4) + phi3``, output
    ``[up4(phi5), up2(f4), f3]``. A stage without attention contributes its
    projection only, and its top-down upsample-add into the next finer level is
    skipped. With ``use_attention`` off every stage is projection-only and the
    full top-down chain is kept.
    """
    C = cfg.ea.channels
    phi, traces = {}, {}
    for s in STAGES:
        p = project_stage(bundle[s], params.proj[s])
        if cfg.attends(s):
            if cfg.positional_encoding:
                h, w = p.shape[-2:]
                p = p + Tensor(positional_encoding_2d(h, w, C).astype(p.dtype))
            p, traces[s] = stack_forward(p, params.stacks[s], cfg.ea, name=f"ea.{s}")
        phi[s] = p

    def feeds(upper: str) -> bool:
        return not cfg.use_attention or upper in cfg.stages

    f4 = phi["s4"] + ag.upsample(phi["s5"], 2) if feeds("s5") else phi["s4"]
    f3 = phi["s3"] + ag.upsample(f4, 2) if feeds("s4") else phi["s3"]
    out = ag.concat_channels([ag.upsample(phi["s5"], 4), ag.upsample(f4, 2), f3])
    return FusedFeatures(out, C, 4, traces)
