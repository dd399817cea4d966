"""JSON experiment configuration with schema validation.

Sections mirror the dataclasses they build::

    {"split": SplitSpec, "train": TrainConfig scalars, "ea": EAConfig,
     "fusion": {stages, use_attention, positional_encoding},
     "detector": DetectorConfig scalars, "runs": int, "artifacts": {...}}

Every key is optional; missing keys take the defaults printed by
:func:`default_config`. Unknown keys and wrongly typed values are reported
together in one :class:`ConfigError`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from .attention import EAConfig
from .data import SplitSpec
from .errors import ConfigError
from .fusion import FusionConfig
from .model import DetectorConfig
from .train import TrainConfig

# desk defaults for the part-to-whole task
DEFAULT_EA = {"channels": 16, "points": 4, "heads": 4, "layers": 3}
DEFAULT_DETECTOR = {"backbone_kernel": 2}
DEFAULT_ARTIFACTS = {"heatmaps": True, "traces": True, "checkpoints": True}
DEFAULT_RUNS = 5

# short names for sweeps: ``--param layers=1,2,3``
ALIASES = {
    "layers": "ea.layers", "points": "ea.points", "heads": "ea.heads", "channels": "ea.channels",
    "stages": "fusion.stages", "attention": "fusion.use_attention",
    "lam": "train.lam", "eta": "train.base_eta", "gamma": "train.base_gamma",
    "novel_eta": "train.novel_eta", "novel_gamma": "train.novel_gamma",
    "shots": "split.shots", "mode": "split.mode", "seed": "train.seed",
    "base_steps": "train.base_steps", "novel_steps": "train.novel_steps",
}

_SKIP = {"train": {"fusion", "detector"}, "detector": {"fusion", "num_classes"}}


def _section_defaults(cls, overrides=None, skip=()) -> dict:
    out = {}
    inst = cls()
    for f in fields(cls):
        if f.name in skip:
            continue
        v = getattr(inst, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    out.update(overrides or {})
    return out


def default_config() -> dict:
    return {
        "split": _section_defaults(SplitSpec),
        "train": _section_defaults(TrainConfig, skip=_SKIP["train"]),
        "ea": _section_defaults(EAConfig, DEFAULT_EA),
        "fusion": {"stages": ["s3", "s4", "s5"], "use_attention": True, "positional_encoding": True},
        "detector": _section_defaults(DetectorConfig, DEFAULT_DETECTOR, skip=_SKIP["detector"]),
        "runs": DEFAULT_RUNS,
        "artifacts": dict(DEFAULT_ARTIFACTS),
    }


def _type_ok(default, value) -> bool:
    if default is None:
        return value is None or isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    if isinstance(default, dict):
        return isinstance(value, dict)
    return True


def merge(base: dict, override: dict, problems: list[str], path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}{k}"
        if k not in base:
            problems.append(f"unknown key {where!r}")
            continue
        d = base[k]
        if isinstance(d, dict) and k != "detector_extra":
            if not isinstance(v, dict):
                problems.append(f"{where}: expected an object, got {type(v).__name__}")
                continue
            out[k] = merge(d, v, problems, where + ".")
        elif not _type_ok(d, v):
            problems.append(f"{where}: expected {type(d).__name__}, got {type(v).__name__} ({v!r})")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    split: SplitSpec
    train: TrainConfig
    runs: int
    artifacts: dict
    raw: dict

    @property
    def fusion(self) -> FusionConfig:
        return self.train.fusion


def build(cfg: dict) -> ExperimentConfig:
    """Turn a merged config dict into dataclasses, collecting every problem."""
    problems: list[str] = []

    def attempt(label, fn):
        try:
            return fn()
        except ConfigError as e:
            problems.extend(f"{label}: {p}" for p in e.problems)
        except (TypeError, ValueError) as e:
            problems.append(f"{label}: {e}")
        return None

    sp = dict(cfg["split"])
    sp["base_classes"] = tuple(sp["base_classes"])
    sp["novel_classes"] = tuple(sp["novel_classes"])
    split = attempt("split", lambda: SplitSpec(**sp))
    ea = attempt("ea", lambda: EAConfig(**cfg["ea"]))
    fusion = None
    if ea is not None:
        fu = dict(cfg["fusion"])
        fu["stages"] = tuple(fu["stages"])
        fusion = attempt("fusion", lambda: FusionConfig(ea=ea, **fu))
    det = dict(cfg["detector"])
    det["anchor_scales"] = tuple(det["anchor_scales"])
    if fusion is not None:
        attempt("detector", lambda: DetectorConfig(fusion=fusion, **det))
    tr = dict(cfg["train"])
    tr["freeze_base"] = tuple(tr["freeze_base"])
    tr["freeze_novel"] = tuple(tr["freeze_novel"])
    # train scalars are checked even when the attention section is broken
    train = attempt("train", lambda: TrainConfig(fusion=fusion or FusionConfig(), detector=det, **tr))
    if not isinstance(cfg["runs"], int) or cfg["runs"] < 1:
        problems.append("runs must be a positive integer")
    if problems:
        raise ConfigError(problems)
    return ExperimentConfig(split, train, cfg["runs"], dict(cfg["artifacts"]), cfg)


def from_dict(override: dict | None) -> ExperimentConfig:
    if override is not None and not isinstance(override, dict):
        raise ConfigError("config must be a JSON object")
    problems: list[str] = []
    merged = merge(default_config(), override or {}, problems)
    if problems:
        raise ConfigError(problems)
    return build(merged)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return from_dict(data)


def parse_value(text: str) -> Any:
    """Sweep values: JSON literals, else ``a+b`` lists (for stages), else strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        pass
    if "+" in text:
        return [t for t in text.split("+") if t]
    return text


def parse_param(spec: str) -> tuple[str, list]:
    """``"layers=1,2,3"`` -> ``("ea.layers", [1, 2, 3])``."""
    if "=" not in spec:
        raise ConfigError(f"--param must look like key=v1,v2,...; got {spec!r}")
    key, vals = spec.split("=", 1)
    key = ALIASES.get(key.strip(), key.strip())
    values = [parse_value(v.strip()) for v in vals.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"--param {key} has no values")
    if key == "fusion.stages":
        values = [v if isinstance(v, list) else [v] for v in values]
    return key, values


def with_value(raw: dict, key: str, value) -> dict:
    """Copy of ``raw`` with a dotted key set; unknown keys are a config error."""
    out = copy.deepcopy(raw)
    parts = key.split(".")
    node = out
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = value
    return out
