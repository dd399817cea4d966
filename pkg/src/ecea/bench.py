"""Wall-clock timing of attention layers."""

from __future__ import annotations

import time

import numpy as np

from .attention import EAConfig, EALayerParams, ea_forward, flop_count
from .autograd import Tensor, no_grad


def _setup(cfg: EAConfig, h: int, w: int, seed: int, offset_scale: float):
    rng = np.random.default_rng(seed)
    params = EALayerParams.init(cfg, rng)
    params.w_offset.data = rng.standard_normal(params.w_offset.shape) * offset_scale
    return Tensor(rng.standard_normal((cfg.channels, h, w))), params


def benchmark_layers(cfgs: list[EAConfig], h: int, w: int, repeats: int = 100, seed: int = 0,
                     offset_scale: float = 0.3) -> list[dict]:
    """Median forward time of one layer per config on a random ``C x h x w`` map.

    Configs are timed round-robin, one forward each per repeat, so machine drift
    lands on all of them alike instead of skewing their ratio.
    """
    cases = [_setup(cfg, h, w, seed, offset_scale) for cfg in cfgs]
    times = [[] for _ in cfgs]
    with no_grad():
        for cfg, (x, params) in zip(cfgs, cases):
            ea_forward(x, params, cfg)  # warm-up
        for _ in range(repeats):
            for i, (cfg, (x, params)) in enumerate(zip(cfgs, cases)):
                t0 = time.perf_counter()
                ea_forward(x, params, cfg)
                times[i].append(time.perf_counter() - t0)
    return [
        {"channels": cfg.channels, "heads": cfg.heads, "points": cfg.points, "height": h, "width": w,
         "median_seconds": float(np.median(t)), "flops": flop_count(cfg, h, w)}
        for cfg, t in zip(cfgs, times)
    ]


def benchmark_layer(cfg: EAConfig, h: int, w: int, repeats: int = 100, seed: int = 0,
                    offset_scale: float = 0.3) -> dict:
    """Median forward time of one layer on a random ``C x h x w`` map."""
    return benchmark_layers([cfg], h, w, repeats, seed, offset_scale)[0]
