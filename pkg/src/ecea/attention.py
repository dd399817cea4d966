"""Extensible attention: per-query sparse attention over N learned offset points.

Each query location predicts N offsets per head, bilinearly samples the map at
those points, scores every sample against its own query projection and mixes
the sampled value projections with the softmax of those scores. Heads are
joined by one block output projection, followed by a residual connection and
layer norm. Layers stack sequentially.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import NumericError, Tensor
from .errors import ConfigError, DimensionError


@dataclass(frozen=True)
class EAConfig:
    channels: int = 64
    points: int = 4
    heads: int = 8
    layers: int = 7
    sampling: str = "bilinear"
    # "sampled": keys/values projected from the sampled points; "query": literal x_q projections
    kv_source: str = "sampled"
    scale_logits: bool = True
    layer_norm: bool = True
    ring_radius: float = 1.0

    def __post_init__(self):
        problems = []
        if self.channels < 1 or self.heads < 1 or self.channels % self.heads:
            problems.append(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.points < 1:
            problems.append(f"points must be >= 1, got {self.points}")
        if self.layers < 1:
            problems.append(f"layers must be >= 1, got {self.layers}")
        if self.sampling not in ("bilinear", "nearest"):
            problems.append(f"sampling must be 'bilinear' or 'nearest', got {self.sampling!r}")
        if self.kv_source not in ("sampled", "query"):
            problems.append(f"kv_source must be 'sampled' or 'query', got {self.kv_source!r}")
        if problems:
            raise ConfigError(problems)

    @property
    def head_dim(self) -> int:
        return self.channels // self.heads


def ring_offsets(cfg: EAConfig) -> np.ndarray:
    """Fixed ``(M, N, 2)`` starting offsets: N points on a ring, rotated per head."""
    M, N = cfg.heads, cfg.points
    if N == 1:
        return np.zeros((M, 1, 2))
    ang = 2 * np.pi * (np.arange(N)[None, :] / N + np.arange(M)[:, None] / (M * N))
    return cfg.ring_radius * np.stack([np.sin(ang), np.cos(ang)], axis=-1)


@dataclass
class EALayerParams:
    w_query: Tensor   # C x C
    w_offset: Tensor  # M x N x C x 2
    w_key: Tensor     # M x N x C x d
    w_value: Tensor   # M x N x C x d
    w_out: Tensor     # C x C
    ln_scale: Tensor  # C
    ln_shift: Tensor  # C

    @classmethod
    def init(cls, cfg: EAConfig, rng: np.random.Generator, dtype=np.float64) -> "EALayerParams":
        C, M, N, d = cfg.channels, cfg.heads, cfg.points, cfg.head_dim
        s = 1.0 / math.sqrt(C)

        def p(arr):
            return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        return cls(
            w_query=p(rng.standard_normal((C, C)) * s),
            w_offset=p(np.zeros((M, N, C, 2))),
            w_key=p(rng.standard_normal((M, N, C, d)) * s),
            w_value=p(rng.standard_normal((M, N, C, d)) * s),
            w_out=p(rng.standard_normal((C, C)) * s),
            ln_scale=p(np.ones(C)),
            ln_shift=p(np.zeros(C)),
        )

    def named_tensors(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def check(self, cfg: EAConfig) -> None:
        C, M, N, d = cfg.channels, cfg.heads, cfg.points, cfg.head_dim
        expected = {
            "w_query": (C, C), "w_offset": (M, N, C, 2), "w_key": (M, N, C, d),
            "w_value": (M, N, C, d), "w_out": (C, C), "ln_scale": (C,), "ln_shift": (C,),
        }
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise DimensionError(f"{name} has shape {got}, config expects {shape}")


@dataclass
class AttentionTrace:
    """Sampled ``(y, x)`` locations ``(..., Q, M, N, 2)`` and weights ``(..., Q, M, N)``."""

    height: int
    width: int
    locations: np.ndarray
    weights: np.ndarray
    layer: int = 0

    def rows(self, batch_index: int = 0):
        """Yield ``(layer, qy, qx, head, point, y, x, weight)`` records."""
        loc = self.locations if self.locations.ndim == 4 else self.locations[batch_index]
        wts = self.weights if self.weights.ndim == 3 else self.weights[batch_index]
        Q, M, N = wts.shape
        for q in range(Q):
            qy, qx = divmod(q, self.width)
            for m in range(M):
                for n in range(N):
                    yield (self.layer, qy, qx, m, n, float(loc[q, m, n, 0]), float(loc[q, m, n, 1]),
                           float(wts[q, m, n]))


def predict_offsets(x_q: Tensor, params: EALayerParams, head: int) -> Tensor:
    """``(N, 2)`` learned offsets ``x_q . W_offset[head, n]`` for one query vector."""
    return ag.einsum("c,nck->nk", x_q, params.w_offset[head])


def query_grid(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return np.stack([yy.reshape(-1), xx.reshape(-1)], axis=-1)


def equivalence_locations(h: int, w: int) -> np.ndarray:
    """Every grid location in row-major order; used to make N points cover the map."""
    return query_grid(h, w)


def ea_forward(
    x: Tensor,
    params: EALayerParams,
    cfg: EAConfig,
    point_override: np.ndarray | None = None,
    layer_name: str = "ea",
) -> tuple[Tensor, AttentionTrace]:
    """One extensible-attention layer over a ``C x H x W`` (or batched) map.

    ``point_override`` gives ``(N, 2)`` absolute sampling locations shared by all
    queries and heads, replacing the learned offsets.
    """
    try:
        return _ea_forward(x, params, cfg, point_override)
    except NumericError as exc:
        raise NumericError(f"{layer_name}: {exc}") from None


def _ea_forward(x, params, cfg, point_override):
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    B, C, H, W = x.shape
    if C != cfg.channels:
        raise DimensionError(f"input has {C} channels, config expects {cfg.channels}")
    M, N, d = cfg.heads, cfg.points, cfg.head_dim
    Q = H * W
    dt = x.dtype

    xq = x.transpose(0, 2, 3, 1).reshape(B, Q, C)
    q = ag.matmul(xq, params.w_query).reshape(B, Q, M, 1, d)

    # sampling locations, (B, Q, M, N, 2)
    if point_override is not None:
        pts = np.asarray(point_override, dtype=dt)
        if pts.shape != (N, 2):
            raise DimensionError(f"point_override must be ({N}, 2), got {pts.shape}")
        loc = Tensor(np.broadcast_to(pts, (B, Q, M, N, 2)).copy())
    else:
        base = (query_grid(H, W)[:, None, None, :] + ring_offsets(cfg)[None]).astype(dt)
        w_off = params.w_offset.transpose(2, 0, 1, 3).reshape(C, M * N * 2)
        loc = ag.matmul(xq, w_off).reshape(B, Q, M, N, 2) + Tensor(base)

    wkv = ag.concat([params.w_key, params.w_value], axis=-1)  # M N C 2d
    if cfg.kv_source == "sampled":
        sampled = ag.sample_points(x, loc.reshape(B, Q * M * N, 2), mode=cfg.sampling)
        src = sampled.reshape(B, Q, M, N, C).transpose(2, 3, 0, 1, 4).reshape(M, N, B * Q, C)
    else:
        src = xq.reshape(1, 1, B * Q, C)
    kv = ag.matmul(src, wkv).reshape(M, N, B, Q, 2 * d).transpose(2, 3, 0, 1, 4)
    k = kv[..., :d]
    v = kv[..., d:]

    logits = (q * k).sum(axis=-1)
    if cfg.scale_logits:
        logits = logits * (1.0 / math.sqrt(d))
    weights = ag.softmax(logits, axis=-1)  # B Q M N
    heads = (weights.reshape(B, Q, M, N, 1) * v).sum(axis=3).reshape(B, Q, C)
    y = xq + ag.matmul(heads, params.w_out)
    if cfg.layer_norm:
        y = ag.layer_norm(y, params.ln_scale, params.ln_shift)
    out = y.reshape(B, H, W, C).transpose(0, 3, 1, 2)

    loc_np, w_np = loc.data, weights.data
    if unbatched:
        out = out.reshape(C, H, W)
        loc_np, w_np = loc_np[0], w_np[0]
    return out, AttentionTrace(H, W, np.array(loc_np), np.array(w_np))


def mhea_forward(x, params, cfg, **kw):
    """Multi-head form; heads are aggregated by the block-structured ``w_out``."""
    return ea_forward(x, params, cfg, **kw)


def stack_forward(
    x: Tensor,
    params_per_layer: list[EALayerParams],
    cfg: EAConfig,
    point_override: np.ndarray | None = None,
    name: str = "stack",
) -> tuple[Tensor, list[AttentionTrace]]:
    if len(params_per_layer) != cfg.layers:
        raise ConfigError(f"{name}: got {len(params_per_layer)} layer params for {cfg.layers} layers")
    traces = []
    for i, p in enumerate(params_per_layer):
        x, tr = ea_forward(x, p, cfg, point_override=point_override, layer_name=f"{name}.layer{i}")
        tr.layer = i
        traces.append(tr)
    return x, traces


def init_stack(cfg: EAConfig, rng: np.random.Generator, dtype=np.float64) -> list[EALayerParams]:
    return [EALayerParams.init(cfg, rng, dtype) for _ in range(cfg.layers)]


# ---------------------------------------------------------------------------
# dense oracle


def shared_point_params(cfg: EAConfig, rng: np.random.Generator) -> EALayerParams:
    """Random params whose key/value projections are identical for every point."""
    p = EALayerParams.init(cfg, rng)
    N = cfg.points
    p.w_key.data = np.repeat(p.w_key.data[:, :1], N, axis=1)
    p.w_value.data = np.repeat(p.w_value.data[:, :1], N, axis=1)
    p.ln_scale.data = 1.0 + 0.1 * rng.standard_normal(cfg.channels)
    p.ln_shift.data = 0.1 * rng.standard_normal(cfg.channels)
    return p


def dense_attention_oracle(x: np.ndarray, params: EALayerParams, cfg: EAConfig) -> np.ndarray:
    """Full softmax attention over all H*W keys, with explicit dense matrices.

    Uses the same residual, scaling and layer-norm conventions as
    :func:`ea_forward`. Only valid for ``points == H * W`` with point-shared
    key/value projections.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    C, H, W = x.shape
    if cfg.points != H * W:
        raise ConfigError(f"dense oracle needs points == H*W ({H * W}), got {cfg.points}")
    wk, wv = params.w_key.data, params.w_value.data
    if not (np.array_equal(wk, np.repeat(wk[:, :1], cfg.points, 1))
            and np.array_equal(wv, np.repeat(wv[:, :1], cfg.points, 1))):
        raise ConfigError("dense oracle needs key/value projections shared across points")
    M, d = cfg.heads, cfg.head_dim
    X = x.reshape(C, H * W).T  # Q x C
    Qm = X @ params.w_query.data
    head_out = []
    for m in range(M):
        K = X @ wk[m, 0]
        V = X @ wv[m, 0]
        S = Qm[:, m * d:(m + 1) * d] @ K.T
        if cfg.scale_logits:
            S = S / math.sqrt(d)
        S = S - S.max(axis=1, keepdims=True)
        A = np.exp(S)
        A /= A.sum(axis=1, keepdims=True)
        head_out.append(A @ V)
    Y = X + np.concatenate(head_out, axis=1) @ params.w_out.data
    if cfg.layer_norm:
        mu = Y.mean(axis=1, keepdims=True)
        var = ((Y - mu) ** 2).mean(axis=1, keepdims=True)
        Y = (Y - mu) / np.sqrt(var + 1e-5) * params.ln_scale.data + params.ln_shift.data
    return Y.T.reshape(C, H, W)


# ---------------------------------------------------------------------------
# cost model


def flop_breakdown(cfg: EAConfig, h: int, w: int) -> dict[str, int]:
    """Multiply-accumulate counts of one :func:`ea_forward` call, by term."""
    C, M, N, d = cfg.channels, cfg.heads, cfg.points, cfg.head_dim
    Q = h * w
    sampled = cfg.kv_source == "sampled"
    taps = 4 if cfg.sampling == "bilinear" else 1
    return {
        "query_projection": Q * C * C,
        "offset_projection": Q * M * N * C * 2 if sampled else 0,
        "sampling": Q * M * N * C * taps if sampled else 0,
        "key_projection": Q * M * N * C * d,
        "value_projection": Q * M * N * C * d,
        "logits": Q * M * N * d,
        "softmax": Q * M * N,
        "aggregation": Q * M * N * d,
        "output_projection": Q * C * C,
        "residual_norm": Q * C * (5 if cfg.layer_norm else 1),
    }


def flop_count(cfg: EAConfig, h: int, w: int) -> int:
    return int(sum(flop_breakdown(cfg, h, w).values()))
