"""Minimal reverse-mode tensor substrate.

Every differentiable op in the ECEA pipeline lives here. A :class:`Tensor`
wraps a numpy array; ops build a :class:`GradRecord` pointing at their inputs
and a closure that maps the output gradient to input gradients.
``Tensor.backward`` replays the records in reverse topological order.

Arrays may carry a leading batch axis everywhere a feature map is expected,
so ``C x H x W`` and ``B x C x H x W`` are both accepted by the map ops.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy import sparse


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class DimensionError(ValueError):
    """Raised on incompatible operand shapes."""


_state = {"grad_enabled": True, "check_finite": True}


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad_enabled"]
    _state["grad_enabled"] = False
    try:
        yield
    finally:
        _state["grad_enabled"] = prev


@contextlib.contextmanager
def finite_checks(enabled: bool) -> Iterator[None]:
    prev = _state["check_finite"]
    _state["check_finite"] = enabled
    try:
        yield
    finally:
        _state["check_finite"] = prev


@dataclass
class GradRecord:
    op: str
    inputs: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    # free-form saved values for debugging / introspection
    saved: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "record", "name", "retains_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.record: GradRecord | None = None
        self.name = name
        self.retains_grad = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def retain_grad(self) -> "Tensor":
        """Keep the gradient of this intermediate after ``backward``."""
        self.retains_grad = True
        return self

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    # -- reverse mode -----------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != output shape {self.shape}")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.record is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if node.retains_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            in_grads = node.record.backward(g)
            for inp, ig in zip(node.record.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.record is not None:
            for inp in node.record.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


# ---------------------------------------------------------------------------
# helpers


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        return Tensor(np.asarray(x, dtype=np.float64))
    return Tensor(np.asarray(x, dtype=dtype))


def _coerce_pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return as_tensor(a), as_tensor(b)


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if _state["check_finite"] and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values produced by {op}")
    return arr


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward, **saved) -> Tensor:
    out = Tensor(_check(data, op))
    if _state["grad_enabled"] and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.record = GradRecord(op, tuple(inputs), backward, saved)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _make(
        a.data + b.data, "add", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _make(
        a.data - b.data, "sub", (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data
    return _make(
        out, "div", (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), "log", (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = _stable_sigmoid(x.data)
    return _make(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def silu(x: Tensor) -> Tensor:
    s = _stable_sigmoid(x.data)
    out = x.data * s
    return _make(out, "silu", (x,), lambda g: (g * (s + x.data * s * (1.0 - s)),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, "relu", (x,), lambda g: (g * mask,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, "square", (x,), lambda g: (2.0 * g * x.data,))


def scale_grad(x: Tensor, c: float) -> Tensor:
    """Identity forward; backward multiplies the upstream gradient by ``c``."""
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"decoupling coefficient must be in [0, 1], got {c}")
    out = Tensor(x.data)
    if _state["grad_enabled"] and x.requires_grad:
        out.requires_grad = True
        out.record = GradRecord("scale_grad", (x,), lambda g: (g * c,), {"c": c})
    return out


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), "getitem", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    return _make(out, "concat", tensors, backward)


def concat_channels(maps: Sequence[Tensor]) -> Tensor:
    """Channel-axis concatenation of ``C_i x H x W`` (or batched) maps."""
    maps = list(maps)
    ref = maps[0].shape[-2:]
    for m in maps[1:]:
        if m.shape[-2:] != ref or m.ndim != maps[0].ndim:
            raise DimensionError(f"spatial mismatch in concat_channels: {m.shape} vs {maps[0].shape}")
    return concat(maps, axis=-3)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _coerce_pair(a, b)
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(a.data @ b.data, "matmul", (a, b), backward)


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated indices inside an operand."""
    a, b = _coerce_pair(a, b)
    ins, out_sub = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    out = np.einsum(subscripts, a.data, b.data, optimize=True)

    def grad_for(target_sub, target_shape, other_sub, other):
        # indices only present in the target operand were summed out; broadcast back
        keep = "".join(ch for ch in target_sub if ch in out_sub or ch in other_sub)
        def go(g):
            r = np.einsum(f"{out_sub},{other_sub}->{keep}", g, other.data, optimize=True)
            if keep != target_sub:
                expand = [target_sub.index(ch) for ch in target_sub if ch not in keep]
                r = np.transpose(r, [keep.index(ch) for ch in target_sub if ch in keep])
                for ax in sorted(expand):
                    r = np.expand_dims(r, ax)
                r = np.broadcast_to(r, target_shape).copy()
            return r
        return go

    ga = grad_for(sa, a.shape, sb, b)
    gb = grad_for(sb, b.shape, sa, a)
    return _make(np.asarray(out), "einsum", (a, b), lambda g: (ga(g), gb(g)), subscripts=subscripts)


# ---------------------------------------------------------------------------
# normalisation


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _make(out, "softmax", (x,), backward)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=-1)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _make(out, "log_softmax", (x,), lambda g: (g - p * np.sum(g, axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor | None, beta: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply an optional affine."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_arr = gamma.data if gamma is not None else 1.0
    out = xhat * g_arr + (beta.data if beta is not None else 0.0)
    n = x.shape[-1]
    inputs = [x] + [t for t in (gamma, beta) if t is not None]

    def backward(g):
        gx_hat = g * g_arr
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True) / n)
        grads = [gx]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return grads

    return _make(out, "layer_norm", inputs, backward)


# ---------------------------------------------------------------------------
# losses (elementwise, unreduced)


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    z = logits.data
    t = np.asarray(targets, dtype=z.dtype)
    out = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return _make(out, "bce_with_logits", (logits,), lambda g: (g * (_stable_sigmoid(z) - t),))


def smooth_l1(x: Tensor, beta: float = 1.0) -> Tensor:
    a = np.abs(x.data)
    quad = a < beta
    out = np.where(quad, 0.5 * x.data * x.data / beta, a - 0.5 * beta)
    return _make(out, "smooth_l1", (x,), lambda g: (g * np.where(quad, x.data / beta, np.sign(x.data)),))


# ---------------------------------------------------------------------------
# spatial ops


def _interp_axis(n_in: int, n_out: int, coords: np.ndarray | None = None):
    """Linear interpolation indices/weights with clamp-to-border along one axis."""
    if coords is None:
        coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    c = np.clip(coords, 0.0, n_in - 1)
    lo = np.floor(c).astype(np.int64)
    if n_in > 1:
        lo = np.minimum(lo, n_in - 2)
    hi = np.minimum(lo + 1, n_in - 1)
    w = c - lo
    return lo, hi, w


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling matrix (rows sum to one)."""
    lo, hi, w = _interp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - w)
    np.add.at(m, (rows, hi), w)
    return m


def upsample(x: Tensor, factor: int) -> Tensor:
    """Bilinear upsampling of the last two axes by an integer factor."""
    h, w = x.shape[-2:]
    uh = interpolation_matrix(h, h * factor).astype(x.dtype)
    uw = interpolation_matrix(w, w * factor).astype(x.dtype)
    out = uh @ x.data @ uw.T

    def backward(g):
        return (uh.T @ g @ uw,)

    return _make(out, "upsample", (x,), backward, factor=factor)


def upsample2x(x: Tensor) -> Tensor:
    return upsample(x, 2)


def _tap_matrix(idx: np.ndarray, vals: np.ndarray, n_cols: int) -> sparse.csr_matrix:
    """CSR matrix with ``k`` entries per row; ``idx``/``vals`` are ``(rows, k)``."""
    rows, k = idx.shape
    return sparse.csr_matrix(
        (vals.reshape(-1), idx.reshape(-1), np.arange(rows + 1) * k), shape=(rows, n_cols)
    )


def sample_points(fmap: Tensor, locs: Tensor, mode: str = "bilinear") -> Tensor:
    """Sample a ``(B, C, H, W)`` map at ``(B, P, 2)`` fractional ``(y, x)`` locations.

    Returns ``(B, P, C)``. Locations outside the grid are clamped to the border;
    the location gradient is zero along a clamped axis. Interpolation is applied
    as a sparse ``(B*P, B*H*W)`` tap matrix against a channel-last table.
    """
    if fmap.ndim != 4 or locs.ndim != 3 or locs.shape[-1] != 2 or locs.shape[0] != fmap.shape[0]:
        raise DimensionError(f"sample_points expects (B,C,H,W) and (B,P,2), got {fmap.shape}, {locs.shape}")
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    B, C, H, W = fmap.shape
    P = locs.shape[1]
    y = locs.data[..., 0].reshape(-1)
    x = locs.data[..., 1].reshape(-1)
    base = np.repeat(np.arange(B) * (H * W), P)
    table = np.ascontiguousarray(np.transpose(fmap.data, (0, 2, 3, 1))).reshape(B * H * W, C)

    if mode == "nearest":
        yi = np.clip(np.rint(y), 0, H - 1).astype(np.int64)
        xi = np.clip(np.rint(x), 0, W - 1).astype(np.int64)
        taps = _tap_matrix((base + yi * W + xi)[:, None], np.ones((B * P, 1), fmap.dtype), B * H * W)
        deriv = None
    else:
        y0, y1, wy = _interp_axis(H, 0, y)
        x0, x1, wx = _interp_axis(W, 0, x)
        idx = np.stack([y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1], axis=1) + base[:, None]
        vals = np.stack([(1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx], axis=1)
        taps = _tap_matrix(idx, vals.astype(fmap.dtype), B * H * W)
        in_y = ((y >= 0) & (y <= H - 1)).astype(fmap.dtype)
        in_x = ((x >= 0) & (x <= W - 1)).astype(fmap.dtype)
        # d(out)/dy and d(out)/dx share the tap pattern
        dy_vals = np.stack([-(1 - wx), -wx, 1 - wx, wx], axis=1) * in_y[:, None]
        dx_vals = np.stack([-(1 - wy), 1 - wy, -wy, wy], axis=1) * in_x[:, None]
        deriv = (idx, dy_vals.astype(fmap.dtype), dx_vals.astype(fmap.dtype))

    out = (taps @ table).reshape(B, P, C)

    def backward(g):
        g2 = g.reshape(B * P, C)
        gtable = taps.T @ g2
        gmap = np.transpose(gtable.reshape(B, H, W, C), (0, 3, 1, 2))
        gloc = None
        if deriv is not None and locs.requires_grad:
            idx_, dyv, dxv = deriv
            gy = np.sum(g2 * (_tap_matrix(idx_, dyv, B * H * W) @ table), axis=-1)
            gx = np.sum(g2 * (_tap_matrix(idx_, dxv, B * H * W) @ table), axis=-1)
            gloc = np.stack([gy, gx], axis=-1).reshape(B, P, 2)
        return gmap, gloc

    return _make(out, f"sample_{mode}", (fmap, locs), backward)


def bilinear_sample(fmap: Tensor, loc) -> Tensor:
    """Sample a single ``C x H x W`` map at one ``(y, x)`` location, returning ``C`` values."""
    if fmap.ndim != 3:
        raise DimensionError(f"bilinear_sample expects a C x H x W map, got {fmap.shape}")
    loc_t = loc if isinstance(loc, Tensor) else Tensor(np.asarray(loc, dtype=fmap.dtype))
    out = sample_points(reshape(fmap, (1,) + fmap.shape), reshape(loc_t, (1, 1, 2)))
    return reshape(out, (fmap.shape[0],))


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]  # B C Ho Wo k k
    cols = np.transpose(win, (0, 1, 4, 5, 2, 3)).reshape(B, C * k * k, Ho * Wo)
    return cols, Ho, Wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution on ``(B, C, H, W)`` input with a ``(Cout, Cin, k, k)`` kernel."""
    if x.ndim != 4 or weight.ndim != 4 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"conv2d shape mismatch: x {x.shape}, weight {weight.shape}")
    B, C, H, W = x.shape
    Cout, _, k, _ = weight.shape
    cols, Ho, Wo = _im2col(x.data, k, stride, padding)
    wmat = weight.data.reshape(Cout, -1)
    out = (wmat @ cols).reshape(B, Cout, Ho, Wo)
    if bias is not None:
        out = out + bias.data.reshape(1, Cout, 1, 1)
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def backward(g):
        g2 = g.reshape(B, Cout, Ho * Wo)
        gw = np.einsum("bop,bkp->ok", g2, cols).reshape(weight.shape)
        gcols = (wmat.T @ g2).reshape(B, C, k, k, Ho, Wo)
        gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, i, j]
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _make(out, "conv2d", inputs, backward)
