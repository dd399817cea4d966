"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, finite_checks


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    tol: float
    n_checked: int
    per_input: dict[str, float] = field(default_factory=dict)
    diagnostic: str = ""

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        worst = max(self.per_input, key=self.per_input.get) if self.per_input else "-"
        msg = f"{status} max_rel_err={self.max_rel_err:.3e} (tol {self.tol:.0e}, {self.n_checked} coords, worst {worst})"
        return msg + (f" [{self.diagnostic}]" if self.diagnostic else "")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero gradients from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _scalarize(out: Tensor, projection: np.ndarray | None) -> Tensor:
    if out.size == 1:
        return out.reshape(())
    return (out * Tensor(projection)).sum()


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
    names: Sequence[str] | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``f``'s reverse-mode gradient with central differences.

    ``f`` receives the input tensors and returns a tensor; non-scalar outputs are
    reduced by a fixed random projection. With ``max_coords`` set, each input is
    checked on that many randomly chosen coordinates instead of all of them.
    """
    rng = np.random.default_rng(seed)
    names = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit inputs")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    projection = None
    if out.size != 1:
        projection = rng.standard_normal(out.shape) / math.sqrt(out.size)
    loss = _scalarize(out, projection)
    if not np.isfinite(loss.data):
        return GradCheckReport(float("inf"), False, tol, 0, diagnostic="non-finite function value")
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def evaluate() -> float:
        with finite_checks(False):
            val = _scalarize(f(*inputs), projection).item()
        return val

    per_input: dict[str, float] = {}
    worst = 0.0
    n_checked = 0
    diagnostic = ""
    for name, t, ga in zip(names, inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            old = flat[i]
            flat[i] = old + h
            fp = evaluate()
            flat[i] = old - h
            fm = evaluate()
            flat[i] = old
            if not (math.isfinite(fp) and math.isfinite(fm)):
                diagnostic = f"non-finite value while perturbing {name}[{i}]"
                numeric[j] = np.nan
                continue
            numeric[j] = (fp - fm) / (2.0 * h)
        err = relative_error(ga.reshape(-1)[idx], numeric, floor)
        err = np.where(np.isnan(err), np.inf, err)
        per_input[name] = float(err.max()) if err.size else 0.0
        worst = max(worst, per_input[name])
        n_checked += idx.size
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, worst <= tol and not diagnostic, tol, n_checked, per_input, diagnostic)
