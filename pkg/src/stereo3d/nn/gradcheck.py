"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(e) and e <= self.tolerance for e in self.errors.values())

    def lines(self):
        for name, err in self.errors.items():
            yield f"{'ok  ' if err <= self.tolerance else 'FAIL'} {name:<32s} max rel err {err:.3e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger gradient magnitude of the pair."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def numeric_gradient(fn, t: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``t``."""
    base = t.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in range(base.size):
        orig = base.flat[i]
        bumped = base.copy()
        bumped.flat[i] = orig + step
        t.data = bumped
        fp = float(fn().data)
        bumped = base.copy()
        bumped.flat[i] = orig - step
        t.data = bumped
        fm = float(fn().data)
        flat[i] = (fp - fm) / (2 * step)
    t.data = base
    return grad


def gradient_check(fn, tensors: dict[str, Tensor], tolerance: float = 1e-5, step: float = 1e-5) -> GradCheckReport:
    """Compare ``fn().backward()`` gradients with central differences.

    ``fn`` must rebuild the scalar output from ``tensors`` on every call.
    """
    for t in tensors.values():
        t.requires_grad = True
        t.grad = None
    out = fn()
    out.backward()
    report = GradCheckReport(tolerance)
    for name, t in tensors.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        report.errors[name] = relative_error(analytic, numeric_gradient(fn, t, step))
    return report
