"""Finite-difference checks over every differentiable op on random configurations."""
from __future__ import annotations

import numpy as np

from . import tlnet
from .nn import layers, losses, ops
from .nn.gradcheck import GradCheckReport, gradient_check
from .nn.tensor import Tensor

OP_TOLERANCE = 1e-5
COMPOSED_TOLERANCE = 1e-4


def _t(rng, *shape, positive=False):
    a = rng.normal(size=shape)
    if positive:
        a = np.abs(a) + 0.5
    return Tensor(a)


def _case(name, rng):
    """(fn, tensors) for one op with shapes drawn from ``rng``; ``fn`` returns the op output."""
    n, m = rng.integers(2, 5, size=2)
    if name == "add":
        a, b = _t(rng, n, m), _t(rng, 1, m)
        return lambda: ops.add(a, b), {"a": a, "b": b}
    if name == "sub":
        a, b = _t(rng, n, m), _t(rng, n, 1)
        return lambda: ops.sub(a, b), {"a": a, "b": b}
    if name == "mul":
        a, b = _t(rng, n, m), _t(rng, n, m)
        return lambda: ops.mul(a, b), {"a": a, "b": b}
    if name == "div":
        a, b = _t(rng, n, m), _t(rng, 1, m, positive=True)
        return lambda: ops.div(a, b), {"a": a, "b": b}
    if name == "sqrt":
        a = _t(rng, n, m, positive=True)
        return lambda: ops.sqrt(a), {"a": a}
    if name == "maximum":
        a = _t(rng, n, m)
        return lambda: ops.maximum(a, 0.1), {"a": a}
    if name == "clip":
        a = _t(rng, n, m)
        return lambda: ops.clip(a, -0.5, 0.5), {"a": a}
    if name == "relu":
        a = _t(rng, n, m)
        return lambda: ops.relu(a), {"a": a}
    if name == "sum":
        a = _t(rng, n, m, 3)
        return lambda: ops.sum(a, axis=1), {"a": a}
    if name == "mean":
        a = _t(rng, n, m, 3)
        return lambda: ops.mean(a, axis=(0, 2)), {"a": a}
    if name == "reshape":
        a = _t(rng, n, m, 2)
        return lambda: ops.reshape(a, (n, 2 * m)), {"a": a}
    if name == "transpose":
        a = _t(rng, n, m, 2)
        return lambda: ops.transpose(a, (2, 0, 1)), {"a": a}
    if name == "concat":
        a, b = _t(rng, n, m), _t(rng, n, 2)
        return lambda: ops.concat([a, b], axis=1), {"a": a, "b": b}
    if name == "index_rows":
        a = _t(rng, n, m)
        idx = rng.integers(0, n, size=n + 2)
        return lambda: ops.index_rows(a, idx), {"a": a}
    if name == "matmul":
        a, b = _t(rng, n, m), _t(rng, m, 3)
        return lambda: ops.matmul(a, b), {"a": a, "b": b}
    if name == "conv2d":
        c, o = rng.integers(1, 4, size=2)
        k = int(rng.choice([1, 3]))
        stride = int(rng.integers(1, 3))
        pad = int(rng.integers(0, k // 2 + 1))
        h, w = rng.integers(5, 8, size=2)
        x, wt, b = _t(rng, 2, c, h, w), _t(rng, o, c, k, k), _t(rng, o)
        return lambda: layers.conv2d(x, wt, b, stride, pad), {"x": x, "weight": wt, "bias": b}
    if name == "maxpool2d":
        h, w = rng.integers(4, 9, size=2)
        x = _t(rng, 2, 2, h, w)
        return lambda: layers.maxpool2d(x), {"x": x}
    if name == "upsample_bilinear":
        h, w = rng.integers(2, 6, size=2)
        x = _t(rng, 1, 2, h, w)
        return lambda: layers.upsample_bilinear(x, 2), {"x": x}
    if name == "linear":
        x, wt, b = _t(rng, n, m), _t(rng, 3, m), _t(rng, 3)
        return lambda: layers.linear(x, wt, b), {"x": x, "weight": wt, "bias": b}
    if name == "roi_align":
        h, w = rng.integers(6, 10, size=2)
        x = _t(rng, 1, 2, h, w)
        x1, y1 = rng.uniform(0, w / 2), rng.uniform(0, h / 2)
        rois = np.array([[x1, y1, x1 + rng.uniform(1, w / 2), y1 + rng.uniform(1, h / 2)], [0.3, 0.2, w - 0.4, h - 0.1]])
        return lambda: layers.roi_align(x, rois, (3, 3)), {"features": x}
    if name == "softmax_cross_entropy":
        x = _t(rng, n, m)
        tgt = losses.one_hot(rng.integers(0, m, size=n), m)
        return lambda: losses.softmax_cross_entropy(x, tgt), {"logits": x}
    if name == "smooth_l1":
        x = _t(rng, n, m)
        tgt = rng.normal(size=(n, m))
        return lambda: losses.smooth_l1(x, tgt), {"pred": x}
    if name == "coherence_scores":
        left, right = _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3)
        return lambda: tlnet.coherence_scores(left, right), {"left": left, "right": right}
    if name == "reweight":
        left, right, s = _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3), _t(rng, 2, 3)
        return lambda: ops.add(*tlnet.reweight(left, right, s)), {"left": left, "right": right, "scores": s}
    if name in ("fuse_add", "fuse_concat", "fuse_reweight"):
        mode = name.split("_", 1)[1]
        left, right = _t(rng, 2, 3, 3, 3), _t(rng, 2, 3, 3, 3)
        return lambda: tlnet.fuse(left, right, mode), {"left": left, "right": right}
    raise KeyError(name)


OP_NAMES = (
    "add", "sub", "mul", "div", "sqrt", "maximum", "clip", "relu", "sum", "mean", "reshape", "transpose",
    "concat", "index_rows", "matmul", "conv2d", "maxpool2d", "upsample_bilinear", "linear", "roi_align",
    "softmax_cross_entropy", "smooth_l1", "coherence_scores", "reweight", "fuse_add", "fuse_concat", "fuse_reweight",
)  # fmt: skip


def check_op(name: str, seed: int, tolerance: float = OP_TOLERANCE) -> GradCheckReport:
    """Check one op on the configuration drawn from ``seed``.

    Non-scalar outputs are reduced with a fixed random projection so every
    output entry contributes to the checked gradient.
    """
    rng = np.random.default_rng(seed)
    op, tensors = _case(name, rng)
    shape = op().shape
    if shape == ():
        fn = op
    else:
        proj = rng.normal(size=shape)
        fn = lambda: ops.sum(op() * proj)  # noqa: E731
    report = gradient_check(fn, tensors, tolerance)
    report.errors = {f"{name}[{seed}].{k}": v for k, v in report.errors.items()}
    return report


def check_composed(seed: int, tolerance: float = COMPOSED_TOLERANCE) -> GradCheckReport:
    """coherence -> reweight -> add -> detection head -> loss, end to end."""
    rng = np.random.default_rng(seed)
    n, c, k = 3, int(rng.integers(2, 4)), 2
    left, right = _t(rng, n, c, k, k), _t(rng, n, c, k, k)
    head = tlnet.DetectionHead(c * k * k, 2, hidden=8, rng=rng)
    labels = losses.one_hot(rng.integers(0, 2, size=n), 2)
    reg_t = rng.normal(size=(n, tlnet.N_REGRESSION))

    def fn():
        logits, reg = tlnet.detection_head(tlnet.fuse(left, right, "reweight"), head)
        return ops.add(losses.softmax_cross_entropy(logits, labels), losses.smooth_l1(reg, reg_t))

    tensors = {"left": left, "right": right, **head.parameters()}
    report = gradient_check(fn, tensors, tolerance)
    report.errors = {f"composed[{seed}].{k}": v for k, v in report.errors.items()}
    return report


def run_suite(configs: int = 20, seed: int = 0) -> tuple[GradCheckReport, GradCheckReport]:
    """(per-op report, composed-block report) over ``configs`` random draws each."""
    ops_report = GradCheckReport(OP_TOLERANCE)
    comp_report = GradCheckReport(COMPOSED_TOLERANCE)
    for i in range(configs):
        for name in OP_NAMES:
            ops_report.errors.update(check_op(name, seed * 100003 + i).errors)
        comp_report.errors.update(check_composed(seed * 100003 + i).errors)
    return ops_report, comp_report
