"""Left/right RoI coherence scoring, channel reweighting and stereo fusion.

The coherence score of channel ``i`` is the cosine similarity of the
flattened left and right RoI crops of that channel. Reweighting scales both
sides of each channel pair by that score before they are summed, so
channels whose left and right responses disagree are damped.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ShapeMismatch
from .nn import ops
from .nn.module import Linear, Module
from .nn.tensor import Tensor, as_tensor

FUSION_MODES = ("concat", "add", "reweight")
NORM_EPS = 1e-8
N_REGRESSION = 8  # dC(3) dS(3) cos sin


class RoiFeaturePair(NamedTuple):
    left: Tensor
    right: Tensor


def _check_pair(left, right):
    left, right = as_tensor(left), as_tensor(right)
    if left.shape != right.shape:
        raise ShapeMismatch(f"left {left.shape} and right {right.shape} RoI features differ")
    if left.ndim != 4:
        raise ShapeMismatch(f"RoI features must be (n, c, h, w), got {left.shape}")
    return left, right


def coherence_scores(left, right, eps: float = NORM_EPS) -> Tensor:
    """(n, c) per-channel cosine similarity between left and right crops.

    The denominator is ``max(|l| |r|, eps)`` so all-zero channels score 0.
    It is computed as ``sqrt(|l|^2 |r|^2)``, which makes identical inputs
    score exactly 1 in floating point.
    """
    left, right = _check_pair(left, right)
    dot = ops.sum(left * right, axis=(2, 3))
    nl = ops.sum(left * left, axis=(2, 3))
    nr = ops.sum(right * right, axis=(2, 3))
    denom = ops.maximum(ops.sqrt(nl * nr), eps)
    return ops.clip(dot / denom, -1.0, 1.0)


def reweight(left, right, scores, detach: bool = False) -> RoiFeaturePair:
    """Scale channel ``i`` of both sides by ``scores[:, i]``."""
    left, right = _check_pair(left, right)
    s = as_tensor(scores)
    if s.shape != left.shape[:2]:
        raise ShapeMismatch(f"scores {s.shape} do not match channels {left.shape[:2]}")
    if detach:
        s = Tensor(s.data)
    s = ops.reshape(s, s.shape + (1, 1))
    return RoiFeaturePair(left * s, right * s)


def fuse(left, right, mode: str = "reweight", detach_scores: bool = False) -> Tensor:
    """Fuse a left/right RoI pair into one feature tensor.

    ``reweight`` sums coherence-reweighted sides, ``add`` sums them as-is and
    ``concat`` stacks them along channels (doubling the channel count).
    """
    left, right = _check_pair(left, right)
    if mode == "add":
        return left + right
    if mode == "concat":
        return ops.concat([left, right], axis=1)
    if mode == "reweight":
        lw, rw = reweight(left, right, coherence_scores(left, right), detach=detach_scores)
        return lw + rw
    raise ValueError(f"unknown fusion mode {mode!r}; expected one of {FUSION_MODES}")


class DetectionHead(Module):
    """Two hidden fully-connected layers, then class logits and 8 box offsets."""

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 256, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim = int(in_dim)
        self.fc1 = Linear(in_dim, hidden, rng)
        self.fc2 = Linear(hidden, hidden, rng)
        self.cls = Linear(hidden, num_classes, rng)
        self.reg = Linear(hidden, N_REGRESSION, rng)

    def __call__(self, fused) -> tuple[Tensor, Tensor]:
        x = ops.flatten(as_tensor(fused))
        if x.shape[1] != self.in_dim:
            raise ShapeMismatch(f"head expects {self.in_dim} input features, got {x.shape[1]}")
        x = ops.relu(self.fc1(x))
        x = ops.relu(self.fc2(x))
        return self.cls(x), self.reg(x)


class FusionHead(Module):
    """The block that follows RoIAlign: optional stereo fusion then a head.

    ``mode="mono"`` feeds left features straight to the head; stereo modes
    fuse first. Only the head's input width depends on the mode.
    """

    def __init__(self, mode, channels, roi_size, num_classes, hidden=256, detach_scores=False, rng=None):
        if mode not in ("mono",) + FUSION_MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        self.mode = mode
        self.detach_scores = detach_scores
        width = 2 * channels if mode == "concat" else channels
        self.head = DetectionHead(width * roi_size[0] * roi_size[1], num_classes, hidden, rng)

    def __call__(self, left, right=None):
        if self.mode == "mono":
            return self.head(left)
        if right is None:
            raise ValueError(f"fusion mode {self.mode!r} needs right-view features")
        return self.head(fuse(left, right, self.mode, self.detach_scores))


def detection_head(fused, head: DetectionHead):
    """Apply ``head`` to fused features; returns (class_logits, offsets)."""
    return head(fused)
