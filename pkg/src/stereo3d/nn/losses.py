"""Classification and regression losses (mean-reduced scalars)."""
from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatch
from .ops import softmax
from .tensor import Tensor, as_tensor, make


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), num_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Mean cross-entropy of (n, k) logits against (n, k) one-hot/soft targets."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.ndim != 2 or t.shape != logits.shape:
        raise ShapeMismatch(f"logits {logits.shape} and targets {t.shape} must match (n, k)")
    n = logits.shape[0]
    if n == 0:
        return Tensor(0.0)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(t * logp).sum() / n
    p = softmax(logits.data)
    return make(np.asarray(loss), (logits,), lambda g: (g * (p * t.sum(axis=1, keepdims=True) - t) / n,))


def smooth_l1(pred, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss: 0.5 x^2 / beta if |x| < beta else |x| - 0.5 beta."""
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeMismatch(f"pred {pred.shape} and target {t.shape} differ")
    if pred.data.size == 0:
        return Tensor(0.0)
    d = pred.data - t
    ad = np.abs(d)
    small = ad < beta
    per = np.where(small, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size
    return make(np.asarray(per.mean()), (pred,), lambda g: (g * np.where(small, d / beta, np.sign(d)) / n,))
