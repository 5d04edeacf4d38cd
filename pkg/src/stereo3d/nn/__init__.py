"""Minimal dense tensor and reverse-mode autodiff engine."""
from . import checkpoint, layers, losses, ops
from .gradcheck import GradCheckReport, gradient_check
from .init import xavier_init
from .layers import conv2d, linear, maxpool2d, roi_align, upsample_bilinear
from .losses import smooth_l1, softmax_cross_entropy
from .module import Conv2d, Linear, Module
from .ops import relu
from .optim import SGD, Adam, optimizer_step
from .tensor import Parameter, Tensor, no_grad

__all__ = [
    "Adam",
    "Conv2d",
    "GradCheckReport",
    "Linear",
    "Module",
    "Parameter",
    "SGD",
    "Tensor",
    "checkpoint",
    "conv2d",
    "gradient_check",
    "layers",
    "linear",
    "losses",
    "maxpool2d",
    "no_grad",
    "ops",
    "optimizer_step",
    "relu",
    "roi_align",
    "smooth_l1",
    "softmax_cross_entropy",
    "upsample_bilinear",
    "xavier_init",
]
