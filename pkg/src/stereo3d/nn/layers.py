"""Convolution, pooling, upsampling, fully-connected and RoIAlign layers."""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..errors import DegenerateRoi, ShapeMismatch
from .tensor import Tensor, as_tensor, make

MIN_ROI_SIZE = 1e-3


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (n, c, h, w) with ``weight`` (o, c, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects 4-D input and weight, got {x.shape}, {weight.shape}")
    n, c, h, w = x.shape
    o, wc, kh, kw = weight.shape
    if wc != c:
        raise ShapeMismatch(f"conv2d input has {c} channels, weight expects {wc}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    if kh == 1 and kw == 1 and stride == 1:
        cols = xp.reshape(n, c, ho * wo)
    else:
        cols = np.empty((n, c, kh, kw, ho, wo))
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
        cols = cols.reshape(n, c * kh * kw, ho * wo)
    wmat = weight.data.reshape(o, -1)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeMismatch(f"bias must have shape ({o},), got {bias.shape}")
        out += bias.data[None, :, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape) if weight.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2)
            if kh == 1 and kw == 1 and stride == 1:
                dxp = dcols.reshape(n, c, ho, wo)
            else:
                dcols = dcols.reshape(n, c, kh, kw, ho, wo)
                dxp = np.zeros_like(xp)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return make(out, parents, backward)


def maxpool2d(x) -> Tensor:
    """2x2 max pooling with stride 2; ties go to the first row-major maximizer."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"maxpool2d expects 4-D input, got {x.shape}")
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    if ho < 1 or wo < 1:
        raise ShapeMismatch(f"input {h}x{w} too small for 2x2 pooling")
    d = x.data
    quad = [d[:, :, i : 2 * ho : 2, j : 2 * wo : 2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(quad[0], quad[1]), np.maximum(quad[2], quad[3]))

    def backward(g):
        dx = np.zeros(x.shape)
        taken = np.zeros(out.shape, dtype=bool)
        for k, (i, j) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
            first = (quad[k] == out) & ~taken
            taken |= first
            dx[:, :, i : 2 * ho : 2, j : 2 * wo : 2] = g * first
        return (dx,)

    return make(out, (x,), backward)


def _upsample_matrix(n_in: int, factor: int) -> np.ndarray:
    """(factor*n_in, n_in) bilinear interpolation weights, align_corners=False."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = src - i0
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - t)
    np.add.at(m, (rows, i1), t)
    return m


def upsample_bilinear(x, factor: int = 2) -> Tensor:
    """Separable bilinear upsampling (align_corners=False convention)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeMismatch(f"upsample expects 4-D input, got {x.shape}")
    _, _, h, w = x.shape
    uh, uw = _upsample_matrix(h, factor), _upsample_matrix(w, factor)
    out = np.matmul(np.matmul(uh, x.data), uw.T)
    return make(out, (x,), lambda g: (np.matmul(np.matmul(uh.T, g), uw),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with ``x`` (n, d) and ``weight`` (o, d)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"linear needs (n,d) and (o,d), got {x.shape} and {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeMismatch(f"bias must have shape ({weight.shape[0]},), got {bias.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    return make(out, parents, backward)


def roi_align_matrix(rois, out_size, map_size) -> sp.csr_matrix:
    """Sparse (n*ph*pw, h*w) bilinear sampling matrix.

    One sample per output bin, at the bin center. ``rois`` are (n, 4)
    ``[x1, y1, x2, y2]`` in continuous feature-map coordinates where pixel
    ``k`` spans ``[k, k+1]``; sample positions are clamped to the map.
    """
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    ph, pw = out_size
    h, w = map_size
    bw = rois[:, 2] - rois[:, 0]
    bh = rois[:, 3] - rois[:, 1]
    if len(rois) and (bw.min() < MIN_ROI_SIZE or bh.min() < MIN_ROI_SIZE):
        raise DegenerateRoi("RoI width and height must be at least 1e-3 feature pixels")
    xs = rois[:, 0:1] + (np.arange(pw)[None] + 0.5) * (bw[:, None] / pw) - 0.5
    ys = rois[:, 1:2] + (np.arange(ph)[None] + 0.5) * (bh[:, None] / ph) - 0.5
    xs = np.clip(xs, 0, w - 1)
    ys = np.clip(ys, 0, h - 1)
    x0 = np.minimum(np.floor(xs), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(ys), max(h - 2, 0)).astype(np.int64)
    tx, ty = xs - x0, ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    n = len(rois)
    # broadcast to (n, ph, pw)
    Y0, Y1, TY = (a[:, :, None] for a in (y0, y1, ty))
    X0, X1, TX = (a[:, None, :] for a in (x0, x1, tx))
    idx = np.stack(
        np.broadcast_arrays(Y0 * w + X0, Y0 * w + X1, Y1 * w + X0, Y1 * w + X1), axis=-1
    ).reshape(-1, 4)
    wts = np.stack(
        np.broadcast_arrays((1 - TY) * (1 - TX), (1 - TY) * TX, TY * (1 - TX), TY * TX), axis=-1
    ).reshape(-1, 4)
    rows = np.repeat(np.arange(n * ph * pw), 4)
    return sp.csr_matrix((wts.ravel(), (rows, idx.ravel())), shape=(n * ph * pw, h * w))


def roi_align(features, rois, out_size=(7, 7)) -> Tensor:
    """Crop-and-resize RoIs from a (1, c, h, w) map into (n, c, ph, pw)."""
    features = as_tensor(features)
    if features.ndim != 4 or features.shape[0] != 1:
        raise ShapeMismatch(f"roi_align expects a (1, c, h, w) map, got {features.shape}")
    _, c, h, w = features.shape
    ph, pw = out_size
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    n = len(rois)
    s = roi_align_matrix(rois, out_size, (h, w))
    flat = features.data.reshape(c, h * w)
    out = np.asarray((s @ flat.T)).reshape(n, ph, pw, c).transpose(0, 3, 1, 2)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(n * ph * pw, c)
        return (np.asarray(s.T @ gm).T.reshape(1, c, h, w),)

    return make(np.ascontiguousarray(out), (features,), backward)
