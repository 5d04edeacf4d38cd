"""Parameter initialisers."""
from __future__ import annotations

import numpy as np


def fans(dims) -> tuple[int, int]:
    """(fan_in, fan_out) for linear (o, d) or convolution (o, c, kh, kw) weights."""
    dims = tuple(int(d) for d in dims)
    if len(dims) < 2:
        raise ValueError("xavier_init needs at least two dimensions")
    receptive = int(np.prod(dims[2:])) if len(dims) > 2 else 1
    return dims[1] * receptive, dims[0] * receptive


def xavier_init(rng_seed, dims) -> np.ndarray:
    """Glorot-uniform values in (-a, a), a = sqrt(6 / (fan_in + fan_out)).

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    fan_in, fan_out = fans(dims)
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"xavier_init needs non-zero fans, got dims {tuple(dims)}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=tuple(int(d) for d in dims))
