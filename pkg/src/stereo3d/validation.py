"""Input checks shared by the estimator, pipeline and CLI."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_is_fitted

from .errors import ShapeMismatch


def check_image(img, name: str = "image") -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 4 or img.shape[:2] != (1, 3):
        raise ShapeMismatch(f"{name} must be (1, 3, H, W), got {img.shape}")
    if not np.isfinite(img).all():
        raise ValueError(f"{name} contains non-finite values")
    return img


def check_frame(frame, stereo: bool = True):
    """A frame with a left image (and a right one when ``stereo``) of calibration size."""
    check_image(frame.left_image, "left image")
    if stereo:
        if frame.right_image is None:
            raise ShapeMismatch(f"frame {frame.id} has no right image but the model is stereo")
        check_image(frame.right_image, "right image")
    return frame


def check_box_array(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 7:
        raise ShapeMismatch(f"boxes must be (N, 7), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("boxes contain non-finite values")
    if (arr[:, 3:6] <= 0).any():
        raise ValueError("box sizes must be positive")
    return arr


def check_fitted(estimator, attribute: str):
    """sklearn's NotFittedError when ``attribute`` is missing."""
    check_is_fitted(estimator, attribute)
