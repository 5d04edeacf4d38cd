"""Stereo 3D object detection with 3D anchors and coherence-weighted fusion."""
from .box3d import OrientedBox3D, iou_3d, iou_bev, nms_bev
from .geometry import StereoCalibration, parse_calibration, serialize_calibration
from .pipeline import DetectorConfig, Detection, TLNetDetector, infer, train
from .tlnet import coherence_scores, fuse, reweight

__version__ = "0.1.0"

__all__ = [
    "Detection",
    "DetectorConfig",
    "OrientedBox3D",
    "StereoCalibration",
    "TLNetDetector",
    "coherence_scores",
    "fuse",
    "infer",
    "iou_3d",
    "iou_bev",
    "nms_bev",
    "parse_calibration",
    "reweight",
    "serialize_calibration",
    "train",
]
