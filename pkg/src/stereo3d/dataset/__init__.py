"""KITTI-format IO and synthetic stereo scenes."""
from .kitti import (
    DONT_CARE,
    REGIMES,
    FrameData,
    GroundTruthLabel,
    KittiDataset,
    difficulty_of,
    format_label_file,
    parse_label_file,
    parse_label_line,
    read_label_dir,
    read_ppm,
    resize_frame,
    serialize_label,
    write_label_dir,
    write_ppm,
)
from .synth import SceneSpec, generate_dataset, generate_scene

__all__ = [
    "DONT_CARE",
    "REGIMES",
    "FrameData",
    "GroundTruthLabel",
    "KittiDataset",
    "SceneSpec",
    "difficulty_of",
    "format_label_file",
    "generate_dataset",
    "generate_scene",
    "parse_label_file",
    "parse_label_line",
    "read_label_dir",
    "read_ppm",
    "resize_frame",
    "serialize_label",
    "write_label_dir",
    "write_ppm",
]
