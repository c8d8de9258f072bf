"""Python bindings for the vipastain C++ core."""

from ._core import (
    DomainThresholds,
    SceneSpec,
    VipastainError,
    calibrate,
    f1_score,
    frechet_distance,
    generate_scene,
    iou,
    mask_precision_recall,
    multi_otsu,
    nms,
    precision_recall,
    run_cli,
    stitch,
    tile_image,
)

__all__ = [
    "DomainThresholds",
    "SceneSpec",
    "VipastainError",
    "calibrate",
    "f1_score",
    "frechet_distance",
    "generate_scene",
    "iou",
    "mask_precision_recall",
    "multi_otsu",
    "nms",
    "precision_recall",
    "run_cli",
    "stitch",
    "tile_image",
]
