"""Per-frame detection filtering ahead of shape inference.

Three rejection criteria, applied in a fixed order: bounding box too
small, occlusion/truncation (low IoU between the detection box and the
projection of the object's 3D box), and overlap with other objects in
the same frame. Each rejected detection carries the first reason that
fired, so reasons partition the rejections.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BehindCamera, EmptyResult
from .geometry import BBox2, iou_2d, project_bbox3

REASON_SIZE = "size"
REASON_OCCLUDED = "occluded_or_truncated"
REASON_NOT_VISIBLE = "not_visible"
REASON_OVERLAP = "overlap"


@dataclass
class Detection:
    frame_id: int
    bbox: BBox2
    mask: np.ndarray            # (H, W) bool, frame resolution
    class_id: int = 0
    score: float = 1.0
    instance_hint: Optional[int] = None
    code: Optional[np.ndarray] = None   # per-detection shape code, if any
    index: int = 0              # position within its frame's detections

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("detection mask is empty")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError("score outside [0, 1]")


@dataclass
class PruneConfig:
    min_width_px: float = 32.0
    min_height_px: float = 32.0
    occlusion_iou_min: float = 0.5
    overlap_iou_max: float = 0.3

    def __post_init__(self):
        if not (0.0 <= self.occlusion_iou_min <= 1.0):
            raise ValueError("occlusion_iou_min outside [0, 1]")
        if not (0.0 <= self.overlap_iou_max <= 1.0):
            raise ValueError("overlap_iou_max outside [0, 1]")


def prune_by_size(det, cfg):
    """Keep iff both box sides meet the minimum (inclusive at equality)."""
    if det.bbox.width < cfg.min_width_px or det.bbox.height < cfg.min_height_px:
        return False, REASON_SIZE
    return True, None


def prune_by_occlusion(det, projected, cfg):
    """Keep iff IoU against the projected 3D box is high enough.

    A low IoU signals the detector saw a truncated or occluded part of
    the object. projected=None means the projection failed (object
    behind the camera) and the view is rejected as not visible.
    """
    if projected is None:
        return False, REASON_NOT_VISIBLE
    if iou_2d(det.bbox, projected) < cfg.occlusion_iou_min:
        return False, REASON_OCCLUDED
    return True, None


def prune_by_overlap(det, others, cfg):
    """Keep iff no other same-frame box overlaps too much (inclusive)."""
    for other in others:
        if iou_2d(det.bbox, other) > cfg.overlap_iou_max:
            return False, REASON_OVERLAP
    return True, None


def filter_views(bbox3, detections, cameras, cfg, frame_others=None):
    """Apply size -> occlusion -> overlap to an object's detections.

    Parameters
    ----------
    bbox3 : BBox3 for the object, or None to skip the occlusion test
    detections : the object's associated detections
    cameras : mapping frame_id -> PinholeCamera (used to project bbox3)
    cfg : PruneConfig
    frame_others : optional mapping frame_id -> list of BBox2 from
        *other* objects; same-frame sibling detections in `detections`
        are always included as overlap candidates

    Returns
    -------
    (survivors, rejections) where rejections is a list of
    (detection, reason). Raises EmptyResult if nothing survives.
    """
    survivors = []
    rejections = []
    for det in detections:
        keep, reason = prune_by_size(det, cfg)
        if keep and bbox3 is not None:
            projected = None
            cam = cameras.get(det.frame_id) if cameras else None
            if cam is not None:
                try:
                    projected = project_bbox3(bbox3, cam)
                except BehindCamera:
                    projected = None
            keep, reason = prune_by_occlusion(det, projected, cfg)
        if keep:
            others = [d.bbox for d in detections
                      if d.frame_id == det.frame_id and d is not det]
            if frame_others:
                others += list(frame_others.get(det.frame_id, []))
            keep, reason = prune_by_overlap(det, others, cfg)
        if keep:
            survivors.append(det)
        else:
            rejections.append((det, reason))
    if not survivors:
        raise EmptyResult("all detections rejected", )
    return survivors, rejections
