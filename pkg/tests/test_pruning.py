import numpy as np
import pytest

from mvrecon.errors import EmptyResult
from mvrecon.geometry import BBox2, BBox3, PinholeCamera, SimilarityTransform
from mvrecon.pruning import (Detection, PruneConfig, filter_views,
                             prune_by_occlusion, prune_by_overlap,
                             prune_by_size, REASON_SIZE, REASON_OCCLUDED,
                             REASON_OVERLAP, REASON_NOT_VISIBLE)


def det(x0, y0, x1, y1, frame_id=0, index=0, class_id=0):
    mask = np.zeros((240, 320), dtype=bool)
    mask[max(int(y0), 0):int(y1) + 1, max(int(x0), 0):int(x1) + 1] = True
    return Detection(frame_id=frame_id, bbox=BBox2(x0, y0, x1, y1),
                     mask=mask, class_id=class_id, index=index)


CFG = PruneConfig()


def test_size_keeps_large_box():
    keep, reason = prune_by_size(det(10, 10, 110, 130), CFG)
    assert keep and reason is None


def test_size_rejects_narrow_box():
    keep, reason = prune_by_size(det(10, 10, 30, 130), CFG)
    assert not keep and reason == REASON_SIZE


def test_size_keeps_box_exactly_at_threshold():
    keep, _ = prune_by_size(det(10.0, 10.0, 42.0, 42.0), CFG)
    assert keep


def test_occlusion_keeps_high_iou():
    d = det(0, 0, 100, 100)
    keep, _ = prune_by_occlusion(d, BBox2(0, 0, 100, 90), CFG)
    assert keep


def test_occlusion_rejects_low_iou():
    d = det(0, 0, 100, 100)
    keep, reason = prune_by_occlusion(d, BBox2(80, 80, 180, 180), CFG)
    assert not keep and reason == REASON_OCCLUDED


def test_occlusion_rejects_failed_projection():
    keep, reason = prune_by_occlusion(det(0, 0, 100, 100), None, CFG)
    assert not keep and reason == REASON_NOT_VISIBLE


def test_overlap_vacuous_without_others():
    keep, _ = prune_by_overlap(det(0, 0, 100, 100), [], CFG)
    assert keep


def test_overlap_rejects_strong_overlap():
    d = det(0, 0, 100, 100)
    keep, reason = prune_by_overlap(d, [BBox2(20, 0, 120, 100)], CFG)
    assert not keep and reason == REASON_OVERLAP


def test_overlap_tolerates_weak_overlaps():
    # rival ious about 0.1 and 0.2, both under the 0.3 ceiling
    d = det(0, 0, 100, 100)
    others = [BBox2(81.8, 0, 181.8, 100), BBox2(0, 66.7, 100, 166.7)]
    keep, _ = prune_by_overlap(d, others, CFG)
    assert keep


# -------------------------------------------------------------- filter_views

def scene_cam():
    return PinholeCamera(100, 100, 159.5, 119.5, 320, 240,
                         SimilarityTransform.identity())


def test_filter_passes_clean_set_through():
    from mvrecon.geometry import project_bbox3
    cam = scene_cam()
    bb3 = BBox3(np.array([0.0, 0.0, 3.0]), np.full(3, 0.9))
    proj = project_bbox3(bb3, cam)
    d = det(proj.x_min, proj.y_min, proj.x_max, proj.y_max)
    kept, rejected = filter_views(bb3, [d], {0: cam}, CFG)
    assert kept == [d] and rejected == []


def test_filter_mixed_set_matches_predicate_oracle():
    cam = scene_cam()
    bb3 = BBox3(np.array([0.0, 0.0, 3.0]), np.full(3, 0.9))
    dets = [
        det(130, 90, 190, 150, index=0),   # good
        det(130, 90, 150, 150, index=1),   # too narrow
        det(10, 10, 60, 60, index=2),      # far from projection
        det(128, 92, 188, 152, index=3),   # overlaps det 0 heavily
    ]
    try:
        kept, rejected = filter_views(bb3, dets, {0: cam}, CFG)
    except EmptyResult:
        kept, rejected = [], None
    # brute-force evaluation of the three predicates in order
    from mvrecon.geometry import project_bbox3, iou_2d
    proj = project_bbox3(bb3, cam)
    expect = []
    for d in dets:
        if d.bbox.width < CFG.min_width_px or d.bbox.height < CFG.min_height_px:
            continue
        if iou_2d(d.bbox, proj) < CFG.occlusion_iou_min:
            continue
        others = [o.bbox for o in dets if o is not d]
        if any(iou_2d(d.bbox, o) > CFG.overlap_iou_max for o in others):
            continue
        expect.append(d)
    assert kept == expect


def test_filter_all_rejected_raises():
    cam = scene_cam()
    bb3 = BBox3(np.array([0.0, 0.0, 3.0]), np.full(3, 0.9))
    tiny = det(10, 10, 20, 20)
    with pytest.raises(EmptyResult):
        filter_views(bb3, [tiny], {0: cam}, CFG)


def _random_case(rng):
    cam = scene_cam()
    bb3 = BBox3(np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.3, 0.3),
                          rng.uniform(2.5, 4.5)]),
                np.full(3, rng.uniform(0.4, 1.0)))
    dets = []
    for i in range(rng.integers(1, 6)):
        x0 = rng.uniform(0, 250)
        y0 = rng.uniform(0, 170)
        dets.append(det(x0, y0, x0 + rng.uniform(8, 70),
                        y0 + rng.uniform(8, 70), index=i))
    cfg = PruneConfig(min_width_px=rng.uniform(4, 48),
                      min_height_px=rng.uniform(4, 48),
                      occlusion_iou_min=rng.uniform(0, 0.8),
                      overlap_iou_max=rng.uniform(0.05, 0.9))
    return bb3, dets, cam, cfg


def _run(bb3, dets, cam, cfg):
    try:
        kept, _ = filter_views(bb3, dets, {0: cam}, cfg)
    except EmptyResult:
        kept = []
    return kept


def test_filter_idempotent_and_monotone():
    rng = np.random.default_rng(8)
    for _ in range(100):
        bb3, dets, cam, cfg = _random_case(rng)
        kept = _run(bb3, dets, cam, cfg)
        assert all(d in dets for d in kept)
        # filtering the survivors again with fewer same-frame rivals can
        # only keep them all
        assert _run(bb3, kept, cam, cfg) == kept if kept else True
        loose = PruneConfig(min_width_px=cfg.min_width_px * 0.5,
                            min_height_px=cfg.min_height_px * 0.5,
                            occlusion_iou_min=cfg.occlusion_iou_min * 0.5,
                            overlap_iou_max=min(
                                1.0, cfg.overlap_iou_max * 1.5))
        kept_loose = _run(bb3, dets, cam, loose)
        assert set(id(d) for d in kept) <= set(id(d) for d in kept_loose)


def test_rejections_carry_one_first_failing_reason():
    rng = np.random.default_rng(9)
    for _ in range(50):
        bb3, dets, cam, cfg = _random_case(rng)
        try:
            kept, rejected = filter_views(bb3, dets, {0: cam}, cfg)
        except EmptyResult:
            continue
        assert len(kept) + len(rejected) == len(dets)
        for d, reason in rejected:
            assert reason in (REASON_SIZE, REASON_OCCLUDED,
                              REASON_OVERLAP, REASON_NOT_VISIBLE)
