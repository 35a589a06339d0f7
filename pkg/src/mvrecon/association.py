"""Multi-view data association by clustering center-ray segments.

Each detection constrains its object's center to a segment of the
camera ray through the box center: similar triangles bound the depth by
t = f * D / w_px for the class's diameter range [D_min, D_max]. The
segments from all frames are grouped by a nonparametric sweep
clustering (new cluster whenever the nearest center is farther than the
penalty), alternating with least-squares center updates, and each
cluster is lifted to a 3D box hypothesis.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import (DegeneratePrior, InsufficientViews, UnknownClass)
from .geometry import (BBox3, LineSegment, center_ray,
                       point_segment_distance, points_segment_distances)

DEFAULT_PENALTY = 0.4
DEFAULT_MAX_ITERS = 50


@dataclass
class ClassScalePrior:
    class_id: int
    min_diameter: float
    max_diameter: float

    def __post_init__(self):
        if not (0.0 < self.min_diameter < self.max_diameter):
            raise DegeneratePrior(
                f"need 0 < min < max diameter, got "
                f"[{self.min_diameter}, {self.max_diameter}]")


@dataclass
class LineSegmentObservation:
    segment: LineSegment
    detection_ref: tuple      # (frame_id, detection index)
    class_id: int = 0

    @property
    def midpoint(self):
        return self.segment.midpoint


def segment_from_detection(det, cam, prior):
    """Center-ray segment with depth bounds from the class scale prior."""
    if prior is None:
        raise UnknownClass(f"no scale prior for class {det.class_id}")
    ray = center_ray(det.bbox, cam)
    w_px = max(det.bbox.width, det.bbox.height)
    f = cam.fx if det.bbox.width >= det.bbox.height else cam.fy
    t_min = f * prior.min_diameter / w_px
    t_max = f * prior.max_diameter / w_px
    seg = LineSegment(ray.origin, ray.direction, t_min, t_max)
    return LineSegmentObservation(seg, (det.frame_id, det.index),
                                  det.class_id)


def lstsq_center(segments, penalty=DEFAULT_PENALTY):
    """Point minimizing squared distance to the segments' support lines.

    Normal equations over A = sum(I - d d^T), b = sum((I - d d^T) p).
    Falls back to the mean of midpoints when the lines are (nearly) all
    parallel. The result is clamped to the union of the segments' axis
    boxes inflated by the penalty, so centers cannot run off along a
    poorly conditioned direction.
    """
    A = np.zeros((3, 3))
    b = np.zeros(3)
    for s in segments:
        P = np.eye(3) - np.outer(s.direction, s.direction)
        A += P
        b += P @ s.midpoint
    w = np.linalg.eigvalsh(A)
    if w[0] < 1e-9 * max(w[-1], 1e-300):
        x = np.mean([s.midpoint for s in segments], axis=0)
    else:
        x = np.linalg.solve(A, b)
    return _clamp_to_union(x, segments, penalty)


def _clamp_to_union(x, segments, inflate):
    best = None
    for s in segments:
        p0, p1 = s.endpoints
        lo = np.minimum(p0, p1) - inflate
        hi = np.maximum(p0, p1) + inflate
        c = np.clip(x, lo, hi)
        d = np.linalg.norm(c - x)
        if best is None or d < best[0]:
            best = (d, c)
            if d == 0.0:
                break
    return best[1]


@dataclass
class ClusterState:
    centers: list                 # of 3-vectors
    assignments: np.ndarray       # (n_obs,) cluster index
    penalty: float
    converged: bool = True
    objective_trace: list = field(default_factory=list)

    @property
    def n_clusters(self):
        return len(self.centers)

    def members(self, k):
        return np.nonzero(self.assignments == k)[0]


def _objective(centers, assignments, obs, penalty):
    total = penalty ** 2 * len(centers)
    for i, ob in enumerate(obs):
        total += point_segment_distance(centers[assignments[i]],
                                        ob.segment) ** 2
    return total


def dp_means_cluster(obs, penalty=DEFAULT_PENALTY, max_iters=DEFAULT_MAX_ITERS):
    """Sweep clustering of segment observations.

    Observations are processed in ascending (frame_id, detection index)
    order. During a sweep, an observation farther than the penalty from
    every current center spawns a new cluster at its segment midpoint;
    centers created mid-sweep take part immediately. After each sweep,
    centers move to the least-squares point of their members, but a
    center update is kept only if it does not increase that cluster's
    cost, which makes the total objective (sum of squared distances
    plus penalty^2 per cluster) non-increasing.
    """
    if len(obs) == 0:
        raise ValueError("no observations to cluster")
    if penalty <= 0:
        raise ValueError("penalty must be positive")
    order = sorted(range(len(obs)),
                   key=lambda i: (obs[i].detection_ref[0],
                                  obs[i].detection_ref[1]))

    centers = [obs[order[0]].midpoint.copy()]
    assignments = np.zeros(len(obs), dtype=int)
    trace = []
    converged = False
    for _ in range(max_iters):
        prev = assignments.copy()
        prev_k = len(centers)
        for i in order:
            d = np.array([point_segment_distance(c, obs[i].segment)
                          for c in centers])
            k = int(np.argmin(d))
            if d[k] >= penalty:
                centers.append(obs[i].midpoint.copy())
                assignments[i] = len(centers) - 1
            else:
                assignments[i] = k

        # drop empty clusters, renumber
        used = np.unique(assignments)
        if len(used) != len(centers):
            remap = -np.ones(len(centers), dtype=int)
            remap[used] = np.arange(len(used))
            centers = [centers[k] for k in used]
            assignments = remap[assignments]

        # guarded center refit
        for k in range(len(centers)):
            idx = np.nonzero(assignments == k)[0]
            segs = [obs[i].segment for i in idx]
            cand = lstsq_center(segs, penalty)
            old_cost = sum(point_segment_distance(centers[k], s) ** 2
                           for s in segs)
            new_cost = sum(point_segment_distance(cand, s) ** 2
                           for s in segs)
            if new_cost <= old_cost:
                centers[k] = cand

        trace.append(_objective(centers, assignments, obs, penalty))
        if len(centers) == prev_k and np.array_equal(assignments, prev):
            converged = True
            break
    return ClusterState(centers, assignments, penalty, converged, trace)


@dataclass
class ObjectHypothesis:
    cluster_id: int
    center: np.ndarray
    members: list                    # of (frame_id, detection index)
    class_id: int
    bbox3: Optional[BBox3] = None


def lift_bbox3(center, member_obs, detections, cameras, prior):
    """3D box from a cluster: median of per-view diameter estimates.

    Inverts the similar-triangles bound at the estimated center depth:
    D = w_px * depth / f. Needs at least two observations from two
    distinct frames.
    """
    frames = {ob.detection_ref[0] for ob in member_obs}
    if len(member_obs) < 2 or len(frames) < 2:
        raise InsufficientViews(
            f"need >= 2 views to lift a box, got {len(frames)}")
    diameters = []
    for ob in member_obs:
        det = detections[ob.detection_ref]
        cam = cameras[ob.detection_ref[0]]
        depth = cam.world_to_cam(center[None])[0, 2]
        w_px = max(det.bbox.width, det.bbox.height)
        f = cam.fx if det.bbox.width >= det.bbox.height else cam.fy
        diameters.append(w_px * depth / f)
    d = float(np.median(diameters))
    d = min(max(d, prior.min_diameter), prior.max_diameter)
    return BBox3(center.copy(), np.full(3, d / 2.0))


def associate_detections(detections, cameras, priors,
                         penalty=DEFAULT_PENALTY,
                         max_iters=DEFAULT_MAX_ITERS):
    """Detections -> object hypotheses via segment clustering.

    detections : list of Detection (with frame_id and index set)
    cameras : mapping frame_id -> PinholeCamera
    priors : mapping class_id -> ClassScalePrior

    Returns (hypotheses, cluster state, observations). Clusters that
    cannot be lifted to a 3D box keep bbox3=None.
    """
    obs = []
    for det in detections:
        prior = priors.get(det.class_id)
        cam = cameras[det.frame_id]
        obs.append(segment_from_detection(det, cam, prior))
    state = dp_means_cluster(obs, penalty, max_iters)

    det_table = {(d.frame_id, d.index): d for d in detections}
    hyps = []
    for k in range(state.n_clusters):
        members = [obs[i] for i in state.members(k)]
        vals, counts = np.unique([m.class_id for m in members],
                                 return_counts=True)
        class_id = vals[counts.argmax()].item()
        hyp = ObjectHypothesis(
            cluster_id=k, center=np.asarray(state.centers[k]),
            members=[m.detection_ref for m in members], class_id=class_id)
        try:
            hyp.bbox3 = lift_bbox3(hyp.center, members, det_table, cameras,
                                   priors[class_id])
        except InsufficientViews:
            hyp.bbox3 = None
        hyps.append(hyp)
    return hyps, state, obs
