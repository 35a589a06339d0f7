"""End-to-end reconstruction over an on-disk dataset.

Stage order: ingest -> associate -> prune -> fuse -> sparse -> dense ->
eval. Every stage writes its outputs under the run directory and can be
skipped on rerun when those outputs already exist (resume=True), so a
crashed or interrupted run picks up where it stopped. Per-object
failures are recorded in the report and do not abort the other objects.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from . import formats
from .association import ClassScalePrior, associate_detections
from .embedding import (fuse_codes_average, fuse_codes_vote, load_checkpoint)
from .errors import EmptyResult, MvReconError
from .geometry import SimilarityTransform
from .mesher import Mesh, extract_mesh, load_ply, save_ply
from .metrics import evaluate_reconstruction
from .optimizer import (EnergyConfig, OptState, ViewObservation,
                        optimize_dense, optimize_sparse)
from .pruning import PruneConfig, filter_views

STAGES = ("associate", "prune", "fuse", "sparse", "dense", "eval")


@dataclass
class PipelineConfig:
    """Knobs for every stage, loadable from one TOML file.

    Sections map to the per-module config types: [association],
    [pruning], [fusion], [energy], [eval]. Dotted override keys use the
    same names, e.g. association.penalty or energy.w_p.
    """

    penalty: float = 0.4
    assoc_max_iters: int = 50
    default_prior: tuple = (0.3, 3.0)
    priors: dict = field(default_factory=dict)
    prune: PruneConfig = field(default_factory=PruneConfig)
    fuse_method: str = "average"
    vote_k: int = 4
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    tau: float = 0.05
    iou_resolution: int = 32
    eval_samples: int = 10000
    with_emd: bool = True
    kp_inflate: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.fuse_method not in ("average", "vote"):
            raise ValueError(f"unknown fuse method {self.fuse_method!r}")

    @staticmethod
    def from_toml(path):
        with open(path, "rb") as f:
            doc = _toml.load(f)
        return PipelineConfig._from_doc(doc)

    @staticmethod
    def _from_doc(doc):
        cfg = PipelineConfig()
        assoc = doc.get("association", {})
        cfg.penalty = float(assoc.get("penalty", cfg.penalty))
        cfg.assoc_max_iters = int(assoc.get("max_iters",
                                            cfg.assoc_max_iters))
        if "default_prior" in assoc:
            cfg.default_prior = tuple(assoc["default_prior"])
        cfg.priors = {k: tuple(v)
                      for k, v in assoc.get("priors", {}).items()}
        if "pruning" in doc:
            cfg.prune = PruneConfig(**doc["pruning"])
        fus = doc.get("fusion", {})
        cfg.fuse_method = fus.get("method", cfg.fuse_method)
        cfg.vote_k = int(fus.get("vote_k", cfg.vote_k))
        if "energy" in doc:
            cfg.energy = EnergyConfig(**doc["energy"])
        ev = doc.get("eval", {})
        cfg.tau = float(ev.get("tau", cfg.tau))
        cfg.iou_resolution = int(ev.get("iou_resolution",
                                        cfg.iou_resolution))
        cfg.eval_samples = int(ev.get("n_samples", cfg.eval_samples))
        cfg.with_emd = bool(ev.get("with_emd", cfg.with_emd))
        cfg.kp_inflate = float(doc.get("pipeline", {}).get(
            "kp_inflate", cfg.kp_inflate))
        cfg.seed = int(doc.get("pipeline", {}).get("seed", cfg.seed))
        cfg.__post_init__()
        return cfg

    def apply_overrides(self, overrides):
        """overrides: {dotted key: value}, e.g. {"energy.w_p": 0.5}."""
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if not name:
                setattr(self, section, value)
            elif section == "association":
                attr = {"penalty": "penalty",
                        "max_iters": "assoc_max_iters",
                        "default_prior": "default_prior"}[name]
                setattr(self, attr,
                        tuple(value) if name == "default_prior" else value)
            elif section == "pruning":
                self.prune = dataclasses.replace(self.prune, **{name: value})
            elif section == "fusion":
                attr = {"method": "fuse_method", "vote_k": "vote_k"}[name]
                setattr(self, attr, value)
            elif section == "energy":
                self.energy = dataclasses.replace(self.energy,
                                                  **{name: value})
            elif section == "eval":
                attr = {"tau": "tau", "iou_resolution": "iou_resolution",
                        "n_samples": "eval_samples",
                        "with_emd": "with_emd"}[name]
                setattr(self, attr, value)
            elif section == "pipeline":
                setattr(self, name, value)
            else:
                raise KeyError(f"unknown config key {key!r}")
        self.__post_init__()
        return self


@dataclass
class Dataset:
    cameras: dict        # frame_id -> PinholeCamera
    detections: list
    keypoint_pool: np.ndarray
    images: dict         # frame_id -> (H, W) float array
    gt_poses: dict = None
    gt_dir: str = None


def load_dataset(dataset_dir):
    cameras = formats.load_trajectory(
        os.path.join(dataset_dir, "trajectory.json"))
    detections = formats.load_detections(
        os.path.join(dataset_dir, "detections.jsonl"))
    kp_path = os.path.join(dataset_dir, "keypoints.json")
    pool = np.zeros((0, 3))
    if os.path.exists(kp_path):
        sets = formats.load_keypoints(kp_path)
        if sets:
            pool = np.concatenate([sets[k] for k in sorted(sets)], axis=0)
    images = {}
    for fid in cameras:
        p = os.path.join(dataset_dir, "frames", f"frame_{fid:04d}.pgm")
        if os.path.exists(p):
            images[fid] = formats.load_pgm(p).astype(np.float64)
    gt_poses, gt_dir = None, None
    gp = os.path.join(dataset_dir, "gt", "poses.json")
    if os.path.exists(gp):
        gt_poses = formats.load_poses(gp)
        gt_dir = os.path.join(dataset_dir, "gt")
    return Dataset(cameras, detections, pool, images, gt_poses, gt_dir)


def _decode_mesh(model, z, spacing, refine, domain):
    return extract_mesh(lambda p: model.sdf_decoder.evaluate(p, z),
                        spacing, refine, domain)[0]


def _init_pose(model, z, hyp):
    """Association output -> first pose guess: identity rotation at the
    cluster center, scale matching the lifted box to the decoded cloud."""
    scale = 1.0
    if hyp.bbox3 is not None:
        cloud = model.point_decoder.decode(z)
        reach = float(np.abs(cloud).max())
        want = float(hyp.bbox3.half_extents.max())
        if reach > 1e-6 and want > 1e-6:
            scale = want / reach
    return SimilarityTransform.identity().perturbed(
        np.r_[0.0, 0.0, 0.0, hyp.center, np.log(scale)])


def _kp_near(pool, hyp, hyps, cfg):
    """World keypoints plausibly on this object: inside the inflated
    cluster box and closer to this cluster's center than to any other.
    The pool carries no object identity, so proximity is the only cue.
    """
    if len(pool) == 0:
        return None
    if hyp.bbox3 is not None:
        box = hyp.bbox3.inflated(cfg.kp_inflate)
        keep = box.contains(pool)
    else:
        r = 0.5 * cfg.default_prior[1]
        keep = np.linalg.norm(pool - hyp.center, axis=1) <= r
    centers = np.stack([h.center for h in hyps])
    d = np.linalg.norm(pool[:, None, :] - centers[None, :, :], axis=2)
    mine = [i for i, h in enumerate(hyps) if h.cluster_id == hyp.cluster_id]
    keep &= d.argmin(axis=1) == mine[0]
    return pool[keep] if keep.any() else None


def _detection_lookup(detections):
    return {(d.frame_id, d.index): d for d in detections}


def stage_associate(data, cfg):
    """Cluster detections into object hypotheses."""
    classes = {d.class_id for d in data.detections}
    priors = {c: ClassScalePrior(c, *cfg.priors.get(c, cfg.default_prior))
              for c in classes}
    hyps, _, _ = associate_detections(
        data.detections, data.cameras, priors,
        penalty=cfg.penalty, max_iters=cfg.assoc_max_iters)
    return hyps


def stage_prune(hyps, data, by_ref, cfg, fail=None):
    """Drop unreliable views per cluster; returns (kept_refs, rows)."""
    kept_refs, rows = {}, []
    # boxes of other clusters per frame, for cross-object overlap
    member_boxes = {}
    for h in hyps:
        for ref in h.members:
            member_boxes.setdefault(ref[0], []).append(
                (h.cluster_id, by_ref[ref].bbox))
    for h in hyps:
        dets = [by_ref[r] for r in h.members]
        frame_others = {}
        for fid, entries in member_boxes.items():
            other = [bb for cid, bb in entries if cid != h.cluster_id]
            if other:
                frame_others[fid] = other
        try:
            kept, rejected = filter_views(h.bbox3, dets, data.cameras,
                                          cfg.prune, frame_others)
        except EmptyResult as e:
            if fail is not None:
                fail("prune", h.cluster_id, e)
            rows.append({"cluster_id": h.cluster_id, "kept": [],
                         "rejected": [], "error": str(e)})
            continue
        kept_refs[h.cluster_id] = [(d.frame_id, d.index) for d in kept]
        rows.append({
            "cluster_id": h.cluster_id,
            "kept": [[d.frame_id, d.index] for d in kept],
            "rejected": [[d.frame_id, d.index, reason]
                         for d, reason in rejected],
        })
    return kept_refs, rows


def stage_fuse(hyps, kept_refs, by_ref, model, cfg, fail=None):
    """Single code per cluster from its surviving per-view codes."""
    fused = {}
    for h in hyps:
        refs = kept_refs.get(h.cluster_id, [])
        codes = [by_ref[r].code for r in refs if by_ref[r].code is not None]
        if not codes:
            if fail is not None:
                fail("fuse", h.cluster_id,
                     EmptyResult("no codes on surviving detections"))
            continue
        if cfg.fuse_method == "vote":
            z = fuse_codes_vote(np.stack(codes), model.codes,
                                model.shape_ids, k=cfg.vote_k)
        else:
            z = fuse_codes_average(np.stack(codes))
        fused[h.cluster_id] = z
    return fused


def save_pruned(path, rows):
    with open(path, "w") as f:
        json.dump({"clusters": rows}, f, indent=1)


def load_pruned(path):
    with open(path) as f:
        doc = json.load(f)
    kept_refs = {}
    for row in doc["clusters"]:
        kept_refs[int(row["cluster_id"])] = [
            (int(a), int(b)) for a, b in row["kept"]]
    return kept_refs, doc["clusters"]


def save_fused(path, fused):
    with open(path, "w") as f:
        json.dump({str(k): [float(v) for v in z]
                   for k, z in sorted(fused.items())}, f, indent=1)


def load_fused(path):
    with open(path) as f:
        doc = json.load(f)
    return {int(k): np.asarray(v, dtype=np.float64)
            for k, v in doc.items()}


def run_pipeline(dataset_dir, checkpoint_path, out_dir, config=None,
                 resume=False, stages=("sparse", "dense")):
    """Full reconstruction run; returns the report dict (also on disk).

    stages limits which optimization passes run; earlier stages
    (associate/prune/fuse) always run or load from cache.
    """
    cfg = config or PipelineConfig()
    os.makedirs(os.path.join(out_dir, "meshes"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "objects"), exist_ok=True)
    model = load_checkpoint(checkpoint_path)
    data = load_dataset(dataset_dir)
    by_ref = _detection_lookup(data.detections)
    report = {"config_seed": cfg.seed, "stages": {}, "objects": [],
              "failures": []}

    def fail(stage, cluster_id, exc):
        report["failures"].append({
            "stage": stage,
            "cluster_id": cluster_id,
            "error": type(exc).__name__,
            "message": str(exc),
        })

    # ------------------------------------------------------------ associate
    clusters_path = os.path.join(out_dir, "clusters.json")
    if resume and os.path.exists(clusters_path):
        hyps = formats.load_cluster_report(clusters_path)
        report["stages"]["associate"] = "cached"
    else:
        hyps = stage_associate(data, cfg)
        formats.save_cluster_report(clusters_path, hyps)
        report["stages"]["associate"] = "ran"
    report["n_clusters"] = len(hyps)

    # ---------------------------------------------------------------- prune
    pruned_path = os.path.join(out_dir, "pruned.json")
    if resume and os.path.exists(pruned_path):
        kept_refs, _ = load_pruned(pruned_path)
        report["stages"]["prune"] = "cached"
    else:
        kept_refs, rows = stage_prune(hyps, data, by_ref, cfg, fail)
        save_pruned(pruned_path, rows)
        report["stages"]["prune"] = "ran"

    # ----------------------------------------------------------------- fuse
    fused_path = os.path.join(out_dir, "fused.json")
    if resume and os.path.exists(fused_path):
        fused = load_fused(fused_path)
        report["stages"]["fuse"] = "cached"
    else:
        fused = stage_fuse(hyps, kept_refs, by_ref, model, cfg, fail)
        save_fused(fused_path, fused)
        report["stages"]["fuse"] = "ran"

    # ------------------------------------------------------ optimize stages
    results = {}
    for h in hyps:
        cid = h.cluster_id
        if cid not in fused:
            continue
        obj_dir = os.path.join(out_dir, "objects", f"cluster_{cid:02d}")
        os.makedirs(obj_dir, exist_ok=True)
        z0 = fused[cid]
        pose0 = _init_pose(model, z0, h)
        kp = _kp_near(data.keypoint_pool, h, hyps, cfg)
        views = []
        for ref in kept_refs.get(cid, []):
            det = by_ref[ref]
            if det.frame_id not in data.images:
                continue
            views.append(ViewObservation(det.frame_id, det,
                                         data.cameras[det.frame_id],
                                         data.images[det.frame_id], kp))
        entry = {"cluster_id": cid, "class_id": h.class_id,
                 "n_views": len(views), "stages": {}}
        results[cid] = entry

        fused_mesh_path = os.path.join(out_dir, "meshes",
                                       f"cluster_{cid:02d}_fused.ply")
        if not (resume and os.path.exists(fused_mesh_path)):
            try:
                mesh = _decode_mesh(model, z0, cfg.energy.mesh_spacing,
                                    cfg.energy.mesh_refine,
                                    cfg.energy.mesh_domain)
                save_ply(fused_mesh_path, mesh)
            except MvReconError as e:
                fail("fuse", cid, e)
        formats.save_poses(os.path.join(obj_dir, "fused.json"),
                           {cid: {"pose": pose0, "code": z0}})
        entry["stages"]["fuse"] = "ok"

        # sparse
        state = OptState(z0, pose0)
        sparse_json = os.path.join(obj_dir, "sparse.json")
        if resume and os.path.exists(sparse_json):
            rec = formats.load_poses(sparse_json)[cid]
            state = OptState(rec["code"], rec["pose"])
            entry["stages"]["sparse"] = "cached"
        elif "sparse" in stages:
            try:
                state = optimize_sparse(state, views, model, cfg.energy)
            except MvReconError as e:
                fail("sparse", cid, e)
                continue
            formats.save_poses(sparse_json,
                               {cid: {"pose": state.pose, "code": state.z}})
            formats.save_iteration_log(
                os.path.join(obj_dir, "sparse_log.jsonl"), state.log)
            try:
                mesh = _decode_mesh(model, state.z, cfg.energy.mesh_spacing,
                                    cfg.energy.mesh_refine,
                                    cfg.energy.mesh_domain)
                save_ply(os.path.join(out_dir, "meshes",
                                      f"cluster_{cid:02d}_sparse.ply"), mesh)
            except MvReconError as e:
                fail("sparse", cid, e)
            entry["stages"]["sparse"] = state.stop_reason

        # dense
        dense_json = os.path.join(obj_dir, "dense.json")
        if resume and os.path.exists(dense_json):
            rec = formats.load_poses(dense_json)[cid]
            state = OptState(rec["code"], rec["pose"])
            entry["stages"]["dense"] = "cached"
        elif "dense" in stages:
            try:
                state = optimize_dense(state, views, model, cfg.energy)
            except MvReconError as e:
                fail("dense", cid, e)
                continue
            formats.save_poses(dense_json,
                               {cid: {"pose": state.pose, "code": state.z}})
            formats.save_iteration_log(
                os.path.join(obj_dir, "dense_log.jsonl"), state.log)
            try:
                mesh = _decode_mesh(model, state.z, cfg.energy.mesh_spacing,
                                    cfg.energy.mesh_refine,
                                    cfg.energy.mesh_domain)
                save_ply(os.path.join(out_dir, "meshes",
                                      f"cluster_{cid:02d}_dense.ply"), mesh)
            except MvReconError as e:
                fail("dense", cid, e)
            entry["stages"]["dense"] = state.stop_reason
        entry["pose"] = {
            "q_wxyz": [float(v) for v in state.pose.rotation],
            "t_xyz": [float(v) for v in state.pose.translation],
            "scale": float(state.pose.scale),
        }

    # ----------------------------------------------------------------- eval
    if data.gt_poses is not None:
        metrics = _evaluate_against_gt(out_dir, data, hyps, kept_refs,
                                       by_ref, results, cfg)
        with open(os.path.join(out_dir, "metrics.json"), "w") as f:
            json.dump(metrics, f, indent=1)
        report["stages"]["eval"] = "ran"

    report["objects"] = [results[k] for k in sorted(results)]
    with open(os.path.join(out_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1)
    return report


def _match_gt(hyp, kept, by_ref, gt_poses):
    """Cluster -> ground-truth object id, by detection hints when
    available, else by nearest ground-truth center."""
    hints = [by_ref[r].instance_hint for r in kept
             if by_ref[r].instance_hint is not None]
    if hints:
        vals, counts = np.unique(hints, return_counts=True)
        return int(vals[np.argmax(counts)])
    best, best_d = None, np.inf
    for oid, entry in gt_poses.items():
        d = float(np.linalg.norm(entry["pose"].translation - hyp.center))
        if d < best_d:
            best, best_d = oid, d
    return best


def _world_mesh(mesh, pose):
    return Mesh(pose.apply(mesh.vertices), mesh.faces)


def _evaluate_against_gt(out_dir, data, hyps, kept_refs, by_ref, results,
                         cfg):
    metrics = {}
    for h in hyps:
        cid = h.cluster_id
        if cid not in results or "pose" not in results.get(cid, {}):
            continue
        gt_id = _match_gt(h, kept_refs.get(cid, []), by_ref, data.gt_poses)
        if gt_id is None or gt_id not in data.gt_poses:
            continue
        gt_entry = data.gt_poses[gt_id]
        gt_mesh = _world_mesh(
            load_ply(os.path.join(data.gt_dir,
                                  f"object_{gt_id:02d}.ply"))[0],
            gt_entry["pose"])
        row = {"gt_object": gt_id}
        for stage in ("fused", "sparse", "dense"):
            mesh_path = os.path.join(out_dir, "meshes",
                                     f"cluster_{cid:02d}_{stage}.ply")
            pose_path = os.path.join(out_dir, "objects",
                                     f"cluster_{cid:02d}", f"{stage}.json")
            if not (os.path.exists(mesh_path) and os.path.exists(pose_path)):
                continue
            pose = formats.load_poses(pose_path)[cid]["pose"]
            pred = _world_mesh(load_ply(mesh_path)[0], pose)
            try:
                rep = evaluate_reconstruction(
                    pred, gt_mesh, tau=cfg.tau,
                    resolution=cfg.iou_resolution,
                    n_samples=cfg.eval_samples, seed=cfg.seed,
                    with_emd=cfg.with_emd)
            except MvReconError as e:
                row[stage] = {"error": type(e).__name__, "message": str(e)}
                continue
            row[stage] = rep.to_dict()
        metrics[str(cid)] = row
        if cid in results:
            results[cid]["gt_object"] = gt_id
    return metrics
