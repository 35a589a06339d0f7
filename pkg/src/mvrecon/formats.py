"""File formats shared across the pipeline stages.

Everything here is deterministic: fixed key order, fixed float
formatting via repr, no timestamps. Rerunning a stage with the same
inputs produces byte-identical files.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import FormatError
from .geometry import BBox2, BBox3, PinholeCamera, SimilarityTransform
from .pruning import Detection


# ---------------------------------------------------------------------------
# run-length encoded binary masks


def rle_encode(mask):
    """Row-major RLE: counts of alternating 0-runs and 1-runs.

    The first count is the number of leading zeros (may be 0).
    """
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1)
    if flat.size == 0:
        raise FormatError("empty mask")
    change = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"width": int(m.shape[1]), "height": int(m.shape[0]),
            "counts": [int(c) for c in counts]}


def rle_decode(rle):
    counts = rle["counts"]
    w, h = int(rle["width"]), int(rle["height"])
    total = sum(counts)
    if total != w * h:
        raise FormatError(f"RLE counts sum {total} != {w}x{h}")
    flat = np.zeros(total, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        if val:
            flat[pos:pos + c] = True
        pos += c
        val = not val
    return flat.reshape(h, w)


# ---------------------------------------------------------------------------
# camera trajectories


def save_trajectory(path, cameras):
    """cameras: mapping frame_id -> PinholeCamera, written sorted."""
    rows = []
    for fid in sorted(cameras):
        cam = cameras[fid]
        pose = cam.pose_world_from_cam
        rows.append({
            "frame_id": int(fid),
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": int(cam.width), "height": int(cam.height),
            "q_wxyz": [float(v) for v in pose.rotation],
            "t_xyz": [float(v) for v in pose.translation],
        })
    with open(path, "w") as f:
        json.dump(rows, f, indent=1)


def load_trajectory(path):
    with open(path) as f:
        rows = json.load(f)
    cameras = {}
    for r in rows:
        pose = SimilarityTransform(np.asarray(r["q_wxyz"], dtype=np.float64),
                                   np.asarray(r["t_xyz"], dtype=np.float64),
                                   1.0)
        cameras[int(r["frame_id"])] = PinholeCamera(
            fx=float(r["fx"]), fy=float(r["fy"]),
            cx=float(r["cx"]), cy=float(r["cy"]),
            width=int(r["width"]), height=int(r["height"]),
            pose_world_from_cam=pose)
    return cameras


# ---------------------------------------------------------------------------
# detections


def detection_to_record(det):
    rec = {
        "frame_id": int(det.frame_id),
        "index": int(det.index),
        "class_id": det.class_id,
        "score": float(det.score),
        "bbox": [det.bbox.x_min, det.bbox.y_min, det.bbox.x_max,
                 det.bbox.y_max],
        "mask_rle": rle_encode(det.mask),
    }
    if det.instance_hint is not None:
        rec["instance_hint"] = int(det.instance_hint)
    if det.code is not None:
        rec["code"] = [float(v) for v in det.code]
    return rec


def record_to_detection(rec):
    code = rec.get("code")
    return Detection(
        frame_id=int(rec["frame_id"]),
        bbox=BBox2(*[float(v) for v in rec["bbox"]]),
        mask=rle_decode(rec["mask_rle"]),
        class_id=rec.get("class_id", 0),
        score=float(rec.get("score", 1.0)),
        instance_hint=rec.get("instance_hint"),
        code=None if code is None else np.asarray(code, dtype=np.float64),
        index=int(rec.get("index", 0)))


def save_detections(path, detections):
    with open(path, "w") as f:
        for det in detections:
            f.write(json.dumps(detection_to_record(det)) + "\n")


def load_detections(path):
    dets = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                dets.append(record_to_detection(json.loads(line)))
    return dets


# ---------------------------------------------------------------------------
# cluster report


def save_cluster_report(path, hypotheses):
    rows = []
    for h in hypotheses:
        row = {
            "cluster_id": int(h.cluster_id),
            "class_id": h.class_id,
            "center": [float(v) for v in h.center],
            "members": [[int(f), int(i)] for f, i in h.members],
        }
        if h.bbox3 is not None:
            row["bbox3"] = {
                "center": [float(v) for v in h.bbox3.center],
                "half_extents": [float(v) for v in h.bbox3.half_extents],
            }
        rows.append(row)
    with open(path, "w") as f:
        json.dump({"clusters": rows}, f, indent=1)


def load_cluster_report(path):
    from .association import ObjectHypothesis
    with open(path) as f:
        doc = json.load(f)
    hyps = []
    for row in doc["clusters"]:
        bb = row.get("bbox3")
        hyps.append(ObjectHypothesis(
            cluster_id=int(row["cluster_id"]),
            center=np.asarray(row["center"], dtype=np.float64),
            members=[(int(f), int(i)) for f, i in row["members"]],
            class_id=row["class_id"],
            bbox3=None if bb is None else BBox3(
                np.asarray(bb["center"], dtype=np.float64),
                np.asarray(bb["half_extents"], dtype=np.float64))))
    return hyps


# ---------------------------------------------------------------------------
# keypoints and ground-truth poses


def save_keypoints(path, keypoints):
    """keypoints: mapping object id -> (n, 3) world points."""
    doc = {str(k): [[float(x) for x in p] for p in v]
           for k, v in keypoints.items()}
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_keypoints(path):
    with open(path) as f:
        doc = json.load(f)
    return {int(k): np.asarray(v, dtype=np.float64).reshape(-1, 3)
            for k, v in doc.items()}


def save_poses(path, poses):
    """poses: mapping object id -> dict with pose and optional shape id."""
    doc = {}
    for k in sorted(poses):
        entry = poses[k]
        pose = entry["pose"]
        doc[str(k)] = {
            "q_wxyz": [float(v) for v in pose.rotation],
            "t_xyz": [float(v) for v in pose.translation],
            "scale": float(pose.scale),
        }
        if "shape_id" in entry:
            doc[str(k)]["shape_id"] = int(entry["shape_id"])
        if "code" in entry and entry["code"] is not None:
            doc[str(k)]["code"] = [float(v) for v in entry["code"]]
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_poses(path):
    with open(path) as f:
        doc = json.load(f)
    out = {}
    for k, v in doc.items():
        pose = SimilarityTransform(np.asarray(v["q_wxyz"], dtype=np.float64),
                                   np.asarray(v["t_xyz"], dtype=np.float64),
                                   float(v["scale"]))
        entry = {"pose": pose}
        if "shape_id" in v:
            entry["shape_id"] = int(v["shape_id"])
        if "code" in v:
            entry["code"] = np.asarray(v["code"], dtype=np.float64)
        out[int(k)] = entry
    return out


# ---------------------------------------------------------------------------
# images: 8-bit PGM and float PFM


def save_pgm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def load_pgm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = []
    pos = 0
    while len(parts) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        parts.append(data[start:pos])
    if parts[0] != b"P5":
        raise FormatError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise FormatError("16-bit PGM not supported")
    pos += 1
    img = np.frombuffer(data[pos:pos + w * h], dtype=np.uint8)
    return img.reshape(h, w).copy()


def save_pfm(path, image):
    """Grayscale PFM, little-endian, top-down row order via negative scale."""
    img = np.asarray(image, dtype="<f4")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(img[::-1].tobytes())  # PFM stores bottom-up


def load_pfm(path):
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header != b"Pf":
            raise FormatError("not a grayscale PFM")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        img = np.frombuffer(f.read(w * h * 4), dtype=dtype).reshape(h, w)
    return img[::-1].astype(np.float64)


# ---------------------------------------------------------------------------
# optimizer iteration logs

LOG_KEYS = ("iter", "stage", "E_total", "E_s", "E_p", "E_g", "E_r",
            "damping", "accepted")


def save_iteration_log(path, rows):
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps({k: row[k] for k in LOG_KEYS}) + "\n")


def load_iteration_log(path):
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
