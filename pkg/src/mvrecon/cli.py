"""Command-line entry points for the reconstruction pipeline.

One subcommand per stage (synth, train, associate, prune, fuse,
optimize, export, eval) plus `run` for the whole chain. Configuration
comes from a TOML file; any key can be overridden on the command line
with --set section.key=value, and flags beat the file, which beats the
defaults. Failures print a one-line JSON record to stderr and exit
nonzero so callers can script against the stages.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib as _toml
else:
    import tomli as _toml

from . import formats
from .corpus import generate_corpus
from .embedding import load_checkpoint, save_checkpoint
from .errors import FormatError, MvReconError
from .mesher import extract_mesh, load_ply, save_obj, save_ply
from .metrics import evaluate_reconstruction
from .pipeline import (PipelineConfig, load_dataset, run_pipeline,
                       save_pruned, stage_associate, stage_fuse,
                       stage_prune, load_pruned, save_fused)
from .training import ModelConfig, TrainConfig, train_joint


def _set_thread_cap(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        pass


def _parse_override(text):
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ValueError(f"override must look like section.key=value: {text!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def _config_from_args(args):
    """defaults -> --config file -> --set overrides, in that order."""
    if getattr(args, "config", None):
        cfg = PipelineConfig.from_toml(args.config)
    else:
        cfg = PipelineConfig()
    overrides = dict(_parse_override(s) for s in (args.set or []))
    if overrides:
        cfg.apply_overrides(overrides)
    return cfg


def _add_common(p):
    p.add_argument("--config", help="pipeline config TOML")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key, e.g. energy.w_p=0.5")


def _load_clusters(out_dir):
    path = os.path.join(out_dir, "clusters.json")
    if not os.path.exists(path):
        raise FormatError(f"{path} not found; run `associate` first")
    return formats.load_cluster_report(path)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    from . import synth
    model = load_checkpoint(args.checkpoint) if args.checkpoint else None
    spec = synth.load_scene_spec(args.scene, model=model)
    codes = None
    if model is not None:
        codes = {int(s): model.code_of(int(s)) for s in model.shape_ids}
    synth.write_dataset(args.out, spec, codes=codes,
                        gt_mesh_spacing=args.gt_spacing)
    print(f"dataset written to {args.out}")
    return 0


def cmd_train(args):
    shapes = generate_corpus(args.corpus_size, seed=args.corpus_seed)
    mc = ModelConfig.desk() if args.preset == "desk" else ModelConfig.full()
    tc = TrainConfig.desk() if args.preset == "desk" else TrainConfig.full()
    if args.config:
        with open(args.config, "rb") as f:
            doc = _toml.load(f)
        for key, val in doc.get("model", {}).items():
            setattr(mc, key, tuple(val) if isinstance(val, list) else val)
        for key, val in doc.get("training", {}).items():
            setattr(tc, key, val)
    if args.epochs is not None:
        tc.epochs = args.epochs
    if args.seed is not None:
        tc.seed = args.seed
    model, hist = train_joint(shapes, mc, tc, verbose=args.verbose)
    save_checkpoint(args.out, model)
    print(f"checkpoint written to {args.out}  "
          f"final loss {hist.final_loss:.6f}")
    return 0


def cmd_associate(args):
    cfg = _config_from_args(args)
    data = load_dataset(args.dataset)
    hyps = stage_associate(data, cfg)
    os.makedirs(args.out_dir, exist_ok=True)
    formats.save_cluster_report(os.path.join(args.out_dir, "clusters.json"),
                                hyps)
    print(f"{len(hyps)} clusters -> {args.out_dir}/clusters.json")
    return 0


def cmd_prune(args):
    cfg = _config_from_args(args)
    data = load_dataset(args.dataset)
    hyps = _load_clusters(args.out_dir)
    by_ref = {(d.frame_id, d.index): d for d in data.detections}
    kept_refs, rows = stage_prune(hyps, data, by_ref, cfg)
    save_pruned(os.path.join(args.out_dir, "pruned.json"), rows)
    n_kept = sum(len(v) for v in kept_refs.values())
    print(f"kept {n_kept} detections across {len(kept_refs)} clusters "
          f"-> {args.out_dir}/pruned.json")
    return 0


def cmd_fuse(args):
    cfg = _config_from_args(args)
    if args.method:
        cfg.apply_overrides({"fusion.method": args.method})
    if args.vote_k is not None:
        cfg.apply_overrides({"fusion.vote_k": args.vote_k})
    data = load_dataset(args.dataset)
    hyps = _load_clusters(args.out_dir)
    kept_refs, _ = load_pruned(os.path.join(args.out_dir, "pruned.json"))
    by_ref = {(d.frame_id, d.index): d for d in data.detections}
    model = load_checkpoint(args.checkpoint)
    fused = stage_fuse(hyps, kept_refs, by_ref, model, cfg)
    save_fused(os.path.join(args.out_dir, "fused.json"), fused)
    print(f"fused {len(fused)} codes ({cfg.fuse_method}) "
          f"-> {args.out_dir}/fused.json")
    return 0


def cmd_optimize(args):
    cfg = _config_from_args(args)
    stages = {"sparse": ("sparse",), "dense": ("dense",),
              "both": ("sparse", "dense")}[args.stage]
    rep = run_pipeline(args.dataset, args.checkpoint, args.out_dir,
                       config=cfg, resume=True, stages=stages)
    done = [o["cluster_id"] for o in rep["objects"]]
    print(f"optimized clusters {done}; "
          f"{len(rep['failures'])} stage failures recorded")
    return 0


def cmd_run(args):
    cfg = _config_from_args(args)
    rep = run_pipeline(args.dataset, args.checkpoint, args.out_dir,
                       config=cfg, resume=args.resume)
    print(json.dumps({"n_clusters": rep["n_clusters"],
                      "objects": len(rep["objects"]),
                      "failures": len(rep["failures"]),
                      "out_dir": args.out_dir}))
    return 0


def cmd_export(args):
    model = load_checkpoint(args.checkpoint)
    if args.code_file:
        with open(args.code_file) as f:
            z = np.asarray(json.load(f), dtype=np.float64)
    else:
        z = model.code_of(args.shape_id)
    mesh, _ = extract_mesh(lambda p: model.sdf_decoder.evaluate(p, z),
                           args.spacing, args.refine)
    if args.out.endswith(".obj"):
        save_obj(args.out, mesh)
    else:
        save_ply(args.out, mesh)
    print(f"{len(mesh.vertices)} vertices, {len(mesh.faces)} faces "
          f"-> {args.out}")
    return 0


def cmd_eval(args):
    pred, _ = load_ply(args.pred)
    gt, _ = load_ply(args.gt)
    rep = evaluate_reconstruction(
        pred, gt, tau=args.tau, resolution=args.resolution,
        n_samples=args.samples, seed=args.seed, cd_form=args.cd_form,
        with_emd=not args.no_emd)
    doc = rep.to_dict()
    if args.out:
        with open(args.out, "w") as f:
            json.dump(doc, f, indent=1)
    print(rep.summary())
    return 0


# ------------------------------------------------------------------ parser

def build_parser():
    ap = argparse.ArgumentParser(
        prog="mvrecon",
        description="multi-view object reconstruction pipeline")
    ap.add_argument("--threads", type=int, default=None,
                    help="cap worker/BLAS threads")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--scene", required=True, help="scene TOML")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint",
                   help="attach this model's codes to detections")
    p.add_argument("--gt-spacing", type=float, default=0.1)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit decoders and codes to a corpus")
    p.add_argument("--corpus-size", type=int, default=20)
    p.add_argument("--corpus-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("desk", "full"), default="desk")
    p.add_argument("--config",
                   help="TOML with [model] and [training] sections")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("associate", help="cluster detections into objects")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_associate)

    p = sub.add_parser("prune", help="drop unreliable detections per cluster")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("fuse", help="fuse per-view codes per cluster")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--method", choices=("average", "vote"))
    p.add_argument("--vote-k", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("optimize", help="run the optimization stages")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--stage", choices=("sparse", "dense", "both"),
                   default="both")
    _add_common(p)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("export", help="decode a code to a mesh file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help=".ply or .obj")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--shape-id", type=int)
    g.add_argument("--code-file", help="JSON array of code values")
    p.add_argument("--spacing", type=float, default=0.05)
    p.add_argument("--refine", type=int, default=4)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("eval", help="compare two meshes")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--resolution", type=int, default=32)
    p.add_argument("--samples", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cd-form", choices=("squared", "root"),
                   default="squared")
    p.add_argument("--no-emd", action="store_true")
    p.add_argument("--out", help="write the report JSON here too")
    p.set_defaults(func=cmd_eval)

    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    _set_thread_cap(args.threads)
    try:
        return args.func(args)
    except (MvReconError, OSError, ValueError, KeyError) as e:
        sys.stderr.write(json.dumps({
            "error": type(e).__name__,
            "stage": args.command,
            "message": str(e),
        }) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
