"""``scenediff`` command line: dataset, train, sample, eval.

SDE_THREADS caps BLAS/OpenMP threads; it must be set before numpy loads,
so heavy imports happen inside the command functions.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("scenediff")

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def _apply_thread_cap() -> None:
    cap = os.environ.get("SDE_THREADS")
    if not cap:
        return
    if not cap.isdigit() or int(cap) < 1:
        raise SystemExit(f"SDE_THREADS must be a positive integer, got {cap!r}")
    for var in _THREAD_VARS:
        os.environ[var] = cap


def _load_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        over["steps"] = args.steps
    if getattr(args, "guidance_weight", None) is not None:
        over["guidance_weight"] = args.guidance_weight
    if getattr(args, "iou_thresh", None) is not None:
        over["iou_thresh"] = args.iou_thresh
    if getattr(args, "fscore_tau", None) is not None:
        over["fscore_tau"] = args.fscore_tau
    if getattr(args, "no_isa", False):
        over["use_isa"] = False
    if getattr(args, "regression_1step", False):
        over["regression"] = True
    if getattr(args, "no_joint", False):
        over["joint"] = False
    return cfg.replace(**over) if over else cfg


def source_revision() -> str:
    """Short digest of the package sources; stands in for a VCS revision."""
    import hashlib

    h = hashlib.sha256()
    root = Path(__file__).parent
    for p in sorted(root.rglob("*.py")):
        h.update(p.relative_to(root).as_posix().encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def cmd_dataset(args) -> int:
    from .synthetic import SceneConfig, build_dataset

    kw = json.loads(Path(args.scene_config).read_text()) if args.scene_config else {}
    if args.split:
        kw["split"] = args.split
    cfg = SceneConfig.from_dict(kw)
    out = build_dataset(args.out, args.count, args.seed if args.seed is not None else 0, cfg, force=args.force)
    print(f"wrote {args.count} scenes to {out}")
    return 0


def _records(path):
    from .synthetic import load_dataset

    manifest, records = load_dataset(path)
    return manifest, records


def cmd_train(args) -> int:
    from .train import train

    cfg = _load_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise SystemExit(f"{out} exists and is not empty (pass --force to overwrite)")
        import shutil

        shutil.rmtree(out)
    manifest, records = _records(args.data)
    trained = train(records, cfg, out)
    run = json.loads((out / "run.json").read_text())
    run.update({"source_revision": source_revision(), "dataset": str(Path(args.data).resolve()),
                "dataset_config_hash": manifest.get("config_hash"), "dataset_seed": manifest.get("seed"),
                "metrics": "metrics.csv"})
    (out / "run.json").write_text(json.dumps(run, indent=1))
    print(f"trained {trained.cfg.hash()} -> {out}")
    return 0


def cmd_sample(args) -> int:
    import numpy as np

    from . import shape as S
    from .config import RunConfig
    from .pose import PoseNormalizer, denormalize_pose, pose_to_rigid_transform
    from .train import ObjectTable, load_model, predicted_scaffold, sample

    trained = load_model(args.run, RunConfig.load(args.config) if args.config else None)
    cfg = trained.cfg = trained.cfg.replace(**_sample_overrides(args))
    manifest, records = _records(args.data)
    ids = [e["id"] for e in manifest["scenes"]]
    rng = np.random.default_rng(cfg.seed)
    table = ObjectTable.from_records(records, PoseNormalizer(), S.ShapeCodeNormalizer(cfg.g), cfg.align_targets, rng)
    pred = sample(trained, table, np.random.default_rng(cfg.seed), cfg.steps, unconditional=args.unconditional)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise SystemExit(f"{out} exists and is not empty (pass --force to overwrite)")
    (out / "meshes").mkdir(parents=True, exist_ok=True)
    report: dict = {"run": str(Path(args.run).resolve()), "steps": cfg.steps, "seed": cfg.seed,
                    "unconditional": bool(args.unconditional), "guidance_weight": cfg.guidance_weight, "scenes": {}}
    pn = PoseNormalizer()
    empty = 0
    for row in range(table.n):
        scene_id = ids[int(table.scene[row])]
        k = int(row - np.searchsorted(table.scene, table.scene[row]))
        pose = denormalize_pose(pred.pose[row], pn)
        entry = {"object": k, "class_id": int(table.classes[row]), "offset": pose.offset.tolist(),
                 "distance": pose.distance, "size": pose.size.tolist(), "yaw": pose.yaw,
                 "pose_norm": pred.pose[row].tolist(), "code_norm": pred.code[row].tolist(),
                 "latents": pred.latents[row].tolist()}
        if not args.no_meshes:
            scaffold = predicted_scaffold(pred.code[row], cfg.g)
            mesh = S.decode_mesh(scaffold, pred.latents[row], trained.model.decoder, cfg.mesh_res)
            if mesh.is_empty:
                empty += 1
                entry["mesh"] = None
            else:
                rigid = pose_to_rigid_transform(pose, table.box_centers[row], table.camera)
                mesh = S.Mesh(mesh.vertices * pose.size, mesh.faces).transformed(rigid)
                name = f"scene_{scene_id:05d}_obj_{k:02d}.{args.mesh_format}"
                (S.write_ply if args.mesh_format == "ply" else S.write_obj)(out / "meshes" / name, mesh)
                entry["mesh"] = f"meshes/{name}"
        report["scenes"].setdefault(str(scene_id), []).append(entry)
    (out / "predictions.json").write_text(json.dumps(report))
    print(f"sampled {table.n} objects in {len(records)} scenes -> {out / 'predictions.json'}"
          + (f" ({empty} empty meshes)" if empty else ""))
    return 0


def _sample_overrides(args) -> dict:
    over = {}
    for flag, key in (("seed", "seed"), ("steps", "steps"), ("guidance_weight", "guidance_weight")):
        if getattr(args, flag, None) is not None:
            over[key] = getattr(args, flag)
    return over


def cmd_eval(args) -> int:
    import numpy as np

    from . import shape as S
    from .pose import PoseNormalizer
    from .train import ObjectTable, Prediction, evaluate, load_model, write_report

    trained = load_model(args.run)
    over = {}
    if args.iou_thresh is not None:
        over["iou_thresh"] = args.iou_thresh
    if args.fscore_tau is not None:
        over["fscore_tau"] = args.fscore_tau
    if args.seed is not None:
        over["seed"] = args.seed
    cfg = trained.cfg = trained.cfg.replace(**over) if over else trained.cfg
    manifest, records = _records(args.data)
    preds = json.loads(Path(args.predictions).read_text())["scenes"]
    ids = [e["id"] for e in manifest["scenes"]]
    keep = [i for i, sid in enumerate(ids)
            if str(sid) in preds and len(preds[str(sid)]) == len(records[i].scene.objects)]
    missing = [ids[i] for i in sorted(set(range(len(ids))) - set(keep))]
    if missing:
        log.warning("excluding %d scene(s) without matching predictions: %s", len(missing),
                    ", ".join(str(m) for m in missing))
    if not keep:
        raise SystemExit("no scene has predictions")
    recs = [records[i] for i in keep]
    rng = np.random.default_rng(cfg.seed)
    table = ObjectTable.from_records(recs, PoseNormalizer(), S.ShapeCodeNormalizer(cfg.g), cfg.align_targets, rng)
    rows = [e for i in keep for e in sorted(preds[str(ids[i])], key=lambda e: e["object"])]
    pred = Prediction(np.array([e["pose_norm"] for e in rows]), np.array([e["code_norm"] for e in rows]),
                      np.array([e["latents"] for e in rows]))
    report = evaluate(trained, table, pred, table.camera, rng, shape_metrics=not args.no_shape)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_report(out, report)
    s = report["summary"]
    print(" ".join(f"{k}={v:.4f}" if isinstance(v, float) else f"{k}={v}" for k, v in s.items()))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenediff", description="Scene-level pose and shape diffusion on synthetic rooms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset", help="render a synthetic dataset")
    d.add_argument("--out", required=True)
    d.add_argument("--count", type=int, default=64)
    d.add_argument("--seed", type=int)
    d.add_argument("--split", choices=("train", "val"))
    d.add_argument("--scene-config", help="JSON file with scene generator fields")
    d.add_argument("--force", action="store_true")
    d.set_defaults(func=cmd_dataset)

    t = sub.add_parser("train", help="train all networks")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--no-isa", action="store_true")
    t.add_argument("--regression-1step", action="store_true")
    t.add_argument("--no-joint", action="store_true")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="sample poses and shapes for a dataset")
    s.add_argument("--run", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--guidance-weight", type=float)
    s.add_argument("--unconditional", action="store_true")
    s.add_argument("--mesh-format", choices=("obj", "ply"), default="obj")
    s.add_argument("--no-meshes", action="store_true")
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="score predictions against a dataset")
    e.add_argument("--run", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--seed", type=int)
    e.add_argument("--iou-thresh", type=float)
    e.add_argument("--fscore-tau", type=float)
    e.add_argument("--no-shape", action="store_true", help="skip Chamfer and F-score")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .config import ConfigError
    from .train import TrainingAborted

    try:
        return args.func(args)
    except (ConfigError, FileExistsError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except TrainingAborted as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
