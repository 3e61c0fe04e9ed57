"""Command-line pipeline: synthesize data, train, evaluate, export.

Every run writes a resolved-config snapshot next to its outputs. Exit
codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import resource
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset_io
from .dataset_io import (
    SyntheticScene,
    generate_synthetic,
    load_dataset,
    scene_preset,
    write_f32,
    write_png_gray,
    write_png_rgb,
)
from .elevation_field import ElevationField, pretrain, pretrain_points_from_trajectory
from .errors import DataError, NumericError
from .geometry import ExtrinsicCorrection, SE3Pose, compose_camera_pose
from .mesh import export_mesh, footprint_from_trajectory, init_grid, render_bev_maps
from .metrics import chamfer
from .renderer import rasterize, unproject_depth
from .training import (
    TrainConfig,
    evaluate_views,
    load_checkpoint,
    save_checkpoint,
    train,
)

DEFAULT_CONFIG = {
    "seed": 0,
    "threads": 1,
    "mesh": {
        "spacing": 0.1,
        "margin": 20.0,
        "vertex_budget": 20_000_000,
    },
    "train": {
        "lr_rgb": 0.1,
        "lr_sem": 0.1,
        "lr_z": 0.001,
        "lr_extrinsic": 0.002,
        "rot_clamp_deg": 0.1,
        "trans_clamp_m": 0.1,
        "epochs": 7,
        "lr_halving_epochs": [2, 4],
        "w_sem": 1.0,
        "w_depth": 1.0,
        "waypoint_radius": 25.0,
        "crop_margin": 10.0,
        "use_waypoint": True,
        "use_depth": False,
        "freeze_elevation": False,
        "freeze_extrinsic": False,
        "steps_per_subarea": None,
        "steps_view_factor": 0.5,
        "min_steps_per_subarea": 4,
        "max_steps_per_subarea": 40,
        "eval_views": 6,
    },
    "pretrain": {
        "enabled": False,
        "iterations": 1200,
        "lr": 0.002,
        "lateral_halfwidth": 6.0,
        "lateral_step": 0.5,
        "ego_height": 1.7,
    },
    "synth": {
        "preset": "sinusoid",
        "image_size": 256,
        "n_views": 30,
        "rot_error_deg": 0.0,
        "trans_error_m": 0.0,
        "sparse_depth_per_view": 0,
    },
    "eval": {
        "depth_stride": 4,
        "cd_keep_fraction": 0.97,
        "corridor_halfwidth": 8.0,
        "gt_cloud_density": 4.0,
        "bev_px_per_meter": 5.0,
    },
}


def _merge_config(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise DataError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise DataError(f"config key {where!r} must be a mapping")
            out[key] = _merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None) -> dict:
    config = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed config {path}: {exc}") from exc
        config = _merge_config(config, user)
    if overrides:
        config = _merge_config(config, overrides)
    return config


def _json_safe(value):
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value).replace("float('", "").replace("')", "")
    if isinstance(value, float) and np.isinf(value):
        return "inf"
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_json_safe(obj), indent=1, sort_keys=True)
                    + "\n", encoding="utf-8")


def _snapshot_config(out_dir: Path, config: dict) -> None:
    _write_json(out_dir / "config.json", config)


def _peak_rss_bytes() -> int:
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def _train_config_from(config: dict) -> TrainConfig:
    t = config["train"]
    return TrainConfig(
        lr_rgb=t["lr_rgb"], lr_sem=t["lr_sem"], lr_z=t["lr_z"],
        lr_extrinsic=t["lr_extrinsic"], rot_clamp_deg=t["rot_clamp_deg"],
        trans_clamp_m=t["trans_clamp_m"], epochs=t["epochs"],
        lr_halving_epochs=tuple(t["lr_halving_epochs"]),
        w_sem=t["w_sem"], w_depth=t["w_depth"],
        waypoint_radius=t["waypoint_radius"], crop_margin=t["crop_margin"],
        use_waypoint=t["use_waypoint"], use_depth=t["use_depth"],
        freeze_elevation=t["freeze_elevation"],
        freeze_extrinsic=t["freeze_extrinsic"],
        steps_per_subarea=t["steps_per_subarea"],
        steps_view_factor=t["steps_view_factor"],
        min_steps_per_subarea=t["min_steps_per_subarea"],
        max_steps_per_subarea=t["max_steps_per_subarea"],
        eval_views=t["eval_views"], seed=config["seed"],
        threads=config["threads"],
    )


def cmd_synth(args) -> int:
    overrides = {"synth": {}}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.preset:
        overrides["synth"]["preset"] = args.preset
    if args.n_views is not None:
        overrides["synth"]["n_views"] = args.n_views
    config = load_config(args.config, overrides)
    s = config["synth"]
    out = Path(args.out)
    scene = scene_preset(s["preset"], image_size=s["image_size"])
    generate_synthetic(
        scene, n_views=s["n_views"], seed=config["seed"], out_root=out,
        extrinsic_rot_error_deg=s["rot_error_deg"],
        extrinsic_trans_error_m=s["trans_error_m"],
        sparse_depth_per_view=s["sparse_depth_per_view"],
        threads=config["threads"])
    _snapshot_config(out, config)
    load_dataset(out)  # self-check: the result must load cleanly
    print(f"wrote synthetic dataset: {out}")
    return 0


def _unique_ego_poses(dataset) -> list[SE3Pose]:
    poses = []
    seen = set()
    for rec in dataset.frames:
        key = rec.timestamp
        if key not in seen:
            seen.add(key)
            poses.append(rec.ego_pose)
    return poses


def cmd_train(args) -> int:
    overrides = {"train": {}}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.threads is not None:
        overrides["threads"] = args.threads
    if args.no_waypoint:
        overrides["train"]["use_waypoint"] = False
    if args.freeze_elevation:
        overrides["train"]["freeze_elevation"] = True
    if args.freeze_extrinsic:
        overrides["train"]["freeze_extrinsic"] = True
    if args.use_depth:
        overrides["train"]["use_depth"] = True
    if args.radius is not None:
        overrides["train"]["waypoint_radius"] = args.radius
    if args.spacing is not None:
        overrides["mesh"] = {"spacing": args.spacing}
    config = load_config(args.config, overrides)
    if args.pretrain_elevation:
        config["pretrain"]["enabled"] = True

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _snapshot_config(out, config)

    dataset = load_dataset(args.dataset)
    bounds = footprint_from_trajectory(dataset.ego_positions(),
                                       margin=config["mesh"]["margin"])
    mesh = init_grid(bounds, spacing=config["mesh"]["spacing"],
                     num_classes=dataset.num_classes,
                     vertex_budget=config["mesh"]["vertex_budget"])
    tcfg = _train_config_from(config)

    field = None
    pretrain_summary = None
    if not tcfg.freeze_elevation:
        field = ElevationField(bounds, seed=config["seed"])
        if config["pretrain"]["enabled"]:
            p = config["pretrain"]
            points = pretrain_points_from_trajectory(
                _unique_ego_poses(dataset),
                lateral_halfwidth=p["lateral_halfwidth"],
                lateral_step=p["lateral_step"], ego_height=p["ego_height"])
            pretrain_summary = pretrain(field, points,
                                        iterations=p["iterations"],
                                        lr=p["lr"])

    corrections = {cid: ExtrinsicCorrection(rot_clamp_deg=tcfg.rot_clamp_deg,
                                            trans_clamp_m=tcfg.trans_clamp_m)
                   for cid in dataset.cameras}

    result = train(dataset, mesh, field, corrections, tcfg,
                   log_path=out / "metrics.jsonl")
    ckpt = save_checkpoint(out / "checkpoint", mesh, field, corrections)
    _write_bev_artifacts(mesh, out / "bev",
                         config["eval"]["bev_px_per_meter"])

    summary = {
        "dataset": str(args.dataset),
        "checkpoint": str(ckpt),
        "wall_time_s": round(result.wall_time_s, 3),
        "peak_rss_bytes": _peak_rss_bytes(),
        "final_metrics": result.epoch_metrics[-1] if result.epoch_metrics
        else None,
        "first_loss": result.history[0]["loss"] if result.history else None,
        "final_loss": result.history[-1]["loss"] if result.history else None,
        "steps": len(result.history),
        "warnings": result.warnings,
        "pretrain": pretrain_summary if pretrain_summary is None else {
            "final_rmse": pretrain_summary["final_rmse"]},
    }
    _write_json(out / "summary.json", summary)
    print(f"training done: {out} (wall {summary['wall_time_s']} s)")
    return 0


def _write_bev_artifacts(mesh, bev_dir: Path, px_per_meter: float) -> None:
    bev_dir.mkdir(parents=True, exist_ok=True)
    maps = render_bev_maps(mesh, px_per_meter=px_per_meter)
    write_png_rgb(bev_dir / "rgb.png", maps.rgb)
    write_png_gray(bev_dir / "class.png", maps.class_id)
    write_f32(bev_dir / "elevation.f32", np.nan_to_num(maps.elevation))
    write_png_gray(bev_dir / "mask.png", maps.mask.astype(np.uint8) * 255)
    _write_json(bev_dir / "elevation.json", {
        "shape": list(maps.elevation.shape),
        "dtype": "float32-little-endian",
        "x_min": maps.x_min,
        "y_max": maps.y_max,
        "px_per_meter": maps.px_per_meter,
        "nodata": 0.0,
    })


def _true_extrinsics(gt_dir, dataset) -> dict:
    """Per-camera true camera-to-ego extrinsics from the gt bundle when
    present, else the dataset's calibrated ones."""
    out = {cid: dataset.calibrated_extrinsic(cid) for cid in dataset.cameras}
    if gt_dir is not None and (gt_dir / "extrinsics.json").exists():
        blob = json.loads((gt_dir / "extrinsics.json").read_text(
            encoding="utf-8"))
        for cid, entry in blob.items():
            if cid in out:
                out[cid] = SE3Pose.from_matrix(np.array(entry["true"]))
    return out


def cmd_eval(args) -> int:
    config = load_config(args.config, {"threads": args.threads}
                         if args.threads is not None else None)
    dataset = load_dataset(args.dataset)
    mesh, field, corrections = load_checkpoint(args.checkpoint)
    for cid in dataset.cameras:
        corrections.setdefault(cid, ExtrinsicCorrection())

    metrics = evaluate_views(dataset, mesh, field, corrections,
                             np.arange(dataset.num_views),
                             threads=config["threads"])
    report = {"views": dataset.num_views, **metrics}

    ecfg = config["eval"]
    stride = max(1, int(ecfg["depth_stride"]))
    gt_dir = dataset.groundtruth_dir()
    true_extrinsics = _true_extrinsics(gt_dir, dataset)
    cloud_pts, cloud_cls = [], []
    gt_pts, gt_cls = [], []
    rmse_num, rmse_count = 0.0, 0
    for i in range(dataset.num_views):
        view = dataset.load_view(i)
        intr = dataset.intrinsics(view.camera_id)
        cam = compose_camera_pose(view.ego_pose,
                                  dataset.calibrated_extrinsic(view.camera_id),
                                  corrections[view.camera_id])
        out, frag = rasterize(cam, intr, mesh)
        if args.debug_fragments and i == 0:
            dbg = Path(args.out).parent if args.out else Path(".")
            Image.fromarray(frag.face_id.astype(np.int32), mode="I").save(
                dbg / "debug_face_id.png")
            write_f32(dbg / "debug_depth.f32", frag.depth)
        sub = out.mask & view.supervision_mask
        pick = np.zeros_like(sub)
        pick[::stride, ::stride] = True
        sel = sub & pick
        pts = unproject_depth(out.depth, sel, cam, intr)
        cloud_pts.append(pts)
        cloud_cls.append(view.sem_labels[sel])

        if gt_dir is None:
            continue
        rec = dataset.frames[i]
        depth_path = gt_dir / "depth" / (rec.image_path.stem + ".f32")
        if not depth_path.exists():
            continue
        gt_depth = dataset_io.read_f32(depth_path, shape=out.depth.shape)
        valid = out.mask & view.supervision_mask & (gt_depth > 0)
        if valid.any():
            diff = out.depth[valid] - gt_depth[valid]
            rmse_num += float((diff ** 2).sum())
            rmse_count += int(valid.sum())
        # Reference cloud (the "range sensor" stand-in): true depth along
        # a half-stride-offset pixel grid, unprojected through the true
        # extrinsics, so it samples the same surfaces independently.
        pick_ref = np.zeros_like(sub)
        pick_ref[stride // 2::stride, stride // 2::stride] = True
        sel_ref = view.supervision_mask & (gt_depth > 0) & pick_ref
        cam_true = view.ego_pose.compose(true_extrinsics[view.camera_id])
        gt_pts.append(unproject_depth(gt_depth, sel_ref, cam_true, intr))
        gt_cls.append(view.sem_labels[sel_ref])
    if rmse_count:
        report["depth_rmse"] = float(np.sqrt(rmse_num / rmse_count))

    if gt_pts and any(p.shape[0] for p in gt_pts):
        from .metrics import PointCloud

        rendered = PointCloud(np.concatenate(cloud_pts),
                              np.concatenate(cloud_cls))
        reference = PointCloud(np.concatenate(gt_pts),
                               np.concatenate(gt_cls))
        scene_json = gt_dir / "scene.json"
        if scene_json.exists():
            scene = SyntheticScene.from_dict(
                json.loads(scene_json.read_text(encoding="utf-8")))
            corridor = scene.trajectory_xy(0.5)
            for cloud in ("rendered", "reference"):
                pc = rendered if cloud == "rendered" else reference
                keep = dataset_io.corridor_mask(pc.points[:, :2], corridor,
                                                ecfg["corridor_halfwidth"])
                pc = PointCloud(pc.points[keep], pc.class_ids[keep])
                if cloud == "rendered":
                    rendered = pc
                else:
                    reference = pc
        if rendered.points.shape[0] and reference.points.shape[0]:
            report["chamfer_m2"] = chamfer(
                rendered, reference,
                keep_fraction=ecfg["cd_keep_fraction"],
                flat_classes=dataset.flat_ids)
            report["cloud_points"] = int(rendered.points.shape[0])

    if args.out:
        _write_json(args.out, report)
    print(json.dumps(_json_safe(report), indent=1, sort_keys=True))
    return 0


def cmd_export(args) -> int:
    mesh, field, _ = load_checkpoint(args.checkpoint)
    if field is not None:
        mesh.vertex_z[:] = field.forward(mesh.vertex_xy).astype(np.float64)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_mesh(mesh, out, args.format)
    print(f"wrote {out}")
    return 0


def cmd_render_bev(args) -> int:
    config = load_config(args.config)
    mesh, field, _ = load_checkpoint(args.checkpoint)
    if field is not None:
        mesh.vertex_z[:] = field.forward(mesh.vertex_xy).astype(np.float64)
    px = args.px_per_meter or config["eval"]["bev_px_per_meter"]
    _write_bev_artifacts(mesh, Path(args.out), px)
    print(f"wrote BEV maps under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadmesh",
        description="Road surface reconstruction from posed images")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)

    p_synth = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p_synth)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--preset", default=None,
                         choices=["sinusoid", "steep_slope", "flat"])
    p_synth.add_argument("--n-views", type=int, default=None)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="reconstruct a road mesh")
    common(p_train)
    p_train.add_argument("dataset")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--no-waypoint", action="store_true")
    p_train.add_argument("--freeze-elevation", action="store_true")
    p_train.add_argument("--freeze-extrinsic", action="store_true")
    p_train.add_argument("--pretrain-elevation", action="store_true")
    p_train.add_argument("--use-depth", action="store_true")
    p_train.add_argument("--radius", type=float, default=None,
                         help="waypoint sampling radius in meters")
    p_train.add_argument("--spacing", type=float, default=None,
                         help="mesh vertex spacing in meters")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--out", default=None, help="report JSON path")
    p_eval.add_argument("--debug-fragments", action="store_true")
    p_eval.set_defaults(func=cmd_eval)

    p_export = sub.add_parser("export", help="export the mesh to PLY/OBJ")
    p_export.add_argument("--checkpoint", required=True)
    p_export.add_argument("--out", required=True)
    p_export.add_argument("--format", choices=["ply", "obj"], default="ply")
    p_export.set_defaults(func=cmd_export)

    p_bev = sub.add_parser("render-bev", help="write BEV maps")
    p_bev.add_argument("--checkpoint", required=True)
    p_bev.add_argument("--out", required=True)
    p_bev.add_argument("--px-per-meter", type=float, default=None)
    p_bev.add_argument("--config", default=None)
    p_bev.set_defaults(func=cmd_render_bev)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
