"""Losses, optimization, and the epoch/waypoint training loop.

The loss over a batch of views is a global masked mean: sums run over all
views' supervised pixels and are divided by the total masked count (times
3 for color channels), so duplicating every view leaves values unchanged.
Supervision masks AND the render silhouette with the per-view static-class
mask.

One optimizer visit to a sub-area accumulates gradients over all of its
views, then steps each parameter group (vertex rgb, vertex semantics, the
elevation network, and one extrinsic correction per physical camera) with
its own learning rate; learning rates halve entering the configured
epochs. A visit performs several such steps; by default the count scales
with the number of views gathered at the waypoint so that waypoint and
full-area training do comparable work per pass.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset_io import Dataset, TrainingView
from .elevation_field import ElevationField
from .errors import DataError, NumericError
from .geometry import ExtrinsicCorrection, compose_camera_pose
from .mesh import Bounds, RoadMesh, SubMesh, crop_subarea
from .metrics import miou as miou_metric
from .optim import Adam, adam_step
from .renderer import RenderOutput, rasterize, rasterize_backward
from .sampling import CropRequest, WaypointPlan, epoch_schedule

__all__ = [
    "TrainConfig", "LossResult", "color_loss", "sem_loss", "depth_loss",
    "train", "TrainResult", "evaluate_views", "save_checkpoint",
    "load_checkpoint", "Adam", "adam_step",
]


@dataclass
class TrainConfig:
    lr_rgb: float = 0.1
    lr_sem: float = 0.1
    lr_z: float = 0.001
    lr_extrinsic: float = 0.002
    rot_clamp_deg: float = 0.1
    trans_clamp_m: float = 0.1
    epochs: int = 7
    lr_halving_epochs: tuple = (2, 4)
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    w_sem: float = 1.0
    w_depth: float = 1.0
    waypoint_radius: float = 25.0
    crop_margin: float = 10.0
    use_waypoint: bool = True
    use_depth: bool = False
    freeze_elevation: bool = False
    freeze_extrinsic: bool = False
    steps_per_subarea: int | None = None   # None: scale with view count
    steps_view_factor: float = 0.5
    min_steps_per_subarea: int = 4
    max_steps_per_subarea: int = 40
    eval_views: int = 6                    # evenly spaced subset; 0 disables
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        positives = ["lr_rgb", "lr_sem", "lr_z", "epochs", "waypoint_radius",
                     "adam_beta1", "adam_beta2", "adam_eps"]
        for name in positives:
            if getattr(self, name) <= 0:
                raise DataError(f"config field {name} must be positive")
        if self.lr_extrinsic < 0 or self.rot_clamp_deg < 0 \
                or self.trans_clamp_m < 0 or self.crop_margin < 0:
            raise DataError("clamps and lr_extrinsic must be non-negative")
        if not np.isfinite(self.rot_clamp_deg) or not np.isfinite(
                self.trans_clamp_m):
            raise DataError("clamps must be finite")


@dataclass
class LossResult:
    """Loss value with per-view upstream gradients and the mask count the
    normalizer used (0 means the term was inactive this batch)."""

    value: float
    grads: list
    count: int


def _combined_masks(renders, views):
    return [r.mask & v.supervision_mask for r, v in zip(renders, views)]


# L1 subgradient with a deadband: residuals at floating-point noise level
# must not emit unit-magnitude sign gradients (a perfectly reconstructed
# scene has to be a fixed point of the optimizer).
SIGN_DEADBAND = 1e-9


def _sign(x):
    return np.where(np.abs(x) > SIGN_DEADBAND, np.sign(x), 0.0)


def color_loss(renders: list[RenderOutput],
               views: list[TrainingView]) -> LossResult:
    """Masked mean absolute color error (per channel) over the batch."""
    masks = _combined_masks(renders, views)
    count = int(sum(m.sum() for m in masks))
    if count == 0:
        return LossResult(0.0, [np.zeros_like(r.color) for r in renders], 0)
    norm = 3.0 * count
    total = 0.0
    grads = []
    for render, view, m in zip(renders, views, masks):
        diff = render.color - view.image
        total += float(np.abs(diff[m]).sum())
        grads.append(_sign(diff) * m[:, :, None] / norm)
    return LossResult(total / norm, grads, count)


def sem_loss(renders: list[RenderOutput],
             views: list[TrainingView]) -> LossResult:
    """Masked mean softmax cross-entropy between rendered logits and label
    ids; labels outside [0, K) count as ignored."""
    k = renders[0].sem.shape[2]
    masks = [m & (v.sem_labels >= 0) & (v.sem_labels < k)
             for m, v in zip(_combined_masks(renders, views), views)]
    count = int(sum(m.sum() for m in masks))
    if count == 0:
        return LossResult(0.0, [np.zeros_like(r.sem) for r in renders], 0)
    total = 0.0
    grads = []
    for render, view, m in zip(renders, views, masks):
        logits = render.sem[m]
        labels = view.sem_labels[m].astype(np.int64)
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        softmax = exp / exp.sum(axis=1, keepdims=True)
        picked = shifted[np.arange(labels.size), labels]
        total += float((np.log(exp.sum(axis=1)) - picked).sum())
        g = softmax
        g[np.arange(labels.size), labels] -= 1.0
        grad_img = np.zeros_like(render.sem)
        grad_img[m] = g / count
        grads.append(grad_img)
    return LossResult(total / count, grads, count)


def depth_loss(renders: list[RenderOutput],
               views: list[TrainingView]) -> LossResult:
    """Mean absolute error of rendered depth at the provided sparse
    (u, v, depth) samples; samples are snapped to the nearest pixel and
    only count where the render covers it."""
    residuals = []
    per_view_pixels = []
    for render, view in zip(renders, views):
        if view.sparse_depth is None or view.sparse_depth.shape[0] == 0:
            per_view_pixels.append(None)
            continue
        h, w = render.depth.shape
        px = np.round(view.sparse_depth[:, 0]).astype(np.int64)
        py = np.round(view.sparse_depth[:, 1]).astype(np.int64)
        ok = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        px, py = px[ok], py[ok]
        target = view.sparse_depth[ok, 2]
        covered = render.mask[py, px]
        px, py, target = px[covered], py[covered], target[covered]
        per_view_pixels.append((py, px, target))
        residuals.append(render.depth[py, px] - target)
    count = int(sum(r.size for r in residuals))
    if count == 0:
        return LossResult(0.0, [np.zeros_like(r.depth) for r in renders], 0)
    total = float(sum(np.abs(r).sum() for r in residuals))
    grads = []
    for render, spec in zip(renders, per_view_pixels):
        grad = np.zeros_like(render.depth)
        if spec is not None:
            py, px, target = spec
            np.add.at(grad, (py, px),
                      _sign(render.depth[py, px] - target) / count)
        grads.append(grad)
    return LossResult(total / count, grads, count)


@dataclass
class TrainResult:
    mesh: RoadMesh
    field: ElevationField | None
    corrections: dict
    history: list = field(default_factory=list)
    epoch_metrics: list = field(default_factory=list)
    wall_time_s: float = 0.0
    warnings: dict = field(default_factory=dict)


def _steps_for_visit(n_views: int, config: TrainConfig) -> int:
    if config.steps_per_subarea is not None:
        return config.steps_per_subarea
    raw = int(round(config.steps_view_factor * n_views))
    return max(config.min_steps_per_subarea,
               min(config.max_steps_per_subarea, raw))


def _camera_setup(dataset: Dataset, view: TrainingView, corrections):
    intr = dataset.intrinsics(view.camera_id)
    base = view.ego_pose.compose(dataset.calibrated_extrinsic(view.camera_id))
    corr = corrections[view.camera_id]
    return intr, base, compose_camera_pose(view.ego_pose,
                                           dataset.calibrated_extrinsic(
                                               view.camera_id), corr), corr


def _map_ordered(fn, items, threads: int):
    """Apply fn over items, preserving order; threaded when requested.

    Results are reduced in input order by the caller, so the outcome is
    independent of scheduling."""
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def train(dataset: Dataset, mesh: RoadMesh, field_: ElevationField | None,
          corrections: dict, config: TrainConfig,
          log_path=None) -> TrainResult:
    """Optimize mesh attributes, the elevation field, and extrinsic
    corrections against the dataset.

    corrections maps camera_id to an ExtrinsicCorrection (zero-initialized
    for a fresh run). With config.freeze_elevation, field_ may be None and
    vertex z stays at its initial values. Raises NumericError on divergent
    gradients; state already stepped remains in the passed-in objects.
    """
    config.validate()
    if not config.freeze_elevation and field_ is None:
        raise DataError("elevation optimization needs an ElevationField")
    for cid in dataset.cameras:
        if cid not in corrections:
            raise DataError(f"missing ExtrinsicCorrection for camera {cid!r}")

    start = time.monotonic()
    opt = Adam(config.adam_beta1, config.adam_beta2, config.adam_eps)
    opt.register("rgb", [mesh.vertex_rgb])
    opt.register("sem", [mesh.vertex_sem])
    if field_ is not None:
        opt.register("elevation", field_.params())
    for cid, corr in corrections.items():
        corr.rot_clamp_deg = config.rot_clamp_deg
        corr.trans_clamp_m = config.trans_clamp_m
        opt.register(f"extrinsic:{cid}", [corr.phi, corr.delta_t])

    positions = dataset.camera_positions()
    plan = WaypointPlan(positions, radius=config.waypoint_radius,
                        crop_margin=config.crop_margin,
                        base_seed=config.seed)
    all_views = np.arange(dataset.num_views)

    history = []
    epoch_metrics = []
    warnings = {"empty_color_mask": 0, "empty_sem_mask": 0,
                "empty_depth_mask": 0}
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        lr_scale = 1.0
        for epoch in range(1, config.epochs + 1):
            if epoch in config.lr_halving_epochs:
                lr_scale *= 0.5
            if config.use_waypoint:
                schedule = epoch_schedule(plan, epoch)
            else:
                whole = (mesh.bounds.x_min + mesh.bounds.width / 2.0,
                         mesh.bounds.y_min + mesh.bounds.height / 2.0)
                radius = float(np.hypot(mesh.bounds.width,
                                        mesh.bounds.height))
                schedule = [(CropRequest(whole, radius), all_views)]
            for area_idx, (req, view_ids) in enumerate(schedule):
                sub = crop_subarea(mesh, req.center, req.radius)
                if sub.num_faces == 0 or len(view_ids) == 0:
                    continue
                views = [dataset.load_view(int(i)) for i in view_ids]
                n_steps = _steps_for_visit(len(views), config)
                for step in range(n_steps):
                    entry = _train_step(dataset, mesh, sub, field_,
                                        corrections, views, config, opt,
                                        lr_scale, warnings)
                    entry.update({"epoch": epoch, "area": area_idx,
                                  "center": list(req.center), "step": step,
                                  "n_views": len(views),
                                  "lr_scale": lr_scale})
                    history.append(entry)
                    if log_fh:
                        log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                del views
            if config.eval_views:
                m = evaluate_views(dataset, mesh, field_, corrections,
                                   _eval_subset(dataset.num_views,
                                                config.eval_views),
                                   threads=config.threads)
                m["epoch"] = epoch
                m["wall_s"] = round(time.monotonic() - start, 3)
                epoch_metrics.append(m)
                if log_fh:
                    log_fh.write(json.dumps(m, sort_keys=True) + "\n")
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(mesh=mesh, field=field_, corrections=corrections,
                       history=history, epoch_metrics=epoch_metrics,
                       wall_time_s=time.monotonic() - start,
                       warnings=warnings)


def _train_step(dataset, mesh, sub: SubMesh, field_, corrections, views,
                config, opt: Adam, lr_scale: float, warnings: dict) -> dict:
    # Fresh elevation for the sub-area vertices; gradients flow back
    # through this same cache.
    cache = None
    if not config.freeze_elevation:
        z_sub, cache = field_.forward_cached(sub.vertex_xy)
        mesh.vertex_z[sub.vertex_indices] = z_sub.astype(np.float64)

    setups = [_camera_setup(dataset, v, corrections) for v in views]

    def render_one(idx):
        intr, _, cam_pose, _ = setups[idx]
        return rasterize(cam_pose, intr, sub)

    rendered = _map_ordered(render_one, range(len(views)), config.threads)
    renders = [r[0] for r in rendered]
    frags = [r[1] for r in rendered]

    c_res = color_loss(renders, views)
    s_res = sem_loss(renders, views) if config.w_sem > 0 else LossResult(
        0.0, [None] * len(views), 0)
    d_res = depth_loss(renders, views) if config.use_depth else LossResult(
        0.0, [None] * len(views), 0)
    if c_res.count == 0:
        warnings["empty_color_mask"] += 1
    if config.w_sem > 0 and s_res.count == 0:
        warnings["empty_sem_mask"] += 1
    if config.use_depth and d_res.count == 0:
        warnings["empty_depth_mask"] += 1
    total_loss = (c_res.value + config.w_sem * s_res.value
                  + config.w_depth * d_res.value)
    if not np.isfinite(total_loss):
        raise NumericError(f"training loss diverged to {total_loss}")

    need_extrinsic = not config.freeze_extrinsic
    need_geometry = (not config.freeze_elevation) or need_extrinsic

    def backward_one(idx):
        grad_c = c_res.grads[idx]
        grad_s = None if s_res.grads[idx] is None else (
            config.w_sem * s_res.grads[idx])
        grad_d = None if d_res.grads[idx] is None else (
            config.w_depth * d_res.grads[idx])
        intr, base, cam_pose, corr = setups[idx]
        return rasterize_backward(
            frags[idx], grad_c, grad_s, grad_d, cam_pose, intr, sub,
            base_pose=base if need_extrinsic else None,
            correction=corr if need_extrinsic else None)

    per_view = _map_ordered(backward_one, range(len(views)), config.threads)

    # Reduce in fixed view order (determinism contract).
    grad_rgb = per_view[0]["vertex_rgb"]
    grad_sem = per_view[0]["vertex_sem"]
    grad_z = per_view[0]["vertex_z"]
    ext_grads = {}
    for idx, g in enumerate(per_view):
        if idx > 0:
            grad_rgb += g["vertex_rgb"]
            grad_sem += g["vertex_sem"]
            grad_z += g["vertex_z"]
        if need_extrinsic:
            cid = views[idx].camera_id
            if cid not in ext_grads:
                ext_grads[cid] = [np.zeros(3), np.zeros(3)]
            ext_grads[cid][0] += g["phi"]
            ext_grads[cid][1] += g["delta_t"]

    idx_map = sub.vertex_indices
    opt.step("rgb", [mesh.vertex_rgb], [grad_rgb], config.lr_rgb * lr_scale,
             indices=idx_map)
    rgb_slice = mesh.vertex_rgb[idx_map]
    np.clip(rgb_slice, 0.0, 1.0, out=rgb_slice)
    mesh.vertex_rgb[idx_map] = rgb_slice

    if config.w_sem > 0:
        opt.step("sem", [mesh.vertex_sem], [grad_sem],
                 config.lr_sem * lr_scale, indices=idx_map)

    if not config.freeze_elevation:
        param_grads = field_.backward(cache, grad_z.astype(field_.dtype))
        opt.step("elevation", field_.params(), param_grads,
                 config.lr_z * lr_scale)
        field_.bump_version()
        field_.check_finite()

    if need_extrinsic:
        for cid in sorted(ext_grads):
            corr = corrections[cid]
            opt.step(f"extrinsic:{cid}", [corr.phi, corr.delta_t],
                     ext_grads[cid], config.lr_extrinsic * lr_scale)
            corr.clamp()

    return {
        "loss": total_loss,
        "loss_color": c_res.value,
        "loss_sem": s_res.value,
        "loss_depth": d_res.value,
        "masked_px": c_res.count,
    }


def _eval_subset(n_views: int, limit: int) -> np.ndarray:
    if limit <= 0 or limit >= n_views:
        return np.arange(n_views)
    return np.unique(np.linspace(0, n_views - 1, limit).astype(np.int64))


def evaluate_views(dataset: Dataset, mesh: RoadMesh,
                   field_: ElevationField | None, corrections: dict,
                   view_indices, threads: int = 1) -> dict:
    """Pooled PSNR / mIoU of mesh renders against the dataset views.

    Pixels count where the render silhouette and the view's static-class
    mask agree; per-image means are reported alongside the pooled values.
    """
    if field_ is not None:
        mesh.vertex_z[:] = field_.forward(mesh.vertex_xy).astype(np.float64)

    view_indices = np.asarray(view_indices, dtype=np.int64)

    def eval_one(i):
        view = dataset.load_view(int(i))
        intr, _, cam_pose, _ = _camera_setup(dataset, view, corrections)
        out, _ = rasterize(cam_pose, intr, mesh)
        m = out.mask & view.supervision_mask
        if not m.any():
            return None
        pred = np.argmax(out.sem, axis=2)
        return (int(m.sum()), pred[m].astype(np.int16), view.sem_labels[m],
                (out.color - view.image)[m])

    results = _map_ordered(eval_one, list(view_indices), threads)
    results = [r for r in results if r is not None]
    if not results:
        raise DataError("no supervised pixels in any evaluated view")
    total_count = sum(r[0] for r in results)
    pooled_sq = sum(float((r[3] ** 2).sum()) for r in results)
    mse = pooled_sq / (3 * total_count)
    pooled_psnr = float("inf") if mse == 0 else float(10 * np.log10(1 / mse))
    per_image_psnr = []
    for r in results:
        m_i = float((r[3] ** 2).mean())
        per_image_psnr.append(float("inf") if m_i == 0
                              else float(10 * np.log10(1 / m_i)))
    pred_all = np.concatenate([r[1] for r in results])
    gt_all = np.concatenate([r[2] for r in results])
    pooled_miou = miou_metric(pred_all, gt_all,
                              num_classes=dataset.num_classes)
    finite = [p for p in per_image_psnr if np.isfinite(p)]
    return {
        "psnr": pooled_psnr,
        "psnr_per_image_mean": float(np.mean(finite)) if finite else
        float("inf"),
        "miou": pooled_miou,
        "eval_pixels": total_count,
        "eval_views": [int(i) for i in view_indices],
    }


# ---------------------------------------------------------------------------
# Checkpoints: mesh attributes + elevation blob + corrections JSON.

MESH_HEADER = "roadmesh-mesh.v1"


def save_checkpoint(out_dir, mesh: RoadMesh, field_: ElevationField | None,
                    corrections: dict) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {
        "magic": MESH_HEADER,
        "num_vertices": mesh.num_vertices,
        "num_faces": mesh.num_faces,
        "num_classes": mesh.num_classes,
        "spacing": mesh.spacing,
        "bounds": mesh.bounds.to_dict() if mesh.bounds else None,
        "grid_shape": list(mesh.grid_shape) if mesh.grid_shape else None,
    }
    (out / "mesh.json").write_text(json.dumps(header, sort_keys=True) + "\n",
                                   encoding="utf-8")
    with open(out / "mesh.bin", "wb") as fh:
        for arr, dt in [(mesh.vertex_xy, "<f8"), (mesh.vertex_z, "<f8"),
                        (mesh.vertex_rgb, "<f8"), (mesh.vertex_sem, "<f8"),
                        (mesh.faces, "<i4")]:
            fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    if field_ is not None:
        field_.save(out / "field.ckpt")
    corr_blob = {
        cid: {"phi": corr.phi.tolist(), "delta_t": corr.delta_t.tolist(),
              "rot_clamp_deg": corr.rot_clamp_deg,
              "trans_clamp_m": corr.trans_clamp_m}
        for cid, corr in corrections.items()
    }
    (out / "corrections.json").write_text(
        json.dumps(corr_blob, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_checkpoint(ckpt_dir):
    """Returns (mesh, field_or_None, corrections)."""
    ckpt = Path(ckpt_dir)
    try:
        header = json.loads((ckpt / "mesh.json").read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {ckpt}: {exc}") from exc
    if header.get("magic") != MESH_HEADER:
        raise DataError(f"{ckpt} is not a mesh checkpoint")
    n = int(header["num_vertices"])
    m = int(header["num_faces"])
    k = int(header["num_classes"])
    raw = (ckpt / "mesh.bin").read_bytes()
    sizes = [(n * 2, "<f8"), (n, "<f8"), (n * 3, "<f8"), (n * k, "<f8"),
             (m * 3, "<i4")]
    expected = sum(cnt * np.dtype(dt).itemsize for cnt, dt in sizes)
    if len(raw) != expected:
        raise DataError(f"checkpoint {ckpt} has {len(raw)} bytes of mesh "
                        f"data, expected {expected}")
    offset = 0
    parts = []
    for cnt, dt in sizes:
        nbytes = cnt * np.dtype(dt).itemsize
        parts.append(np.frombuffer(raw[offset:offset + nbytes], dtype=dt))
        offset += nbytes
    mesh = RoadMesh(
        vertex_xy=parts[0].reshape(n, 2).copy(),
        vertex_z=parts[1].copy(),
        vertex_rgb=parts[2].reshape(n, 3).copy(),
        vertex_sem=parts[3].reshape(n, k).copy(),
        faces=parts[4].reshape(m, 3).copy(),
        spacing=float(header["spacing"]),
        num_classes=k,
        bounds=Bounds.from_dict(header["bounds"]) if header["bounds"] else None,
        grid_shape=tuple(header["grid_shape"]) if header["grid_shape"] else None,
    )
    field_ = None
    if (ckpt / "field.ckpt").exists():
        field_ = ElevationField.load(ckpt / "field.ckpt")
    corrections = {}
    corr_path = ckpt / "corrections.json"
    if corr_path.exists():
        blob = json.loads(corr_path.read_text(encoding="utf-8"))
        for cid, c in blob.items():
            corrections[cid] = ExtrinsicCorrection(
                phi=np.array(c["phi"]), delta_t=np.array(c["delta_t"]),
                rot_clamp_deg=c["rot_clamp_deg"],
                trans_clamp_m=c["trans_clamp_m"])
    return mesh, field_, corrections
