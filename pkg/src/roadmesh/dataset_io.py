"""Posed-image dataset loading and synthetic ground-truth generation.

Datasets live on disk as a JSON manifest ("romespec.v1") plus PNG images,
single-channel PNG class maps, and little-endian float32 sparse-depth
records; all paths are relative to the dataset root.

The synthetic generator renders views of an analytic surface z(x, y)
(plane plus bounded sinusoids) with a procedural texture and class layout
by per-pixel ray marching plus bisection. It is the verification oracle
for the whole pipeline and deliberately shares no rasterization code with
the renderer module.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import NEAR_PLANE, CameraIntrinsics, SE3Pose, rodrigues
from .mesh import Bounds
from .metrics import PointCloud

MANIFEST_SCHEMA = "romespec.v1"
MANIFEST_NAME = "manifest.json"
IGNORE_ID = 255

SKY_COLOR = np.array([0.53, 0.81, 0.92])

# Ray-march parameters for the analytic renderer: coarse step along the
# ray, traversal cap, and the bisection tolerance on the bracket width.
MARCH_STEP = 0.25
MARCH_T_MAX = 150.0
BISECT_TOL = 1e-6
SCENE_APRON = 30.0  # surface exists this far beyond the nominal bounds


# ---------------------------------------------------------------------------
# Small PNG / blob helpers


def write_png_rgb(path, img01: np.ndarray) -> None:
    arr = np.floor(np.clip(img01, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def read_png_rgb(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return arr / 255.0


def write_png_gray(path, ids: np.ndarray) -> None:
    Image.fromarray(ids.astype(np.uint8), mode="L").save(path)


def read_png_gray(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.int16)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read class map {path}: {exc}") from exc


def write_f32(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_f32(path, shape=None) -> np.ndarray:
    try:
        raw = np.fromfile(path, dtype="<f4")
    except OSError as exc:
        raise DataError(f"cannot read float32 blob {path}: {exc}") from exc
    return raw if shape is None else raw.reshape(shape)


# ---------------------------------------------------------------------------
# Synthetic scene description


@dataclass
class SyntheticScene:
    """Analytic scene: elevation, texture, classes, trajectory, cameras.

    Everything is a pure deterministic function of (x, y), so the scene
    can serve as ground truth for reconstruction metrics. The dict
    representation round-trips through JSON (stored in the gt bundle).
    """

    bounds: Bounds
    plane: tuple = (0.0, 0.0, 0.0)          # z0 + gx * x + gy * y
    sinusoids: list = field(default_factory=list)   # {amp, kx, ky, phase}
    class_table: list = field(default_factory=list)  # {id, name, dynamic, flat}
    class_regions: list = field(default_factory=list)  # later entries win
    base_colors: dict = field(default_factory=dict)  # class id -> rgb
    modulations: list = field(default_factory=list)  # {amp(rgb), kx, ky, phase}
    stripes: list = field(default_factory=list)
    crosswalks: list = field(default_factory=list)
    arrows: list = field(default_factory=list)
    traj_length: float = 60.0
    traj_lateral_amp: float = 1.5
    traj_lateral_wavelength: float = 60.0
    ego_height: float = 1.7
    cameras: dict = field(default_factory=dict)

    # -- geometry ----------------------------------------------------------
    def elevation(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        z = self.plane[0] + self.plane[1] * x + self.plane[2] * y
        for s in self.sinusoids:
            z = z + s["amp"] * np.sin(
                2.0 * np.pi * (s["kx"] * x + s["ky"] * y) + s["phase"])
        return z

    def max_elevation_bound(self) -> float:
        b = self.bounds
        corners_x = np.array([b.x_min - SCENE_APRON, b.x_max + SCENE_APRON])
        corners_y = np.array([b.y_min - SCENE_APRON, b.y_max + SCENE_APRON])
        gx, gy = np.meshgrid(corners_x, corners_y)
        planar = (self.plane[0] + self.plane[1] * gx + self.plane[2] * gy).max()
        return float(planar + sum(abs(s["amp"]) for s in self.sinusoids))

    # -- semantics ---------------------------------------------------------
    def class_id(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ids = np.zeros(np.broadcast(x, y).shape, dtype=np.int16)
        for region in self.class_regions:
            kind = region["kind"]
            if kind == "all":
                inside = np.ones_like(ids, dtype=bool)
            elif kind == "yband":
                inside = (y >= region["lo"]) & (y <= region["hi"])
            elif kind == "xband":
                inside = (x >= region["lo"]) & (x <= region["hi"])
            elif kind == "abs_yband":
                inside = (np.abs(y) >= region["lo"]) & (np.abs(y) <= region["hi"])
            else:
                raise DataError(f"unknown class region kind {kind!r}")
            ids[inside] = region["id"]
        return ids

    # -- appearance --------------------------------------------------------
    def texture(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        ids = self.class_id(x, y)
        rgb = np.empty(ids.shape + (3,), dtype=float)
        rgb[:] = self.base_colors.get("default", (0.4, 0.4, 0.4))
        for key, color in self.base_colors.items():
            if key == "default":
                continue
            rgb[ids == int(key)] = color
        for m in self.modulations:
            wave = np.sin(2.0 * np.pi * (m["kx"] * x + m["ky"] * y) + m["phase"])
            rgb = rgb + np.asarray(m["amp"]) * wave[..., None]
        for s in self.stripes:
            inside = np.abs(y - s["y_center"]) <= s["width"] / 2.0
            period = s.get("dash_period", 0.0)
            if period:
                inside &= np.mod(x, period) < period * s.get("dash_fill", 0.5)
            rgb[inside] = s["color"]
        for c in self.crosswalks:
            inside = (x >= c["x0"]) & (x <= c["x1"])
            if c.get("zebra_period", 0.0):
                inside &= np.mod(y, c["zebra_period"]) < c["zebra_period"] * 0.5
            if "y_lo" in c:
                inside &= (y >= c["y_lo"]) & (y <= c["y_hi"])
            rgb[inside] = c["color"]
        for a in self.arrows:
            dx = x - a["x"]
            taper = 1.0 - np.clip((dx + a["length"] / 2.0) / a["length"], 0, 1)
            inside = (np.abs(dx) <= a["length"] / 2.0) & (
                np.abs(y - a["y"]) <= a["width"] / 2.0 * taper)
            rgb[inside] = a["color"]
        return np.clip(rgb, 0.0, 1.0)

    # -- trajectory and rig --------------------------------------------------
    def trajectory_xy(self, ds: float = 0.5) -> np.ndarray:
        s = np.arange(0.0, self.traj_length + 1e-9, ds)
        return np.column_stack([s, self._lateral(s)])

    def _lateral(self, s):
        return self.traj_lateral_amp * np.sin(
            2.0 * np.pi * s / self.traj_lateral_wavelength)

    def ego_pose_at(self, s: float) -> SE3Pose:
        x = s
        y = float(self._lateral(np.array([s]))[0])
        eps = 1e-4
        dy = (self._lateral(np.array([s + eps]))[0]
              - self._lateral(np.array([s - eps]))[0]) / (2 * eps)
        yaw = float(np.arctan2(dy, 1.0))
        z = float(self.elevation(x, y)) + self.ego_height
        return SE3Pose(rodrigues([0.0, 0.0, yaw]), [x, y, z])

    def frame_poses(self, n_frames: int) -> list[SE3Pose]:
        if n_frames == 1:
            return [self.ego_pose_at(self.traj_length / 2.0)]
        ss = np.linspace(0.0, self.traj_length, n_frames)
        return [self.ego_pose_at(float(s)) for s in ss]

    def camera_intrinsics(self, cam_id: str) -> CameraIntrinsics:
        return CameraIntrinsics.from_dict(self.cameras[cam_id]["intrinsics"])

    def true_extrinsic(self, cam_id: str) -> SE3Pose:
        spec = self.cameras[cam_id]
        return camera_mount_pose(spec["position"], spec["yaw_deg"],
                                 spec["pitch_deg"])

    # -- (de)serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "bounds": self.bounds.to_dict(),
            "plane": list(self.plane),
            "sinusoids": self.sinusoids,
            "class_table": self.class_table,
            "class_regions": self.class_regions,
            "base_colors": {str(k): list(v) for k, v in self.base_colors.items()},
            "modulations": [
                {**m, "amp": list(m["amp"])} for m in self.modulations],
            "stripes": [{**s, "color": list(s["color"])} for s in self.stripes],
            "crosswalks": [{**c, "color": list(c["color"])} for c in self.crosswalks],
            "arrows": [{**a, "color": list(a["color"])} for a in self.arrows],
            "traj_length": self.traj_length,
            "traj_lateral_amp": self.traj_lateral_amp,
            "traj_lateral_wavelength": self.traj_lateral_wavelength,
            "ego_height": self.ego_height,
            "cameras": self.cameras,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticScene":
        return cls(
            bounds=Bounds.from_dict(d["bounds"]),
            plane=tuple(d["plane"]),
            sinusoids=d["sinusoids"],
            class_table=d["class_table"],
            class_regions=d["class_regions"],
            base_colors=d["base_colors"],
            modulations=d["modulations"],
            stripes=d["stripes"],
            crosswalks=d["crosswalks"],
            arrows=d["arrows"],
            traj_length=d["traj_length"],
            traj_lateral_amp=d["traj_lateral_amp"],
            traj_lateral_wavelength=d["traj_lateral_wavelength"],
            ego_height=d["ego_height"],
            cameras=d["cameras"],
        )


def camera_mount_pose(position, yaw_deg: float, pitch_deg: float) -> SE3Pose:
    """Camera-to-ego pose for a camera at `position` (ego frame), yawed
    about ego z and pitched down about its own right axis.

    Ego: x forward, y left, z up. Camera: x right, y down, z forward.
    """
    base = np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    yaw = np.deg2rad(yaw_deg)
    pitch = np.deg2rad(pitch_deg)
    rz = rodrigues([0.0, 0.0, yaw])
    rx_down = rodrigues([-pitch, 0.0, 0.0])  # in camera coordinates
    return SE3Pose(rz @ base @ rx_down, np.asarray(position, dtype=float))


# ---------------------------------------------------------------------------
# Scene presets


def _standard_cameras(image_size: int = 256, focal: float | None = None) -> dict:
    if focal is None:
        focal = image_size * 300.0 / 256.0  # keep the FOV size-independent
    intr = {"fx": focal, "fy": focal, "cx": (image_size - 1) / 2.0,
            "cy": (image_size - 1) / 2.0, "width": image_size,
            "height": image_size}
    return {
        "cam_left": {"intrinsics": dict(intr), "position": [1.2, 0.35, 0.1],
                     "yaw_deg": 16.0, "pitch_deg": 13.0},
        "cam_right": {"intrinsics": dict(intr), "position": [1.2, -0.35, 0.1],
                      "yaw_deg": -16.0, "pitch_deg": 13.0},
    }


def scene_preset(name: str, image_size: int = 256) -> SyntheticScene:
    """Named synthetic scenes used by tests and the CLI."""
    table = [
        {"id": 0, "name": "road", "dynamic": False, "flat": True},
        {"id": 1, "name": "shoulder", "dynamic": False, "flat": True},
        {"id": 2, "name": "sidewalk", "dynamic": False, "flat": True},
        {"id": 3, "name": "crosswalk", "dynamic": False, "flat": True},
    ]
    regions = [
        {"kind": "all", "id": 0},
        {"kind": "yband", "lo": 3.2, "hi": 9.0, "id": 1},
        {"kind": "yband", "lo": -9.0, "hi": -3.2, "id": 1},
        {"kind": "abs_yband", "lo": 9.0, "hi": 999.0, "id": 2},
        {"kind": "xband", "lo": 24.0, "hi": 30.0, "id": 3},
    ]
    base_colors = {"default": (0.36, 0.36, 0.38), "1": (0.45, 0.42, 0.36),
                   "2": (0.55, 0.53, 0.5), "3": (0.62, 0.6, 0.58)}
    modulations = [
        {"amp": (0.08, 0.06, 0.05), "kx": 0.021, "ky": 0.0, "phase": 0.4},
        {"amp": (0.05, 0.06, 0.07), "kx": 0.0043, "ky": 0.035, "phase": 1.9},
        {"amp": (0.03, 0.03, 0.03), "kx": 0.051, "ky": 0.017, "phase": 4.0},
    ]
    stripes = [
        {"y_center": 0.0, "width": 0.6, "color": (0.75, 0.73, 0.55),
         "dash_period": 6.0, "dash_fill": 0.55},
        {"y_center": 3.0, "width": 0.5, "color": (0.72, 0.72, 0.7)},
        {"y_center": -3.0, "width": 0.5, "color": (0.72, 0.72, 0.7)},
    ]
    arrows = [{"x": 40.0, "y": -1.5, "length": 4.0, "width": 1.2,
               "color": (0.8, 0.8, 0.78)}]

    if name == "sinusoid":
        traj_length = 60.0
        bounds = Bounds(-8.0, traj_length + 8.0, -12.5, 12.5)
        return SyntheticScene(
            bounds=bounds,
            plane=(0.0, 0.0, 0.0),
            sinusoids=[
                {"amp": 0.22, "kx": 1.0 / 28.0, "ky": 0.0, "phase": 0.7},
                {"amp": 0.05, "kx": 0.0, "ky": 1.0 / 17.0, "phase": 2.1},
            ],
            class_table=table,
            class_regions=regions,
            base_colors=base_colors,
            modulations=modulations,
            stripes=stripes,
            crosswalks=[],
            arrows=arrows,
            traj_length=traj_length,
            cameras=_standard_cameras(image_size),
        )
    if name == "steep_slope":
        traj_length = 80.0
        bounds = Bounds(-8.0, traj_length + 8.0, -12.5, 12.5)
        return SyntheticScene(
            bounds=bounds,
            # 7 m rise over the trajectory plus a lateral tilt the
            # trajectory alone cannot reveal.
            plane=(-0.8, 7.8 / traj_length, 0.025),
            sinusoids=[
                {"amp": 0.15, "kx": 1.0 / 31.0, "ky": 0.0, "phase": 1.2},
                {"amp": 0.08, "kx": 0.009, "ky": 1.0 / 14.0, "phase": 0.3},
            ],
            class_table=table,
            class_regions=regions,
            base_colors=base_colors,
            modulations=modulations,
            stripes=stripes,
            crosswalks=[],
            arrows=[],
            traj_length=traj_length,
            cameras=_standard_cameras(image_size),
        )
    if name == "flat":
        traj_length = 30.0
        bounds = Bounds(-6.0, traj_length + 6.0, -10.0, 10.0)
        return SyntheticScene(
            bounds=bounds,
            class_table=table,
            class_regions=regions[:4],
            base_colors=base_colors,
            modulations=modulations[:1],
            stripes=stripes[1:2],
            crosswalks=[],
            arrows=[],
            traj_length=traj_length,
            traj_lateral_amp=0.0,
            cameras=_standard_cameras(image_size),
        )
    raise DataError(f"unknown scene preset {name!r}")


# ---------------------------------------------------------------------------
# Analytic ray-cast rendering (the oracle renderer)


def raymarch_view(scene: SyntheticScene, cam_pose: SE3Pose,
                  intr: CameraIntrinsics):
    """Render one view of the analytic surface by marching pixel rays.

    Returns (rgb, class_ids, depth, hit_mask); depth is the camera-frame z
    of the intersection (0 where the ray misses), class is IGNORE_ID on
    misses. The surface exists within the scene bounds plus an apron;
    rays leaving that box count as sky.
    """
    h, w = intr.height, intr.width
    jj, ii = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack([(jj.ravel() - intr.cx) / intr.fx,
                      (ii.ravel() - intr.cy) / intr.fy,
                      np.ones(h * w)], axis=1)
    d_world = d_cam @ cam_pose.rotation.T
    origin = cam_pose.translation
    n = h * w

    def surf_gap(t, idx):
        px = origin[0] + t * d_world[idx, 0]
        py = origin[1] + t * d_world[idx, 1]
        pz = origin[2] + t * d_world[idx, 2]
        return pz - scene.elevation(px, py)

    z_top = scene.max_elevation_bound()
    b = scene.bounds
    lo = np.array([b.x_min - SCENE_APRON, b.y_min - SCENE_APRON])
    hi = np.array([b.x_max + SCENE_APRON, b.y_max + SCENE_APRON])

    # Rays that stay above the highest possible surface point can never hit.
    dz = d_world[:, 2]
    min_z_on_path = origin[2] + np.minimum(dz * NEAR_PLANE, dz * MARCH_T_MAX)
    candidates = np.nonzero(min_z_on_path <= z_top)[0]

    t_lo = np.full(n, np.nan)
    t_hi = np.full(n, np.nan)
    active = candidates[surf_gap(NEAR_PLANE, candidates) > 0]
    t_prev = np.full(active.shape[0], NEAR_PLANE)
    steps = int(np.ceil((MARCH_T_MAX - NEAR_PLANE) / MARCH_STEP))
    for k in range(1, steps + 1):
        if active.size == 0:
            break
        t_cur = min(NEAR_PLANE + k * MARCH_STEP, MARCH_T_MAX)
        gap = surf_gap(t_cur, active)
        crossed = gap <= 0
        t_lo[active[crossed]] = t_prev[crossed]
        t_hi[active[crossed]] = t_cur
        # Drop rays that crossed or left the surface box.
        px = origin[0] + t_cur * d_world[active, 0]
        py = origin[1] + t_cur * d_world[active, 1]
        outside = (px < lo[0]) | (px > hi[0]) | (py < lo[1]) | (py > hi[1])
        keep = ~crossed & ~outside
        active = active[keep]
        t_prev = np.full(active.shape[0], t_cur)

    hit = np.nonzero(np.isfinite(t_lo))[0]
    a = t_lo[hit]
    bb = t_hi[hit]
    while hit.size and float((bb - a).max()) > BISECT_TOL:
        mid = 0.5 * (a + bb)
        above = surf_gap(mid, hit) > 0
        a = np.where(above, mid, a)
        bb = np.where(above, bb, mid)
    t_hit = 0.5 * (a + bb)

    rgb = np.tile(SKY_COLOR, (n, 1))
    classes = np.full(n, IGNORE_ID, dtype=np.int16)
    depth = np.zeros(n)
    mask = np.zeros(n, dtype=bool)
    if hit.size:
        px = origin[0] + t_hit * d_world[hit, 0]
        py = origin[1] + t_hit * d_world[hit, 1]
        inside = (px >= lo[0]) & (px <= hi[0]) & (py >= lo[1]) & (py <= hi[1])
        hit, px, py, t_hit = hit[inside], px[inside], py[inside], t_hit[inside]
        rgb[hit] = scene.texture(px, py)
        classes[hit] = scene.class_id(px, py)
        depth[hit] = t_hit  # d_cam z-component is 1, so t is camera depth
        mask[hit] = True
    return (rgb.reshape(h, w, 3), classes.reshape(h, w),
            depth.reshape(h, w), mask.reshape(h, w))


# ---------------------------------------------------------------------------
# Dataset generation


def _perturbation_pose(rot_deg: float, trans_m: float, seed) -> SE3Pose:
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return SE3Pose(rodrigues(axis * np.deg2rad(rot_deg)), direction * trans_m)


def generate_synthetic(scene: SyntheticScene, n_views: int, seed: int,
                       out_root, extrinsic_rot_error_deg: float = 0.0,
                       extrinsic_trans_error_m: float = 0.0,
                       sparse_depth_per_view: int = 0,
                       threads: int = 1) -> Path:
    """Write a synthetic dataset plus its ground-truth bundle.

    Views are rendered with the true camera extrinsics; the manifest's
    calibrated extrinsics get the configured perturbation composed on the
    right, emulating miscalibration for the extrinsic-recovery pipeline.
    Ground truth under gt/: scene JSON, true and written extrinsics,
    trajectory, an elevation sample grid, and full depth maps.
    """
    if n_views < 1:
        raise DataError("n_views must be at least 1")
    root = Path(out_root)
    for sub in ("images", "semantics", "depth", "gt", "gt/depth"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    cam_ids = sorted(scene.cameras.keys())
    n_frames = int(np.ceil(n_views / len(cam_ids)))
    poses = scene.frame_poses(n_frames)

    calib_true = {cid: scene.true_extrinsic(cid) for cid in cam_ids}
    calib_written = {}
    perturbations = {}
    for k, cid in enumerate(cam_ids):
        pert = _perturbation_pose(extrinsic_rot_error_deg,
                                  extrinsic_trans_error_m,
                                  seed=[seed, 7001, k])
        perturbations[cid] = pert
        calib_written[cid] = calib_true[cid].compose(pert)

    jobs = []
    for f_idx in range(n_frames):
        for c_idx, cid in enumerate(cam_ids):
            if len(jobs) >= n_views:
                break
            jobs.append((f_idx, c_idx, cid))

    frames_meta = [None] * len(jobs)

    def render_job(j):
        f_idx, c_idx, cid = jobs[j]
        intr = scene.camera_intrinsics(cid)
        cam_pose = poses[f_idx].compose(calib_true[cid])
        rgb, classes, depth, mask = raymarch_view(scene, cam_pose, intr)
        stem = f"f{f_idx:04d}_{cid}"
        write_png_rgb(root / "images" / f"{stem}.png", rgb)
        write_png_gray(root / "semantics" / f"{stem}.png", classes)
        write_f32(root / "gt" / "depth" / f"{stem}.f32", depth)
        sparse_rel = None
        if sparse_depth_per_view > 0:
            rng = np.random.default_rng([seed, 9002, f_idx, c_idx])
            on = np.argwhere(mask)
            take = min(sparse_depth_per_view, on.shape[0])
            pick = on[rng.choice(on.shape[0], size=take, replace=False)]
            triples = np.column_stack([pick[:, 1].astype(float),
                                       pick[:, 0].astype(float),
                                       depth[pick[:, 0], pick[:, 1]]])
            sparse_rel = f"depth/{stem}.f32"
            write_f32(root / sparse_rel, triples)
        frames_meta[j] = {
            "timestamp": round(f_idx * 0.5, 3),
            "camera_id": cid,
            "ego_pose": poses[f_idx].to_matrix().tolist(),
            "image": f"images/{stem}.png",
            "semantics": f"semantics/{stem}.png",
            "sparse_depth": sparse_rel,
        }

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(render_job, range(len(jobs))))
    else:
        for j in range(len(jobs)):
            render_job(j)

    manifest = {
        "schema": MANIFEST_SCHEMA,
        "scene_id": f"synthetic-{seed}",
        "cameras": {
            cid: {"intrinsics": scene.cameras[cid]["intrinsics"],
                  "extrinsic": calib_written[cid].to_matrix().tolist()}
            for cid in cam_ids
        },
        "classes": scene.class_table,
        "frames": frames_meta,
    }
    _dump_json(root / MANIFEST_NAME, manifest)

    _dump_json(root / "gt" / "scene.json", scene.to_dict())
    _dump_json(root / "gt" / "extrinsics.json", {
        cid: {"true": calib_true[cid].to_matrix().tolist(),
              "written": calib_written[cid].to_matrix().tolist(),
              "perturbation": perturbations[cid].to_matrix().tolist(),
              "rot_error_deg": extrinsic_rot_error_deg,
              "trans_error_m": extrinsic_trans_error_m}
        for cid in cam_ids
    })
    traj = scene.trajectory_xy(ds=0.5)
    _dump_json(root / "gt" / "trajectory.json", {
        "xy": traj.tolist(),
        "ego_height": scene.ego_height,
    })
    _write_elevation_grid(scene, root / "gt")
    return root


def _dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _write_elevation_grid(scene: SyntheticScene, gt_dir: Path,
                          step: float = 0.5) -> None:
    b = scene.bounds
    xs = np.arange(b.x_min, b.x_max + 1e-9, step)
    ys = np.arange(b.y_min, b.y_max + 1e-9, step)
    gx, gy = np.meshgrid(xs, ys)
    z = scene.elevation(gx.ravel(), gy.ravel()).reshape(gy.shape)
    write_f32(gt_dir / "elevation_grid.f32", z)
    _dump_json(gt_dir / "elevation_grid.json", {
        "x0": float(xs[0]), "y0": float(ys[0]), "step": step,
        "nx": int(xs.size), "ny": int(ys.size),
    })


def export_groundtruth_pointcloud(scene: SyntheticScene, density: float,
                                  corridor_halfwidth: float | None = None
                                  ) -> PointCloud:
    """Regular grid samples of the analytic surface with class ids.

    density is points per square meter; corridor_halfwidth, when given,
    keeps only points within that lateral distance of the trajectory.
    """
    if density <= 0:
        raise DataError("density must be positive")
    step = 1.0 / np.sqrt(density)
    b = scene.bounds
    xs = np.arange(b.x_min, b.x_max + 1e-9, step)
    ys = np.arange(b.y_min, b.y_max + 1e-9, step)
    gx, gy = np.meshgrid(xs, ys)
    x = gx.ravel()
    y = gy.ravel()
    if corridor_halfwidth is not None:
        keep = corridor_mask(np.column_stack([x, y]),
                             scene.trajectory_xy(ds=0.5), corridor_halfwidth)
        x, y = x[keep], y[keep]
    z = scene.elevation(x, y)
    return PointCloud(np.column_stack([x, y, z]), scene.class_id(x, y))


def corridor_mask(xy: np.ndarray, trajectory_xy: np.ndarray,
                  halfwidth: float) -> np.ndarray:
    """True where a point lies within halfwidth of the trajectory polyline
    (approximated by its dense sample points)."""
    xy = np.atleast_2d(xy)
    d2_min = np.full(xy.shape[0], np.inf)
    for chunk in np.array_split(trajectory_xy,
                                max(1, trajectory_xy.shape[0] // 64)):
        d2 = ((xy[:, None, :] - chunk[None, :, :]) ** 2).sum(axis=2)
        d2_min = np.minimum(d2_min, d2.min(axis=1))
    return d2_min <= halfwidth * halfwidth


# ---------------------------------------------------------------------------
# Dataset loading


@dataclass
class TrainingView:
    """One posed image with its supervision."""

    image: np.ndarray            # (H, W, 3) in [0, 1]
    sem_labels: np.ndarray       # (H, W) int16 class ids (255 = ignore)
    supervision_mask: np.ndarray  # (H, W) bool; False on dynamic/ignore
    ego_pose: SE3Pose
    camera_id: str
    sparse_depth: np.ndarray | None = None  # (k, 3) of (u, v, depth)


@dataclass
class FrameRecord:
    timestamp: float
    camera_id: str
    ego_pose: SE3Pose
    image_path: Path
    semantics_path: Path
    sparse_depth_path: Path | None


class Dataset:
    """Loaded manifest with lazily decoded views."""

    def __init__(self, root: Path, manifest: dict):
        self.root = Path(root)
        self.scene_id = manifest.get("scene_id", "")
        self.cameras: dict[str, tuple[CameraIntrinsics, SE3Pose]] = {}
        for cid, spec in manifest["cameras"].items():
            intr = CameraIntrinsics.from_dict(spec["intrinsics"])
            try:
                calib = SE3Pose.from_matrix(np.array(spec["extrinsic"]))
            except ValueError as exc:
                raise DataError(
                    f"camera {cid!r}: bad extrinsic matrix: {exc}") from exc
            self.cameras[cid] = (intr, calib)
        self.class_table = manifest["classes"]
        self.dynamic_ids = {c["id"] for c in self.class_table if c["dynamic"]}
        self.flat_ids = [c["id"] for c in self.class_table if c.get("flat")]
        static_ids = [c["id"] for c in self.class_table if not c["dynamic"]]
        if not static_ids:
            raise DataError("class table declares no static classes")
        self.num_classes = max(static_ids) + 1
        if any(d < self.num_classes for d in self.dynamic_ids):
            raise DataError("dynamic class ids must come after static ids")
        self.frames: list[FrameRecord] = []
        for i, fr in enumerate(manifest["frames"]):
            cid = fr["camera_id"]
            if cid not in self.cameras:
                raise DataError(
                    f"frame {i} references unknown camera {cid!r}")
            try:
                ego = SE3Pose.from_matrix(np.array(fr["ego_pose"]))
            except ValueError as exc:
                raise DataError(f"frame {i}: bad ego pose: {exc}") from exc
            rec = FrameRecord(
                timestamp=float(fr["timestamp"]),
                camera_id=cid,
                ego_pose=ego,
                image_path=self.root / fr["image"],
                semantics_path=self.root / fr["semantics"],
                sparse_depth_path=(self.root / fr["sparse_depth"]
                                   if fr.get("sparse_depth") else None),
            )
            for p in (rec.image_path, rec.semantics_path,
                      rec.sparse_depth_path):
                if p is not None and not p.exists():
                    raise DataError(f"frame {i}: missing file {p}")
            self.frames.append(rec)
        if not self.frames:
            raise DataError(f"empty dataset: no frames in {root}")

    @property
    def num_views(self) -> int:
        return len(self.frames)

    def intrinsics(self, camera_id: str) -> CameraIntrinsics:
        return self.cameras[camera_id][0]

    def calibrated_extrinsic(self, camera_id: str) -> SE3Pose:
        return self.cameras[camera_id][1]

    def camera_pose(self, view_index: int) -> SE3Pose:
        rec = self.frames[view_index]
        return rec.ego_pose.compose(self.cameras[rec.camera_id][1])

    def camera_positions(self) -> np.ndarray:
        """(n, 2) camera centers in the ground plane, one per view."""
        return np.array([self.camera_pose(i).translation[:2]
                         for i in range(self.num_views)])

    def ego_positions(self) -> np.ndarray:
        return np.array([f.ego_pose.translation[:2] for f in self.frames])

    def load_view(self, i: int) -> TrainingView:
        rec = self.frames[i]
        image = read_png_rgb(rec.image_path)
        sem = read_png_gray(rec.semantics_path)
        if sem.shape != image.shape[:2]:
            raise DataError(
                f"frame {i}: semantic map {rec.semantics_path} has shape "
                f"{sem.shape}, image is {image.shape[:2]}")
        mask = sem != IGNORE_ID
        for dyn in self.dynamic_ids:
            mask &= sem != dyn
        sparse = None
        if rec.sparse_depth_path is not None:
            raw = read_f32(rec.sparse_depth_path)
            if raw.size % 3 != 0:
                raise DataError(
                    f"frame {i}: sparse depth {rec.sparse_depth_path} is not "
                    "a list of (u, v, depth) triples")
            sparse = raw.reshape(-1, 3).astype(np.float64)
        return TrainingView(
            image=image,
            sem_labels=sem,
            supervision_mask=mask,
            ego_pose=rec.ego_pose,
            camera_id=rec.camera_id,
            sparse_depth=sparse,
        )

    def groundtruth_dir(self) -> Path | None:
        gt = self.root / "gt"
        return gt if gt.is_dir() else None


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise DataError(f"no {MANIFEST_NAME} under {root}")
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise DataError(
            f"unsupported manifest schema {manifest.get('schema')!r} "
            f"(expected {MANIFEST_SCHEMA})")
    return Dataset(root, manifest)
