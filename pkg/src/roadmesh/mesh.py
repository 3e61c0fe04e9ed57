"""Bird's-eye-view road mesh: equilateral-triangle grid with learnable
per-vertex color and semantic logits, sub-area cropping, file export, and
orthographic BEV map rendering.

Grid layout: rows spaced spacing*sqrt(3)/2 apart in y; odd rows shifted by
spacing/2 in x; every row has the same column count (odd rows overhang the
x bound by half a spacing). Vertex index = row * ncols + col. Between rows
r and r+1 each column c contributes an "up" and a "down" triangle, stored
at face indices 2*(r*(ncols-1) + c) and that + 1. All triangles are wound
counterclockwise in the (x, y) plane (normals point +z).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

DEFAULT_VERTEX_BUDGET = 20_000_000
DEFAULT_NUM_CLASSES = 7

ROW_PITCH_FACTOR = np.sqrt(3.0) / 2.0

BEV_CLASS_SENTINEL = 255


@dataclass
class Bounds:
    """Axis-aligned rectangle in ground-plane meters."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ValueError(f"degenerate bounds {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max,
                "y_min": self.y_min, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "Bounds":
        return cls(float(d["x_min"]), float(d["x_max"]),
                   float(d["y_min"]), float(d["y_max"]))


def footprint_from_trajectory(ego_positions, margin: float = 20.0) -> Bounds:
    """Bounding box of the driven (x, y) positions inflated by margin."""
    pos = np.atleast_2d(np.asarray(ego_positions, dtype=float))
    if pos.size == 0:
        raise DataError("empty trajectory: cannot derive a mesh footprint")
    return Bounds(pos[:, 0].min() - margin, pos[:, 0].max() + margin,
                  pos[:, 1].min() - margin, pos[:, 1].max() + margin)


@dataclass
class RoadMesh:
    """Triangle grid over the road plane.

    vertex_xy is fixed after construction; vertex_z, vertex_rgb, and
    vertex_sem are the optimized attributes. rgb lives in [0, 1] (projected
    after every optimizer step), sem holds K unnormalized logits.
    """

    vertex_xy: np.ndarray     # (n, 2) meters
    vertex_z: np.ndarray      # (n,) meters
    vertex_rgb: np.ndarray    # (n, 3) in [0, 1]
    vertex_sem: np.ndarray    # (n, K) logits
    faces: np.ndarray         # (m, 3) int32
    spacing: float
    num_classes: int
    bounds: Bounds | None = None
    grid_shape: tuple[int, int] | None = None  # (nrows, ncols) when gridded

    @property
    def num_vertices(self) -> int:
        return self.vertex_xy.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    def vertex_positions(self) -> np.ndarray:
        """(n, 3) world positions."""
        return np.column_stack([self.vertex_xy, self.vertex_z])


def init_grid(bounds: Bounds, spacing: float,
              num_classes: int = DEFAULT_NUM_CLASSES,
              vertex_budget: int = DEFAULT_VERTEX_BUDGET) -> RoadMesh:
    """Build the flat equilateral-triangle grid covering bounds.

    z starts at 0, colors at 0.5 gray, semantic logits at 0 (uniform).
    """
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    row_pitch = spacing * ROW_PITCH_FACTOR
    nrows = int(np.floor(bounds.height / row_pitch)) + 1
    ncols = int(np.floor(bounds.width / spacing)) + 1
    if nrows < 2 or ncols < 2:
        raise DataError(
            f"bounds {bounds} too small for spacing {spacing}: "
            f"grid would be {nrows}x{ncols}")
    n_vertices = nrows * ncols
    if n_vertices > vertex_budget:
        raise DataError(
            f"grid of {nrows}x{ncols} = {n_vertices} vertices exceeds the "
            f"budget of {vertex_budget}; coarsen spacing or shrink bounds")

    rows = np.arange(nrows)
    cols = np.arange(ncols)
    x = bounds.x_min + cols[None, :] * spacing + (rows[:, None] % 2) * (spacing / 2.0)
    y = bounds.y_min + rows[:, None] * row_pitch + np.zeros((1, ncols))
    vertex_xy = np.column_stack([x.ravel(), y.ravel()])

    # Two triangles per (row pair, column pair); apex direction alternates
    # with row parity so every triangle is equilateral and CCW.
    r = np.repeat(np.arange(nrows - 1), ncols - 1)
    c = np.tile(np.arange(ncols - 1), nrows - 1)
    base = r * ncols + c
    even = (r % 2) == 0
    up = np.where(even[:, None],
                  np.column_stack([base, base + 1, base + ncols]),
                  np.column_stack([base, base + 1, base + ncols + 1]))
    down = np.where(even[:, None],
                    np.column_stack([base + 1, base + ncols + 1, base + ncols]),
                    np.column_stack([base, base + ncols + 1, base + ncols]))
    faces = np.empty((2 * len(base), 3), dtype=np.int32)
    faces[0::2] = up
    faces[1::2] = down

    return RoadMesh(
        vertex_xy=vertex_xy,
        vertex_z=np.zeros(n_vertices),
        vertex_rgb=np.full((n_vertices, 3), 0.5),
        vertex_sem=np.zeros((n_vertices, num_classes)),
        faces=faces,
        spacing=spacing,
        num_classes=num_classes,
        bounds=bounds,
        grid_shape=(nrows, ncols),
    )


@dataclass
class SubMesh:
    """Index view into a parent RoadMesh around one waypoint.

    Holds indices only; attribute accessors gather fresh copies from the
    parent, and optimizer writes go back through vertex_indices.
    """

    parent: RoadMesh
    vertex_indices: np.ndarray   # (k,) into parent vertices
    face_indices: np.ndarray     # (f,) into parent faces
    faces: np.ndarray            # (f, 3) remapped to local vertex order
    center: tuple[float, float]
    radius: float

    @property
    def num_vertices(self) -> int:
        return self.vertex_indices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_classes(self) -> int:
        return self.parent.num_classes

    @property
    def vertex_xy(self) -> np.ndarray:
        return self.parent.vertex_xy[self.vertex_indices]

    @property
    def vertex_z(self) -> np.ndarray:
        return self.parent.vertex_z[self.vertex_indices]

    @property
    def vertex_rgb(self) -> np.ndarray:
        return self.parent.vertex_rgb[self.vertex_indices]

    @property
    def vertex_sem(self) -> np.ndarray:
        return self.parent.vertex_sem[self.vertex_indices]

    def vertex_positions(self) -> np.ndarray:
        return np.column_stack([self.vertex_xy, self.vertex_z])


def crop_subarea(mesh: RoadMesh, center, radius: float) -> SubMesh:
    """Faces with at least one vertex within radius of center, plus their
    vertices. An empty selection yields an empty SubMesh."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    center = np.asarray(center, dtype=float).reshape(2)
    d2 = np.sum((mesh.vertex_xy - center) ** 2, axis=1)
    in_ball = d2 <= radius * radius
    face_mask = in_ball[mesh.faces].any(axis=1)
    face_indices = np.nonzero(face_mask)[0].astype(np.int64)
    if face_indices.size == 0:
        return SubMesh(mesh, np.empty(0, dtype=np.int64),
                       face_indices, np.empty((0, 3), dtype=np.int32),
                       (float(center[0]), float(center[1])), radius)
    used = np.unique(mesh.faces[face_indices])
    remap = np.full(mesh.num_vertices, -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    local_faces = remap[mesh.faces[face_indices]].astype(np.int32)
    return SubMesh(mesh, used.astype(np.int64), face_indices, local_faces,
                   (float(center[0]), float(center[1])), radius)


def _rgb_to_bytes(rgb: np.ndarray) -> np.ndarray:
    """[0,1] floats to uint8 with round-half-up (0.5 -> 128)."""
    return np.floor(np.clip(rgb, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def export_mesh(mesh, path, fmt: str = "ply") -> None:
    """Write the mesh to disk as binary PLY or vertex-colored OBJ.

    PLY vertices carry float32 x/y/z, uint8 red/green/blue, and a uint8
    class column (argmax of the semantic logits). OBJ uses the common
    'v x y z r g b' vertex-color extension at full float precision.
    """
    if fmt == "ply":
        _export_ply(mesh, path)
    elif fmt == "obj":
        _export_obj(mesh, path)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}; use 'ply' or 'obj'")


def _export_ply(mesh, path) -> None:
    n, m = mesh.num_vertices, mesh.num_faces
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "property uchar class\n"
        f"element face {m}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    vert = np.empty(n, dtype=[("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                              ("red", "u1"), ("green", "u1"), ("blue", "u1"),
                              ("class", "u1")])
    vert["x"] = mesh.vertex_xy[:, 0]
    vert["y"] = mesh.vertex_xy[:, 1]
    vert["z"] = mesh.vertex_z
    colors = _rgb_to_bytes(mesh.vertex_rgb)
    vert["red"], vert["green"], vert["blue"] = colors[:, 0], colors[:, 1], colors[:, 2]
    vert["class"] = np.argmax(mesh.vertex_sem, axis=1).astype(np.uint8)
    face = np.empty(m, dtype=[("count", "u1"), ("i", "<i4"), ("j", "<i4"),
                              ("k", "<i4")])
    face["count"] = 3
    face["i"], face["j"], face["k"] = (mesh.faces[:, 0], mesh.faces[:, 1],
                                       mesh.faces[:, 2])
    try:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(vert.tobytes())
            fh.write(face.tobytes())
    except OSError as exc:
        raise DataError(f"failed to write PLY to {path}: {exc}") from exc


def _export_obj(mesh, path) -> None:
    lines = []
    rgb = np.clip(mesh.vertex_rgb, 0.0, 1.0)
    xy, z = mesh.vertex_xy, mesh.vertex_z
    for i in range(mesh.num_vertices):
        lines.append("v %r %r %r %r %r %r" % (
            float(xy[i, 0]), float(xy[i, 1]), float(z[i]),
            float(rgb[i, 0]), float(rgb[i, 1]), float(rgb[i, 2])))
    for f in mesh.faces:
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise DataError(f"failed to write OBJ to {path}: {exc}") from exc


@dataclass
class BevMaps:
    """Orthographic top-down maps. Row 0 is the y_max edge (north up).

    Pixels not covered by the mesh hold sentinels: rgb 0, class 255,
    elevation NaN, mask False.
    """

    rgb: np.ndarray        # (H, W, 3) float in [0, 1]
    class_id: np.ndarray   # (H, W) uint8
    elevation: np.ndarray  # (H, W) float32 meters
    mask: np.ndarray       # (H, W) bool
    x_min: float
    y_max: float
    px_per_meter: float

    def pixel_centers(self):
        h, w = self.mask.shape
        xs = self.x_min + (np.arange(w) + 0.5) / self.px_per_meter
        ys = self.y_max - (np.arange(h) + 0.5) / self.px_per_meter
        return xs, ys


def render_bev_maps(mesh: RoadMesh, px_per_meter: float = 10.0) -> BevMaps:
    """Rasterize the mesh top-down by barycentric interpolation.

    Relies on the regular grid layout for point location, so it only
    accepts meshes built by init_grid.
    """
    if mesh.grid_shape is None or mesh.bounds is None:
        raise ValueError("render_bev_maps requires a gridded RoadMesh")
    b = mesh.bounds
    width = int(np.ceil(b.width * px_per_meter))
    height = int(np.ceil(b.height * px_per_meter))
    xs = b.x_min + (np.arange(width) + 0.5) / px_per_meter
    ys = b.y_max - (np.arange(height) + 0.5) / px_per_meter
    px = np.repeat(xs[None, :], height, axis=0).ravel()
    py = np.repeat(ys[:, None], width, axis=1).ravel()

    face_id, bary = _locate_in_grid(mesh, px, py)
    covered = face_id >= 0

    rgb = np.zeros((height * width, 3))
    elev = np.full(height * width, np.nan, dtype=np.float32)
    cls = np.full(height * width, BEV_CLASS_SENTINEL, dtype=np.uint8)
    if covered.any():
        tri = mesh.faces[face_id[covered]]
        w = bary[covered]
        rgb[covered] = np.einsum("nk,nkc->nc", w, mesh.vertex_rgb[tri])
        elev[covered] = np.einsum("nk,nk->n", w, mesh.vertex_z[tri]).astype(np.float32)
        logits = np.einsum("nk,nkc->nc", w, mesh.vertex_sem[tri])
        cls[covered] = np.argmax(logits, axis=1).astype(np.uint8)

    shape = (height, width)
    return BevMaps(rgb=rgb.reshape(height, width, 3),
                   class_id=cls.reshape(shape),
                   elevation=elev.reshape(shape),
                   mask=covered.reshape(shape),
                   x_min=b.x_min, y_max=b.y_max, px_per_meter=px_per_meter)


def _locate_in_grid(mesh: RoadMesh, px, py):
    """Find the containing face and barycentric weights for query points.

    Returns (face_id, bary) with face_id -1 where a point is outside the
    mesh. Candidate faces come from the grid structure; membership is the
    barycentric sign test with a -1e-9 slack.
    """
    nrows, ncols = mesh.grid_shape
    b = mesh.bounds
    s = mesh.spacing
    row_pitch = s * ROW_PITCH_FACTOR
    n = px.shape[0]

    fy = (py - b.y_min) / row_pitch
    r = np.floor(fy).astype(np.int64)
    xi = (px - b.x_min) / s

    face_id = np.full(n, -1, dtype=np.int64)
    best_minw = np.full(n, -np.inf)
    bary = np.zeros((n, 3))
    row_ok = (r >= 0) & (r < nrows - 1)

    c_near = np.floor(xi).astype(np.int64)
    xy = mesh.vertex_xy
    for dc in (-1, 0, 1):
        c = c_near + dc
        col_ok = row_ok & (c >= 0) & (c < ncols - 1)
        if not col_ok.any():
            continue
        base_face = 2 * (r * (ncols - 1) + c)
        for tri_kind in (0, 1):
            fid = base_face + tri_kind
            cand = np.where(col_ok, fid, 0)
            tri = mesh.faces[cand]
            w = _barycentric_2d(xy[tri[:, 0]], xy[tri[:, 1]], xy[tri[:, 2]],
                                px, py)
            minw = w.min(axis=1)
            better = col_ok & (minw > best_minw)
            best_minw[better] = minw[better]
            face_id[better] = fid[better]
            bary[better] = w[better]

    inside = best_minw >= -1e-9
    face_id[~inside] = -1
    return face_id, bary


def _barycentric_2d(a, b, c, px, py):
    """Affine barycentric weights of points (px, py) in triangles (a, b, c)."""
    v0x, v0y = b[:, 0] - a[:, 0], b[:, 1] - a[:, 1]
    v1x, v1y = c[:, 0] - a[:, 0], c[:, 1] - a[:, 1]
    v2x, v2y = px - a[:, 0], py - a[:, 1]
    den = v0x * v1y - v1x * v0y
    den = np.where(den == 0.0, 1.0, den)
    wb = (v2x * v1y - v1x * v2y) / den
    wc = (v0x * v2y - v2x * v0y) / den
    wa = 1.0 - wb - wc
    return np.column_stack([wa, wb, wc])
