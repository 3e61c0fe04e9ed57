"""Evaluation metrics: PSNR, mIoU, outlier-filtered chamfer distance, and
depth RMSE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError

IGNORE_ID = 255


@dataclass
class PointCloud:
    """World-frame points with optional per-point class ids."""

    points: np.ndarray                 # (n, 3) meters
    class_ids: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if not np.isfinite(self.points).all():
            raise DataError("point cloud contains non-finite coordinates")
        if self.class_ids is not None:
            self.class_ids = np.asarray(self.class_ids).reshape(-1)

    def filtered(self, allow_classes) -> "PointCloud":
        if allow_classes is None or self.class_ids is None:
            return self
        keep = np.isin(self.class_ids, list(allow_classes))
        return PointCloud(self.points[keep], self.class_ids[keep])


def psnr(img, ref, mask=None) -> float:
    """10 log10(1 / MSE) for unit-range images, pooled over masked pixels
    and all channels. Identical inputs return inf."""
    img = np.asarray(img, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if img.shape != ref.shape:
        raise ValueError(f"shape mismatch {img.shape} vs {ref.shape}")
    if mask is None:
        mask = np.ones(img.shape[:2], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DataError("empty mask in psnr")
    diff = (img - ref)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


def miou(pred_classes, gt_classes, mask=None, num_classes: int = None,
         ignore_id: int = IGNORE_ID) -> float:
    """Mean intersection-over-union in percent over classes present in the
    ground truth (within the mask). Returns NaN if no class is present."""
    pred = np.asarray(pred_classes)
    gt = np.asarray(gt_classes)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if num_classes is None:
        raise ValueError("num_classes is required")
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool) & (gt != ignore_id)
    pred_m, gt_m = pred[mask], gt[mask]
    ious = []
    for k in range(num_classes):
        gt_k = gt_m == k
        if not gt_k.any():
            continue
        pred_k = pred_m == k
        inter = float(np.count_nonzero(gt_k & pred_k))
        union = float(np.count_nonzero(gt_k | pred_k))
        ious.append(inter / union)
    if not ious:
        return float("nan")
    return 100.0 * float(np.mean(ious))


def _nn_sq_dists_brute(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """O(n*m) nearest-neighbor squared distances."""
    out = np.empty(queries.shape[0])
    # Chunk queries so the distance matrix stays small.
    step = max(1, int(2_000_000 / max(refs.shape[0], 1)))
    for lo in range(0, queries.shape[0], step):
        q = queries[lo:lo + step]
        d2 = ((q[:, None, :] - refs[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + step] = d2.min(axis=1)
    return out


class _UniformGrid:
    """Exact nearest-neighbor queries over a hashed uniform grid.

    Rings of cells around the query are searched outward; a ring at
    Chebyshev distance r can only hold points at least (r-1) * cell away,
    so the search stops as soon as the best squared distance is within
    (ring * cell)^2. Ring enumeration is clamped to the occupied cell box,
    and queries far outside it jump straight to the first touching ring.
    """

    def __init__(self, points: np.ndarray):
        self.points = points
        n = points.shape[0]
        lo = points.min(axis=0)
        hi = points.max(axis=0)
        extent = hi - lo
        # Aim for a handful of points per occupied cell, sizing over the
        # non-degenerate dimensions only (planar and linear clouds would
        # otherwise get microscopic cells), and keep at most ~2048 cells
        # along any axis so ring searches stay shallow.
        nontrivial = extent[extent > 1e-9]
        if nontrivial.size == 0:
            self.cell = 1.0
        else:
            density_cell = (float(np.prod(nontrivial)) / n) ** (1.0 / nontrivial.size)
            self.cell = max(density_cell, float(extent.max()) / 2048.0, 1e-9)
        self.origin = lo
        keys = np.floor((points - lo) / self.cell).astype(np.int64)
        self.key_min = keys.min(axis=0)
        self.key_max = keys.max(axis=0)
        self.buckets: dict[tuple, np.ndarray] = {}
        order = np.lexsort((keys[:, 2], keys[:, 1], keys[:, 0]))
        sorted_keys = keys[order]
        change = np.nonzero(np.any(np.diff(sorted_keys, axis=0) != 0, axis=1))[0]
        starts = np.concatenate([[0], change + 1])
        ends = np.concatenate([change + 1, [n]])
        for s, e in zip(starts, ends):
            self.buckets[tuple(sorted_keys[s])] = order[s:e]

    def nn_sq_dist(self, q: np.ndarray) -> float:
        cell = np.floor((q - self.origin) / self.cell).astype(np.int64)
        gap = np.maximum(self.key_min - cell, 0) + np.maximum(
            cell - self.key_max, 0)
        ring = int(gap.max())                  # first ring touching the box
        cover = int(np.maximum(np.abs(self.key_min - cell),
                               np.abs(self.key_max - cell)).max())
        best = np.inf
        while True:
            idxs = self._ring_members(cell, ring)
            if idxs.size:
                d2 = ((self.points[idxs] - q) ** 2).sum(axis=1)
                best = min(best, float(d2.min()))
            if best <= (ring * self.cell) ** 2 or ring >= cover:
                return best
            ring += 1

    def _ring_members(self, cell, ring) -> np.ndarray:
        found = []
        x_lo = max(cell[0] - ring, self.key_min[0])
        x_hi = min(cell[0] + ring, self.key_max[0])
        y_lo = max(cell[1] - ring, self.key_min[1])
        y_hi = min(cell[1] + ring, self.key_max[1])
        z_lo = max(cell[2] - ring, self.key_min[2])
        z_hi = min(cell[2] + ring, self.key_max[2])
        for kx in range(x_lo, x_hi + 1):
            for ky in range(y_lo, y_hi + 1):
                for kz in range(z_lo, z_hi + 1):
                    if max(abs(kx - cell[0]), abs(ky - cell[1]),
                           abs(kz - cell[2])) != ring:
                        continue
                    hit = self.buckets.get((kx, ky, kz))
                    if hit is not None:
                        found.append(hit)
        if not found:
            return np.empty(0, dtype=np.int64)
        return np.concatenate(found)


def _nn_sq_dists_grid(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    grid = _UniformGrid(refs)
    return np.array([grid.nn_sq_dist(q) for q in queries])


def _directional_mean(sq_dists: np.ndarray, keep_fraction: float) -> float:
    n = sq_dists.shape[0]
    if keep_fraction >= 1.0:
        return float(np.mean(sq_dists))
    n_keep = max(1, int(np.floor(keep_fraction * n)))
    kept = np.partition(sq_dists, n_keep - 1)[:n_keep]
    return float(np.mean(kept))


def chamfer(cloud_a, cloud_b, keep_fraction: float = 0.97,
            flat_classes=None, backend: str = "grid") -> float:
    """Symmetric chamfer distance in meters^2.

    Per direction the squared nearest-neighbor distances are computed, the
    largest (1 - keep_fraction) are discarded (kept count = floor of
    keep_fraction * n, at least 1), and the kept mean taken; the result is
    the sum of the two directional means. flat_classes restricts both
    clouds to the given class-id allowlist before matching.
    """
    a = cloud_a if isinstance(cloud_a, PointCloud) else PointCloud(cloud_a)
    b = cloud_b if isinstance(cloud_b, PointCloud) else PointCloud(cloud_b)
    a = a.filtered(flat_classes)
    b = b.filtered(flat_classes)
    if a.points.shape[0] == 0 or b.points.shape[0] == 0:
        raise DataError("chamfer distance needs two nonempty clouds")
    nn = _nn_sq_dists_grid if backend == "grid" else _nn_sq_dists_brute
    d_ab = nn(a.points, b.points)
    d_ba = nn(b.points, a.points)
    return (_directional_mean(d_ab, keep_fraction)
            + _directional_mean(d_ba, keep_fraction))


def depth_rmse(depth, reference, mask=None) -> float:
    """RMSE between depth maps over mask AND finite positive reference."""
    d = np.asarray(depth, dtype=float)
    ref = np.asarray(reference, dtype=float)
    if d.shape != ref.shape:
        raise ValueError(f"shape mismatch {d.shape} vs {ref.shape}")
    valid = np.isfinite(ref) & (ref > 0)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise DataError("empty mask in depth_rmse")
    diff = d[valid] - ref[valid]
    return float(np.sqrt(np.mean(diff * diff)))
