"""Waypoint selection by farthest-point sampling over camera positions,
and per-waypoint grouping of views and sub-area crop requests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

DEFAULT_RADIUS = 25.0
DEFAULT_CROP_MARGIN = 10.0


def farthest_point_sample(positions, radius: float, seed: int) -> np.ndarray:
    """Greedy farthest-point waypoints covering positions within radius.

    The first waypoint is drawn uniformly from positions with the seed;
    each following waypoint is the position farthest from the chosen set
    (ties to the lowest index); selection stops once that farthest
    distance is <= radius. Returns the waypoint (x, y) array in selection
    order.
    """
    pos = np.atleast_2d(np.asarray(positions, dtype=float))
    if pos.shape[0] == 0:
        raise ValueError("need at least one position")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(pos.shape[0]))
    chosen = [first]
    dist = np.linalg.norm(pos - pos[first], axis=1)
    while True:
        far = int(np.argmax(dist))
        if dist[far] <= radius:
            break
        chosen.append(far)
        dist = np.minimum(dist, np.linalg.norm(pos - pos[far], axis=1))
    return pos[chosen]


def gather_views(waypoints, camera_positions, radius: float) -> list[np.ndarray]:
    """View indices within the closed ball of each waypoint (boundary
    distance exactly radius is included). Lists may overlap."""
    wp = np.atleast_2d(np.asarray(waypoints, dtype=float))
    pos = np.atleast_2d(np.asarray(camera_positions, dtype=float))
    out = []
    for center in wp:
        d = np.linalg.norm(pos - center, axis=1)
        out.append(np.nonzero(d <= radius)[0])
    return out


@dataclass
class CropRequest:
    """Sub-area crop around a waypoint; radius includes the render margin."""

    center: tuple[float, float]
    radius: float


@dataclass
class WaypointPlan:
    """Camera positions plus the sampling parameters for one training run."""

    positions: np.ndarray          # (n, 2) camera (x, y)
    radius: float = DEFAULT_RADIUS
    crop_margin: float = DEFAULT_CROP_MARGIN
    base_seed: int = 0
    waypoints: np.ndarray = field(default_factory=lambda: np.empty((0, 2)))
    view_lists: list = field(default_factory=list)

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))

    def sample(self, seed: int) -> None:
        self.waypoints = farthest_point_sample(self.positions, self.radius, seed)
        self.view_lists = gather_views(self.waypoints, self.positions,
                                       self.radius)

    def to_json(self) -> str:
        return json.dumps({
            "radius": self.radius,
            "crop_margin": self.crop_margin,
            "base_seed": self.base_seed,
            "waypoints": self.waypoints.tolist(),
            "view_lists": [v.tolist() for v in self.view_lists],
        }, sort_keys=True)


def epoch_schedule(plan: WaypointPlan, epoch: int) -> list[tuple[CropRequest, np.ndarray]]:
    """Re-seeded waypoint pass for one epoch, in selection order.

    Reseeding per epoch moves the sub-area boundaries so that boundary
    vertices receive consistent supervision across epochs. Crop radius is
    the gather radius plus the margin, letting views see slightly past
    their waypoint ball.
    """
    plan.sample(plan.base_seed + epoch)
    out = []
    for center, views in zip(plan.waypoints, plan.view_lists):
        req = CropRequest(center=(float(center[0]), float(center[1])),
                          radius=plan.radius + plan.crop_margin)
        out.append((req, views))
    return out
