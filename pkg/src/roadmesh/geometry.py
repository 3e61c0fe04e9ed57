"""SE(3) math: Rodrigues rotations, pose composition, pinhole projection.

Conventions used throughout the package:
  - World frame: x/y in the ground plane (meters), z up.
  - Ego frame: x forward, y left, z up, origin at the vehicle reference point.
  - Camera frame: x right, y down, z forward (optical axis).
  - Poses are camera-to-parent (apply() maps child-frame points to the
    parent frame); serialized as row-major 4x4 homogeneous matrices.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Points closer than this along the optical axis are not projectable.
NEAR_PLANE = 0.1

# Below this rotation angle (radians) Rodrigues coefficients switch to
# their second-order Taylor expansions to avoid 0/0.
SMALL_ANGLE = 1e-6


def skew(v) -> np.ndarray:
    """Antisymmetric matrix S with S @ w == cross(v, w)."""
    x, y, z = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -z, y],
        [z, 0.0, -x],
        [-y, x, 0.0],
    ])


def _rodrigues_coeffs(alpha: float) -> tuple[float, float]:
    """Coefficients (sin a / a, (1 - cos a) / a^2) with small-angle fallback."""
    if alpha < SMALL_ANGLE:
        a2 = alpha * alpha
        return 1.0 - a2 / 6.0, 0.5 - a2 / 24.0
    return np.sin(alpha) / alpha, (1.0 - np.cos(alpha)) / (alpha * alpha)


def rodrigues(phi) -> np.ndarray:
    """Rotation matrix for an axis-angle vector phi (radians).

    R = I + sin(a)/a [phi]x + (1-cos a)/a^2 [phi]x^2  with a = |phi|.
    """
    phi = np.asarray(phi, dtype=float)
    alpha = float(np.linalg.norm(phi))
    a_coef, b_coef = _rodrigues_coeffs(alpha)
    s = skew(phi)
    return np.eye(3) + a_coef * s + b_coef * (s @ s)


def _coeff_derivatives(alpha: float) -> tuple[float, float]:
    """(dA/da)/a and (dB/da)/a for A = sin a / a, B = (1 - cos a)/a^2.

    Dividing by alpha keeps the product with phi_k finite at alpha -> 0.
    """
    if alpha < SMALL_ANGLE:
        a2 = alpha * alpha
        return -1.0 / 3.0 + a2 / 30.0, -1.0 / 12.0 + a2 / 180.0
    sa, ca = np.sin(alpha), np.cos(alpha)
    da = (alpha * ca - sa) / alpha ** 3
    db = (alpha * sa - 2.0 * (1.0 - ca)) / alpha ** 4
    return da, db


def rotation_vjp(phi, points, cotangents) -> np.ndarray:
    """Accumulated gradient of sum_i <cotangent_i, R(phi) @ point_i> w.r.t. phi.

    points and cotangents are (n, 3); returns a length-3 gradient. Uses the
    closed-form derivative of the Rodrigues formula, stable at |phi| -> 0.
    """
    phi = np.asarray(phi, dtype=float)
    p = np.atleast_2d(np.asarray(points, dtype=float))
    u = np.atleast_2d(np.asarray(cotangents, dtype=float))
    alpha = float(np.linalg.norm(phi))
    a_coef, b_coef = _rodrigues_coeffs(alpha)
    da_over_a, db_over_a = _coeff_derivatives(alpha)

    c1 = np.cross(np.broadcast_to(phi, p.shape), p)      # phi x p
    c2 = np.cross(np.broadcast_to(phi, p.shape), c1)     # phi x (phi x p)
    u_dot_c1 = np.einsum("ij,ij->i", u, c1)
    u_dot_c2 = np.einsum("ij,ij->i", u, c2)
    phi_dot_p = p @ phi
    u_dot_p = np.einsum("ij,ij->i", u, p)

    # d(Rp)/dphi_k contracted with u:
    #   (A'/a) phi_k (u.c1) + A (p x u)_k + (B'/a) phi_k (u.c2)
    #   + B [ (c1 x u)_k + u_k (phi.p) - (u.p) phi_k ]
    grad = (da_over_a * u_dot_c1.sum() + db_over_a * u_dot_c2.sum()) * phi
    grad += a_coef * np.cross(p, u).sum(axis=0)
    grad += b_coef * (np.cross(c1, u).sum(axis=0)
                      + u.T @ phi_dot_p
                      - u_dot_p.sum() * phi)
    return grad


def rodrigues_point_gradient(phi, p, upstream) -> np.ndarray:
    """Gradient of <upstream, R(phi) @ p> with respect to phi."""
    return rotation_vjp(phi, np.asarray(p, dtype=float)[None, :],
                        np.asarray(upstream, dtype=float)[None, :])


@dataclass
class AxisAngle:
    """Axis-angle rotation parameters: phi with angle |phi| about phi/|phi|."""

    phi: np.ndarray

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float).reshape(3)

    @property
    def alpha(self) -> float:
        return float(np.linalg.norm(self.phi))

    @property
    def omega(self) -> np.ndarray:
        a = self.alpha
        if a == 0.0:
            return np.zeros(3)
        return self.phi / a

    def rotation(self) -> np.ndarray:
        return rodrigues(self.phi)


@dataclass
class SE3Pose:
    """Rigid transform: apply() maps child-frame points into the parent frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "SE3Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat, check: bool = True) -> "SE3Pose":
        mat = np.asarray(mat, dtype=float)
        if mat.shape != (4, 4):
            raise ValueError(f"expected 4x4 homogeneous matrix, got {mat.shape}")
        if check:
            if not np.allclose(mat[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
                raise ValueError("last row of homogeneous matrix must be [0,0,0,1]")
            r = mat[:3, :3]
            if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6:
                raise ValueError("rotation block is not orthonormal")
        return cls(mat[:3, :3], mat[:3, 3])

    def to_matrix(self) -> np.ndarray:
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        return SE3Pose(self.rotation @ other.rotation,
                       self.rotation @ other.translation + self.translation)

    def inverse(self) -> "SE3Pose":
        rt = self.rotation.T
        return SE3Pose(rt, -rt @ self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def apply_inverse(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return (points - self.translation) @ self.rotation


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


@dataclass
class ExtrinsicCorrection:
    """Small per-camera pose correction applied right of the calibrated extrinsic.

    The rotation lives in axis-angle form; after every optimizer step the
    angle is rescaled to at most rot_clamp_deg and each translation
    component clipped to +-trans_clamp_m.
    """

    phi: np.ndarray = field(default_factory=lambda: np.zeros(3))
    delta_t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    rot_clamp_deg: float = 0.1
    trans_clamp_m: float = 0.1

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float).reshape(3).copy()
        self.delta_t = np.asarray(self.delta_t, dtype=float).reshape(3).copy()

    def as_pose(self) -> SE3Pose:
        return SE3Pose(rodrigues(self.phi), self.delta_t)

    def clamp(self) -> None:
        """Project parameters back into the configured trust region."""
        limit = np.deg2rad(self.rot_clamp_deg)
        alpha = float(np.linalg.norm(self.phi))
        if alpha > limit:
            self.phi *= limit / alpha
        np.clip(self.delta_t, -self.trans_clamp_m, self.trans_clamp_m,
                out=self.delta_t)

    def rotation_angle_deg(self) -> float:
        return float(np.rad2deg(np.linalg.norm(self.phi)))


def compose_camera_pose(ego: SE3Pose, calibrated_extrinsic: SE3Pose,
                        correction: ExtrinsicCorrection | None = None) -> SE3Pose:
    """Camera-to-world pose: ego o calibrated_extrinsic o correction."""
    pose = ego.compose(calibrated_extrinsic)
    if correction is not None:
        pose = pose.compose(correction.as_pose())
    return pose


def project(p_world, cam: SE3Pose, intr: CameraIntrinsics):
    """Project world points through a camera-to-world pose.

    Returns (uv, depth, valid): uv is (n, 2) pixel coordinates, depth the
    camera-frame z in meters, valid False where depth <= NEAR_PLANE.
    """
    p = np.atleast_2d(np.asarray(p_world, dtype=float))
    p_cam = cam.apply_inverse(p)
    depth = p_cam[:, 2]
    valid = depth > NEAR_PLANE
    z = np.where(valid, depth, 1.0)  # avoid divide warnings; masked anyway
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = intr.fx * p_cam[:, 0] / z + intr.cx
    uv[:, 1] = intr.fy * p_cam[:, 1] / z + intr.cy
    return uv, depth, valid


def unproject(uv, depth, cam: SE3Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Lift pixels with known depth back to world points (inverse of project)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    depth = np.asarray(depth, dtype=float).reshape(-1)
    p_cam = np.empty((uv.shape[0], 3))
    p_cam[:, 0] = (uv[:, 0] - intr.cx) / intr.fx * depth
    p_cam[:, 1] = (uv[:, 1] - intr.cy) / intr.fy * depth
    p_cam[:, 2] = depth
    return cam.apply(p_cam)
