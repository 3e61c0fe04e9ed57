"""Tests for the differentiable rasterizer.

Forward results are checked against the independent per-pixel ray-cast
oracle in oracles.py; gradients against central finite differences.
"""

from dataclasses import dataclass

import numpy as np
import pytest

from oracles import raycast_render, stable_interior_mask
from roadmesh.geometry import (
    CameraIntrinsics,
    ExtrinsicCorrection,
    SE3Pose,
    compose_camera_pose,
    rodrigues,
)
from roadmesh.renderer import rasterize, rasterize_backward, unproject_depth


@dataclass
class TriSoup:
    """Minimal mesh-like container for renderer tests."""

    vertex_xy: np.ndarray
    vertex_z: np.ndarray
    vertex_rgb: np.ndarray
    vertex_sem: np.ndarray
    faces: np.ndarray


def small_intr(size=64, f=60.0):
    return CameraIntrinsics(fx=f, fy=f, cx=(size - 1) / 2.0,
                            cy=(size - 1) / 2.0, width=size, height=size)


def single_triangle(depth=5.0, half=20.0, color=(0.3, 0.6, 0.9)):
    """One big triangle facing an identity camera at the given depth."""
    xy = np.array([[-half, -half], [half, -half], [0.0, half]])
    soup = TriSoup(
        vertex_xy=xy,
        vertex_z=np.full(3, depth),
        vertex_rgb=np.tile(np.asarray(color), (3, 1)),
        vertex_sem=np.zeros((3, 2)),
        faces=np.array([[0, 2, 1]], dtype=np.int32),
    )
    return soup


def random_scene(rng, n_tris=10, k_classes=3, z_range=(2.0, 10.0)):
    """Random triangles in front of an identity camera; winding random so
    roughly half are back-facing (exercising the culling convention)."""
    n_v = 3 * n_tris
    z = rng.uniform(*z_range, size=n_v)
    span = z * 0.5  # stay near the frustum
    xy = rng.uniform(-1, 1, size=(n_v, 2)) * span[:, None]
    return TriSoup(
        vertex_xy=xy,
        vertex_z=z,
        vertex_rgb=rng.uniform(size=(n_v, 3)),
        vertex_sem=rng.normal(size=(n_v, k_classes)),
        faces=np.arange(n_v, dtype=np.int32).reshape(n_tris, 3),
    )


IDENTITY = SE3Pose.identity()


class TestForward:
    def test_constant_triangle_covers_image(self):
        intr = small_intr()
        out, frag = rasterize(IDENTITY, intr, single_triangle())
        assert out.mask.all()
        np.testing.assert_allclose(out.color, np.broadcast_to([0.3, 0.6, 0.9],
                                                              out.color.shape))
        np.testing.assert_allclose(out.depth, 5.0)
        assert (frag.face_id == 0).all()
        np.testing.assert_allclose(frag.bary.sum(axis=-1), 1.0, atol=1e-12)

    def test_empty_frustum(self):
        soup = single_triangle(depth=-5.0)  # entirely behind the camera
        out, frag = rasterize(IDENTITY, small_intr(), soup)
        assert not out.mask.any()
        assert (frag.face_id == -1).all()

    def test_behind_near_plane_culled_whole(self):
        soup = single_triangle(depth=5.0)
        soup.vertex_z[0] = 0.05  # one vertex in front of the near plane
        out, _ = rasterize(IDENTITY, small_intr(), soup)
        assert not out.mask.any()

    def test_backface_culled(self):
        soup = single_triangle()
        soup.faces = soup.faces[:, ::-1].copy()  # flip winding
        out, _ = rasterize(IDENTITY, small_intr(), soup)
        assert not out.mask.any()

    def test_two_stacked_triangles_nearest_wins(self):
        near = single_triangle(depth=5.0, color=(1.0, 0.0, 0.0))
        far = single_triangle(depth=7.0, color=(0.0, 1.0, 0.0))
        soup = TriSoup(
            vertex_xy=np.vstack([far.vertex_xy, near.vertex_xy]),
            vertex_z=np.concatenate([far.vertex_z, near.vertex_z]),
            vertex_rgb=np.vstack([far.vertex_rgb, near.vertex_rgb]),
            vertex_sem=np.zeros((6, 2)),
            faces=np.array([[0, 2, 1], [3, 5, 4]], dtype=np.int32),
        )
        out, frag = rasterize(IDENTITY, small_intr(), soup)
        assert out.mask.all()
        np.testing.assert_allclose(out.depth, 5.0)
        assert (frag.face_id == 1).all()

    def test_equal_depth_tie_breaks_to_lower_face_index(self):
        a = single_triangle(depth=5.0, color=(1.0, 0.0, 0.0))
        soup = TriSoup(
            vertex_xy=np.vstack([a.vertex_xy, a.vertex_xy]),
            vertex_z=np.concatenate([a.vertex_z, a.vertex_z]),
            vertex_rgb=np.vstack([a.vertex_rgb, np.zeros((3, 3))]),
            vertex_sem=np.zeros((6, 2)),
            faces=np.array([[0, 2, 1], [3, 5, 4]], dtype=np.int32),
        )
        out, frag = rasterize(IDENTITY, small_intr(), soup)
        assert (frag.face_id[out.mask] == 0).all()
        np.testing.assert_allclose(out.color[out.mask][:, 0], 1.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_raycast_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        intr = small_intr(size=48)
        scene = random_scene(rng, n_tris=int(rng.integers(3, 17)))
        out, frag = rasterize(IDENTITY, intr, scene)
        oracle = raycast_render(IDENTITY, intr, scene)
        keep = oracle["edge_dist"] > 1e-6
        np.testing.assert_array_equal(out.mask[keep], oracle["mask"][keep])
        both = keep & out.mask & oracle["mask"]
        assert np.abs(out.depth[both] - oracle["depth"][both]).max() < 1e-6
        np.testing.assert_allclose(out.color[both], oracle["color"][both],
                                   atol=1e-6)
        np.testing.assert_allclose(out.sem[both], oracle["sem"][both],
                                   atol=1e-5)

    def test_forward_determinism(self):
        rng = np.random.default_rng(5)
        scene = random_scene(rng, n_tris=12)
        intr = small_intr()
        out1, frag1 = rasterize(IDENTITY, intr, scene)
        out2, frag2 = rasterize(IDENTITY, intr, scene)
        np.testing.assert_array_equal(out1.color, out2.color)
        np.testing.assert_array_equal(out1.depth, out2.depth)
        np.testing.assert_array_equal(frag1.face_id, frag2.face_id)


def masked_loss_upstreams(rng, out, mask, k_classes):
    """Fixed random linear-functional upstream images, zeroed off-mask."""
    g_c = rng.normal(size=out.color.shape) * mask[:, :, None]
    g_s = rng.normal(size=out.sem.shape) * mask[:, :, None]
    g_d = rng.normal(size=out.depth.shape) * mask
    return g_c, g_s, g_d


def scene_loss(camera_pose, intr, mesh, g_c, g_s, g_d):
    out, _ = rasterize(camera_pose, intr, mesh)
    return (float((out.color * g_c).sum()) + float((out.sem * g_s).sum())
            + float((out.depth * g_d).sum()))


class TestBackward:
    def test_single_pixel_locality(self):
        rng = np.random.default_rng(2)
        scene = random_scene(rng, n_tris=6)
        intr = small_intr()
        out, frag = rasterize(IDENTITY, intr, scene)
        iy, ix = np.argwhere(out.mask)[0]
        g_c = np.zeros_like(out.color)
        g_c[iy, ix] = [1.0, 0.0, 0.0]
        grads = rasterize_backward(frag, g_c, None, None, IDENTITY, intr, scene)
        touched = np.nonzero(np.abs(grads["vertex_rgb"]).sum(axis=1))[0]
        expected = np.sort(scene.faces[frag.face_id[iy, ix]])
        np.testing.assert_array_equal(np.sort(touched), expected)
        w = frag.bary[iy, ix]
        np.testing.assert_allclose(grads["vertex_rgb"][expected, 0],
                                   w[np.argsort(scene.faces[frag.face_id[iy, ix]])],
                                   atol=1e-12)

    def test_zero_upstream_zero_grads(self):
        rng = np.random.default_rng(3)
        scene = random_scene(rng)
        intr = small_intr()
        out, frag = rasterize(IDENTITY, intr, scene)
        z = np.zeros_like
        corr = ExtrinsicCorrection()
        grads = rasterize_backward(frag, z(out.color), z(out.sem), z(out.depth),
                                   IDENTITY, intr, scene,
                                   base_pose=IDENTITY, correction=corr)
        for key in ("vertex_rgb", "vertex_sem", "vertex_z", "phi", "delta_t"):
            np.testing.assert_array_equal(grads[key], 0.0)

    def test_attribute_gradients_match_fd(self):
        rng = np.random.default_rng(4)
        scene = random_scene(rng, n_tris=5)
        intr = small_intr(size=32)
        out, frag = rasterize(IDENTITY, intr, scene)
        assert out.mask.any()
        g_c, g_s, _ = masked_loss_upstreams(rng, out, out.mask, 3)
        grads = rasterize_backward(frag, g_c, g_s, None, IDENTITY, intr, scene)

        step = 1e-3
        checked = 0
        for v in np.unique(scene.faces[np.unique(frag.face_id[out.mask])]):
            for ch in range(3):
                orig = scene.vertex_rgb[v, ch]
                scene.vertex_rgb[v, ch] = orig + step
                f_plus = scene_loss(IDENTITY, intr, scene, g_c, g_s,
                                    np.zeros_like(out.depth))
                scene.vertex_rgb[v, ch] = orig - step
                f_minus = scene_loss(IDENTITY, intr, scene, g_c, g_s,
                                     np.zeros_like(out.depth))
                scene.vertex_rgb[v, ch] = orig
                fd = (f_plus - f_minus) / (2 * step)
                ana = grads["vertex_rgb"][v, ch]
                denom = max(abs(fd), abs(ana), 1e-9)
                if abs(fd) > 1e-7:
                    assert abs(ana - fd) / denom < 1e-4
                    checked += 1
        assert checked > 10

    def test_geometry_gradients_match_fd(self):
        rng = np.random.default_rng(6)
        intr = small_intr(size=48)
        # Gentle camera above a near-planar patch: big stable interiors.
        scene = random_scene(rng, n_tris=8, z_range=(4.0, 6.0))
        base = SE3Pose(rodrigues([0.02, -0.01, 0.03]), [0.1, -0.2, -0.5])
        corr = ExtrinsicCorrection(phi=[1e-3, -2e-3, 5e-4],
                                   delta_t=[0.01, -0.005, 0.02],
                                   rot_clamp_deg=45, trans_clamp_m=1.0)
        cam = compose_camera_pose(base, SE3Pose.identity(), corr)
        out, frag = rasterize(cam, intr, scene)
        interior = stable_interior_mask(frag.face_id, margin=2)
        assert interior.sum() > 50
        g_c, g_s, g_d = masked_loss_upstreams(rng, out, interior, 3)
        grads = rasterize_backward(frag, g_c, g_s, g_d, cam, intr, scene,
                                   base_pose=base, correction=corr)

        step = 1e-4

        def loss_now():
            c = compose_camera_pose(base, SE3Pose.identity(), corr)
            return scene_loss(c, intr, scene, g_c, g_s, g_d)

        # Vertex elevation.
        checked = 0
        vs = np.unique(scene.faces[np.unique(frag.face_id[interior])])
        for v in vs[:12]:
            orig = scene.vertex_z[v]
            scene.vertex_z[v] = orig + step
            f_plus = loss_now()
            scene.vertex_z[v] = orig - step
            f_minus = loss_now()
            scene.vertex_z[v] = orig
            fd = (f_plus - f_minus) / (2 * step)
            ana = grads["vertex_z"][v]
            if abs(fd) > 1e-5:
                assert abs(ana - fd) / max(abs(fd), abs(ana)) < 1e-2
                checked += 1
        assert checked >= 5

        # Extrinsic correction, rotation and translation.
        for arr, key in [(corr.phi, "phi"), (corr.delta_t, "delta_t")]:
            for k in range(3):
                orig = arr[k]
                arr[k] = orig + step
                f_plus = loss_now()
                arr[k] = orig - step
                f_minus = loss_now()
                arr[k] = orig
                fd = (f_plus - f_minus) / (2 * step)
                ana = grads[key][k]
                assert abs(fd) > 1e-6, "degenerate finite-difference probe"
                assert abs(ana - fd) / max(abs(fd), abs(ana)) < 1e-2, (
                    f"{key}[{k}]: analytic {ana} vs fd {fd}")

    def test_gradient_additivity_over_upstreams(self):
        rng = np.random.default_rng(8)
        scene = random_scene(rng, n_tris=6)
        intr = small_intr()
        out, frag = rasterize(IDENTITY, intr, scene)
        u1 = rng.normal(size=out.color.shape) * out.mask[:, :, None]
        u2 = rng.normal(size=out.color.shape) * out.mask[:, :, None]
        g1 = rasterize_backward(frag, u1, None, None, IDENTITY, intr, scene)
        g2 = rasterize_backward(frag, u2, None, None, IDENTITY, intr, scene)
        g12 = rasterize_backward(frag, u1 + u2, None, None, IDENTITY, intr, scene)
        np.testing.assert_allclose(g12["vertex_rgb"],
                                   g1["vertex_rgb"] + g2["vertex_rgb"],
                                   atol=1e-12)
        np.testing.assert_allclose(g12["vertex_z"],
                                   g1["vertex_z"] + g2["vertex_z"], atol=1e-12)

    def test_mismatched_mesh_rejected(self):
        rng = np.random.default_rng(9)
        scene = random_scene(rng, n_tris=6)
        other = random_scene(rng, n_tris=3)
        intr = small_intr()
        _, frag = rasterize(IDENTITY, intr, scene)
        with pytest.raises(ValueError, match="does not match"):
            rasterize_backward(frag, None, None, None, IDENTITY, intr, other)


class TestUnprojectDepth:
    def test_constant_depth_plane(self):
        intr = small_intr()
        out, _ = rasterize(IDENTITY, intr, single_triangle(depth=5.0))
        pts = unproject_depth(out.depth, out.mask, IDENTITY, intr)
        np.testing.assert_allclose(pts[:, 2], 5.0, atol=1e-12)

    def test_points_land_on_mesh_triangles(self):
        rng = np.random.default_rng(11)
        scene = random_scene(rng, n_tris=8)
        intr = small_intr()
        out, frag = rasterize(IDENTITY, intr, scene)
        pts = unproject_depth(out.depth, out.mask, IDENTITY, intr)
        fids = frag.face_id[out.mask]
        verts3d = np.column_stack([scene.vertex_xy, scene.vertex_z])
        for i in range(0, pts.shape[0], 37):
            tri = verts3d[scene.faces[fids[i]]]
            assert point_triangle_distance(pts[i], tri) < 1e-4

    def test_project_unproject_roundtrip(self):
        from roadmesh.geometry import project

        intr = small_intr()
        out, _ = rasterize(IDENTITY, intr, single_triangle(depth=6.0))
        pts = unproject_depth(out.depth, out.mask, IDENTITY, intr)
        uv, _, valid = project(pts, IDENTITY, intr)
        assert valid.all()
        iy, ix = np.nonzero(out.mask)
        np.testing.assert_allclose(uv[:, 0], ix, atol=1e-6)
        np.testing.assert_allclose(uv[:, 1], iy, atol=1e-6)


def point_triangle_distance(p, tri):
    """Distance from a point to a 3D triangle (projection + edge checks)."""
    a, b, c = tri
    n = np.cross(b - a, c - a)
    n_norm = np.linalg.norm(n)
    if n_norm < 1e-15:
        return min(np.linalg.norm(p - a), np.linalg.norm(p - b),
                   np.linalg.norm(p - c))
    n = n / n_norm
    dist_plane = abs(np.dot(p - a, n))
    proj = p - np.dot(p - a, n) * n
    # Barycentric inside test for the projected point.
    v0, v1, v2 = b - a, c - a, proj - a
    d00, d01, d11 = v0 @ v0, v0 @ v1, v1 @ v1
    d20, d21 = v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    wb = (d11 * d20 - d01 * d21) / den
    wc = (d00 * d21 - d01 * d20) / den
    if wb >= 0 and wc >= 0 and wb + wc <= 1:
        return dist_plane
    best = np.inf
    for s, e in [(a, b), (b, c), (c, a)]:
        se = e - s
        t = np.clip(np.dot(p - s, se) / np.dot(se, se), 0, 1)
        best = min(best, np.linalg.norm(p - (s + t * se)))
    return best
