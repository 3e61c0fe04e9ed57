"""Tests for SE(3) math, Rodrigues rotations, and pinhole projection.

Derived expectations come from independent oracles: a truncated matrix
exponential for rotations, central finite differences for gradients, and a
plain 4x4 homogeneous-matrix pipeline for pose composition and projection.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roadmesh.geometry import (
    NEAR_PLANE,
    AxisAngle,
    CameraIntrinsics,
    ExtrinsicCorrection,
    SE3Pose,
    compose_camera_pose,
    project,
    rodrigues,
    rodrigues_point_gradient,
    rotation_vjp,
    skew,
    unproject,
)

RNG = np.random.default_rng(20240211)


def matrix_exp_oracle(phi, terms=20):
    """R = exp([phi]x) via a truncated Taylor series (independent of rodrigues)."""
    s = np.array([
        [0.0, -phi[2], phi[1]],
        [phi[2], 0.0, -phi[0]],
        [-phi[1], phi[0], 0.0],
    ])
    result = np.eye(3)
    term = np.eye(3)
    for k in range(1, terms + 1):
        term = term @ s / k
        result = result + term
    return result


def cross_oracle(v, w):
    """Componentwise cross product, written out by hand."""
    return np.array([
        v[1] * w[2] - v[2] * w[1],
        v[2] * w[0] - v[0] * w[2],
        v[0] * w[1] - v[1] * w[0],
    ])


class TestSkew:
    def test_matrix_layout(self):
        expected = np.array([
            [0.0, -3.0, 2.0],
            [3.0, 0.0, -1.0],
            [-2.0, 1.0, 0.0],
        ])
        np.testing.assert_array_equal(skew([1.0, 2.0, 3.0]), expected)

    def test_zero_vector(self):
        np.testing.assert_array_equal(skew(np.zeros(3)), np.zeros((3, 3)))

    def test_matches_cross_product(self):
        for _ in range(50):
            v = RNG.normal(size=3)
            w = RNG.normal(size=3)
            np.testing.assert_allclose(skew(v) @ w, cross_oracle(v, w),
                                       atol=1e-12)

    def test_antisymmetric(self):
        v = RNG.normal(size=3)
        s = skew(v)
        np.testing.assert_array_equal(s, -s.T)


class TestRodrigues:
    def test_zero_rotation_is_identity(self):
        np.testing.assert_array_equal(rodrigues(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        expected = np.array([
            [0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(rodrigues([0.0, 0.0, np.pi / 2]), expected,
                                   atol=1e-15)

    def test_matches_matrix_exponential(self):
        for _ in range(100):
            phi = RNG.normal(size=3)
            phi *= RNG.uniform(0, np.pi) / max(np.linalg.norm(phi), 1e-12)
            r = rodrigues(phi)
            assert np.abs(r - matrix_exp_oracle(phi)).max() < 1e-9

    def test_small_angles_match_exponential(self):
        for scale in [1e-10, 1e-8, 1e-7, 9e-7, 1.1e-6, 1e-4]:
            phi = np.array([0.3, -0.5, 0.81]) * scale
            np.testing.assert_allclose(rodrigues(phi), matrix_exp_oracle(phi),
                                       atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(st.tuples(*[st.floats(-50.0, 50.0) for _ in range(3)]))
    def test_always_in_so3(self, phi_tuple):
        r = rodrigues(np.array(phi_tuple))
        assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-9
        assert abs(np.linalg.det(r) - 1.0) < 1e-9

    def test_negation_transposes(self):
        for _ in range(20):
            phi = RNG.normal(size=3) * RNG.uniform(0, 3)
            np.testing.assert_allclose(rodrigues(-phi), rodrigues(phi).T,
                                       atol=1e-12)


class TestAxisAngle:
    def test_derived_quantities(self):
        aa = AxisAngle(np.array([0.0, 3.0, 4.0]))
        assert aa.alpha == pytest.approx(5.0)
        np.testing.assert_allclose(aa.omega, [0.0, 0.6, 0.8])
        assert abs(np.linalg.norm(aa.omega) - 1.0) < 1e-12

    def test_zero_angle(self):
        aa = AxisAngle(np.zeros(3))
        assert aa.alpha == 0.0
        np.testing.assert_array_equal(aa.omega, np.zeros(3))


def fd_point_gradient(phi, p, upstream, step=1e-6):
    """Central finite differences of <upstream, R(phi) p> w.r.t. phi."""
    grad = np.zeros(3)
    for k in range(3):
        dphi = np.zeros(3)
        dphi[k] = step
        f_plus = upstream @ (rodrigues(phi + dphi) @ p)
        f_minus = upstream @ (rodrigues(phi - dphi) @ p)
        grad[k] = (f_plus - f_minus) / (2 * step)
    return grad


class TestRodriguesPointGradient:
    def test_small_angle_limit(self):
        grad = rodrigues_point_gradient(np.zeros(3), np.array([1.0, 0.0, 0.0]),
                                        np.array([0.0, 1.0, 0.0]))
        np.testing.assert_allclose(grad, [0.0, 0.0, 1.0], atol=1e-12)

    def test_matches_finite_differences(self):
        for _ in range(50):
            phi = RNG.normal(size=3) * RNG.uniform(0, 2.5)
            p = RNG.normal(size=3) * 3
            upstream = RNG.normal(size=3)
            analytic = rodrigues_point_gradient(phi, p, upstream)
            numeric = fd_point_gradient(phi, p, upstream)
            denom = max(np.linalg.norm(numeric), 1e-6)
            assert np.linalg.norm(analytic - numeric) / denom < 1e-5

    def test_zero_upstream(self):
        phi = RNG.normal(size=3)
        p = RNG.normal(size=3)
        grad = rodrigues_point_gradient(phi, p, np.zeros(3))
        np.testing.assert_array_equal(grad, np.zeros(3))

    def test_vjp_batch_equals_sum_of_singles(self):
        phi = RNG.normal(size=3)
        pts = RNG.normal(size=(7, 3))
        cots = RNG.normal(size=(7, 3))
        batched = rotation_vjp(phi, pts, cots)
        summed = sum(rodrigues_point_gradient(phi, pts[i], cots[i])
                     for i in range(7))
        np.testing.assert_allclose(batched, summed, rtol=1e-12, atol=1e-12)


def random_pose(rng):
    phi = rng.normal(size=3)
    return SE3Pose(rodrigues(phi), rng.normal(size=3) * 5)


class TestSE3Pose:
    def test_compose_matches_homogeneous_product(self):
        for _ in range(20):
            a = random_pose(RNG)
            b = random_pose(RNG)
            composed = a.compose(b)
            oracle = a.to_matrix() @ b.to_matrix()
            np.testing.assert_allclose(composed.to_matrix(), oracle, atol=1e-12)

    def test_inverse_roundtrip(self):
        p = random_pose(RNG)
        ident = p.compose(p.inverse()).to_matrix()
        np.testing.assert_allclose(ident, np.eye(4), atol=1e-12)

    def test_apply_matches_matrix(self):
        p = random_pose(RNG)
        pts = RNG.normal(size=(10, 3))
        hom = np.concatenate([pts, np.ones((10, 1))], axis=1)
        oracle = (p.to_matrix() @ hom.T).T[:, :3]
        np.testing.assert_allclose(p.apply(pts), oracle, atol=1e-12)

    def test_from_matrix_rejects_bad_rotation(self):
        mat = np.eye(4)
        mat[0, 0] = 2.0
        with pytest.raises(ValueError):
            SE3Pose.from_matrix(mat)


class TestComposeCameraPose:
    def test_identity_extrinsic_zero_correction(self):
        ego = random_pose(RNG)
        cam = compose_camera_pose(ego, SE3Pose.identity(), ExtrinsicCorrection())
        np.testing.assert_allclose(cam.to_matrix(), ego.to_matrix(), atol=0)

    def test_zero_correction_matches_matrix_product(self):
        ego = random_pose(RNG)
        calib = random_pose(RNG)
        cam = compose_camera_pose(ego, calib, ExtrinsicCorrection())
        oracle = ego.to_matrix() @ calib.to_matrix()
        np.testing.assert_allclose(cam.to_matrix(), oracle, atol=1e-12)

    def test_quarter_turn_correction(self):
        corr = ExtrinsicCorrection(phi=[0.0, 0.0, np.pi / 2],
                                   rot_clamp_deg=360.0)
        cam = compose_camera_pose(SE3Pose.identity(), SE3Pose.identity(), corr)
        expected = np.array([
            [0.0, -1.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
        ])
        np.testing.assert_allclose(cam.rotation, expected, atol=1e-15)

    def test_correction_inversion_recovers_calibrated(self):
        ego = random_pose(RNG)
        calib = random_pose(RNG)
        corr = ExtrinsicCorrection(phi=RNG.normal(size=3) * 0.01,
                                   delta_t=RNG.normal(size=3) * 0.05)
        cam = compose_camera_pose(ego, calib, corr)
        recovered = cam.compose(corr.as_pose().inverse())
        oracle = ego.compose(calib)
        assert np.abs(recovered.to_matrix() - oracle.to_matrix()).max() < 1e-9

    def test_associativity_with_se3_product(self):
        ego, calib = random_pose(RNG), random_pose(RNG)
        corr = ExtrinsicCorrection(phi=[0.01, -0.02, 0.005], delta_t=[0.1, 0, 0])
        left = ego.compose(calib.compose(corr.as_pose()))
        right = compose_camera_pose(ego, calib, corr)
        np.testing.assert_allclose(left.to_matrix(), right.to_matrix(),
                                   atol=1e-12)


class TestExtrinsicCorrection:
    def test_clamp_rescales_rotation(self):
        corr = ExtrinsicCorrection(phi=[0.1, 0.0, 0.0], rot_clamp_deg=0.1)
        corr.clamp()
        assert corr.rotation_angle_deg() == pytest.approx(0.1)
        np.testing.assert_allclose(corr.phi / np.linalg.norm(corr.phi),
                                   [1.0, 0.0, 0.0])

    def test_clamp_clips_translation_componentwise(self):
        corr = ExtrinsicCorrection(delta_t=[0.5, -0.02, -0.5], trans_clamp_m=0.1)
        corr.clamp()
        np.testing.assert_allclose(corr.delta_t, [0.1, -0.02, -0.1])

    def test_clamp_leaves_small_values_alone(self):
        corr = ExtrinsicCorrection(phi=[1e-4, 0, 0], delta_t=[0.01, 0, 0])
        before = (corr.phi.copy(), corr.delta_t.copy())
        corr.clamp()
        np.testing.assert_array_equal(corr.phi, before[0])
        np.testing.assert_array_equal(corr.delta_t, before[1])


def default_intrinsics():
    return CameraIntrinsics(fx=300.0, fy=300.0, cx=128.0, cy=128.0,
                            width=256, height=256)


class TestProjection:
    def test_optical_axis_hits_principal_point(self):
        intr = default_intrinsics()
        uv, depth, valid = project([0.0, 0.0, 5.0], SE3Pose.identity(), intr)
        assert valid[0]
        np.testing.assert_allclose(uv[0], [intr.cx, intr.cy])
        assert depth[0] == pytest.approx(5.0)

    def test_point_behind_camera_is_invalid(self):
        uv, depth, valid = project([0.0, 0.0, -1.0], SE3Pose.identity(),
                                   default_intrinsics())
        assert not valid[0]
        assert depth[0] == pytest.approx(-1.0)

    def test_near_plane_boundary(self):
        _, _, valid = project([[0, 0, NEAR_PLANE], [0, 0, NEAR_PLANE + 1e-6]],
                              SE3Pose.identity(), default_intrinsics())
        assert not valid[0]
        assert valid[1]

    def test_matches_homogeneous_pipeline(self):
        intr = default_intrinsics()
        for _ in range(20):
            cam = random_pose(RNG)
            p = cam.apply(RNG.uniform([-3, -3, 1], [3, 3, 20]))
            uv, depth, valid = project(p, cam, intr)
            assert valid[0]
            # Oracle: full 4x4 inverse then explicit perspective divide.
            hom = np.linalg.inv(cam.to_matrix()) @ np.append(p, 1.0)
            k = np.array([[intr.fx, 0, intr.cx],
                          [0, intr.fy, intr.cy],
                          [0, 0, 1.0]])
            proj = k @ hom[:3]
            np.testing.assert_allclose(uv[0], proj[:2] / proj[2], atol=1e-9)
            np.testing.assert_allclose(depth[0], hom[2], atol=1e-9)

    def test_project_unproject_roundtrip(self):
        intr = default_intrinsics()
        cam = random_pose(RNG)
        uv = RNG.uniform(0, 255, size=(50, 2))
        depth = RNG.uniform(0.5, 30, size=50)
        p_world = unproject(uv, depth, cam, intr)
        uv2, depth2, valid = project(p_world, cam, intr)
        assert valid.all()
        assert np.abs(uv2 - uv).max() < 1e-6
        np.testing.assert_allclose(depth2, depth, atol=1e-9)


class TestCameraIntrinsics:
    def test_rejects_nonpositive_focal(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=0.0, fy=1.0, cx=0, cy=0, width=10, height=10)

    def test_rejects_principal_point_outside(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1, fy=1, cx=10, cy=0, width=10, height=10)
