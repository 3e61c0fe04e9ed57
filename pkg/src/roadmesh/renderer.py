"""Differentiable perspective rasterization of the road mesh.

Forward: hard top-1 z-buffer per pixel with perspective-correct barycentric
interpolation of vertex color, semantic logits, and depth. Triangles with
any vertex behind the near plane are culled whole; back faces (world normal
pointing away from the camera center) are culled. Ties at equal depth go to
the lower face index so output is independent of traversal order.

Backward: gradients flow through the barycentric weights' dependence on the
projected vertex positions, then through the projection to vertex elevation
and to the extrinsic correction. Visibility (which face wins the z-buffer)
is treated as piecewise constant: no gradient crosses face-selection
boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    NEAR_PLANE,
    CameraIntrinsics,
    ExtrinsicCorrection,
    SE3Pose,
    rotation_vjp,
    unproject,
)

# Candidate (face, pixel) pairs processed per vectorized batch; bounds the
# transient memory of the z-buffer pass.
CANDIDATE_BUDGET = 2_000_000


@dataclass
class RenderOutput:
    """Per-view rendering: color in [0,1], semantic logits, depth (m), mask."""

    color: np.ndarray   # (H, W, 3)
    sem: np.ndarray     # (H, W, K)
    depth: np.ndarray   # (H, W)
    mask: np.ndarray    # (H, W) bool


@dataclass
class FragmentBuffer:
    """Per-pixel rasterization record for the backward pass.

    face_id is -1 on uncovered pixels; bary holds the perspective-correct
    weights of the winning face's three vertices.
    """

    face_id: np.ndarray  # (H, W) int32
    bary: np.ndarray     # (H, W, 3)
    depth: np.ndarray    # (H, W)
    num_faces: int       # of the mesh this was rasterized from


def _project_all(camera_pose: SE3Pose, intr: CameraIntrinsics, verts3d):
    p_cam = camera_pose.apply_inverse(verts3d)
    z = p_cam[:, 2]
    safe_z = np.where(z > 0, z, 1.0)
    u = intr.fx * p_cam[:, 0] / safe_z + intr.cx
    v = intr.fy * p_cam[:, 1] / safe_z + intr.cy
    return p_cam, u, v


def _visible_faces(faces, verts3d, p_cam, u, v, cam_center, intr,
                   near: float) -> np.ndarray:
    """Indices of faces that survive near-plane, frustum, and backface culling."""
    z_tri = p_cam[:, 2][faces]
    keep = (z_tri > near).all(axis=1)

    u_tri, v_tri = u[faces], v[faces]
    keep &= (u_tri.max(axis=1) >= 0) & (u_tri.min(axis=1) <= intr.width - 1)
    keep &= (v_tri.max(axis=1) >= 0) & (v_tri.min(axis=1) <= intr.height - 1)

    a = verts3d[faces[:, 0]]
    normal = np.cross(verts3d[faces[:, 1]] - a, verts3d[faces[:, 2]] - a)
    keep &= np.einsum("ij,ij->i", normal, cam_center[None, :] - a) > 0
    return np.nonzero(keep)[0]


def _bary_affine(ua, va, ub, vb, uc, vc, px, py):
    """Affine screen-space barycentrics and the 2x signed area (denominator)."""
    v0x, v0y = ub - ua, vb - va
    v1x, v1y = uc - ua, vc - va
    den = v0x * v1y - v1x * v0y
    safe = np.where(den == 0.0, 1.0, den)
    v2x, v2y = px - ua, py - va
    lb = (v2x * v1y - v1x * v2y) / safe
    lc = (v0x * v2y - v2x * v0y) / safe
    la = 1.0 - lb - lc
    return la, lb, lc, den


def rasterize(camera_pose: SE3Pose, intr: CameraIntrinsics, mesh,
              near: float = NEAR_PLANE):
    """Render a mesh (RoadMesh, SubMesh, or any object exposing vertex_xy,
    vertex_z, vertex_rgb, vertex_sem, faces) into a RenderOutput plus the
    FragmentBuffer needed for rasterize_backward."""
    h, w = intr.height, intr.width
    n_px = h * w
    faces = np.asarray(mesh.faces)
    num_classes = mesh.vertex_sem.shape[1]

    out = RenderOutput(
        color=np.zeros((h, w, 3)),
        sem=np.zeros((h, w, num_classes)),
        depth=np.zeros((h, w)),
        mask=np.zeros((h, w), dtype=bool),
    )
    frag = FragmentBuffer(
        face_id=np.full((h, w), -1, dtype=np.int32),
        bary=np.zeros((h, w, 3)),
        depth=np.zeros((h, w)),
        num_faces=faces.shape[0],
    )
    if faces.shape[0] == 0 or mesh.vertex_xy.shape[0] == 0:
        return out, frag

    verts3d = np.column_stack([
        np.asarray(mesh.vertex_xy, dtype=np.float64),
        np.asarray(mesh.vertex_z, dtype=np.float64),
    ])
    p_cam, u, v = _project_all(camera_pose, intr, verts3d)
    vis = _visible_faces(faces, verts3d, p_cam, u, v,
                         camera_pose.translation, intr, near)
    if vis.size == 0:
        return out, frag

    # Integer pixel-center bounding boxes per visible face.
    u_tri, v_tri = u[faces[vis]], v[faces[vis]]
    x0 = np.clip(np.ceil(u_tri.min(axis=1)), 0, w - 1).astype(np.int64)
    x1 = np.clip(np.floor(u_tri.max(axis=1)), 0, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(v_tri.min(axis=1)), 0, h - 1).astype(np.int64)
    y1 = np.clip(np.floor(v_tri.max(axis=1)), 0, h - 1).astype(np.int64)
    nonempty = (x1 >= x0) & (y1 >= y0)
    vis, x0, x1, y0, y1 = vis[nonempty], x0[nonempty], x1[nonempty], \
        y0[nonempty], y1[nonempty]
    if vis.size == 0:
        return out, frag

    counts = (x1 - x0 + 1) * (y1 - y0 + 1)
    ends = np.cumsum(counts)
    splits = np.searchsorted(ends, np.arange(CANDIDATE_BUDGET, ends[-1],
                                             CANDIDATE_BUDGET), side="left")
    chunk_edges = np.concatenate([[0], splits + 1, [vis.size]])
    chunk_edges = np.unique(chunk_edges)

    best_depth = np.full(n_px, np.inf)
    best_face = np.full(n_px, -1, dtype=np.int64)

    for lo, hi in zip(chunk_edges[:-1], chunk_edges[1:]):
        sl = slice(lo, hi)
        _zbuffer_chunk(vis[sl], x0[sl], x1[sl], y0[sl], y1[sl], counts[sl],
                       faces, u, v, p_cam[:, 2], w, best_depth, best_face)

    covered = np.nonzero(best_face >= 0)[0]
    if covered.size == 0:
        return out, frag

    tri = faces[best_face[covered]]
    px = (covered % w).astype(np.float64)
    py = (covered // w).astype(np.float64)
    la, lb, lc, _ = _bary_affine(u[tri[:, 0]], v[tri[:, 0]],
                                 u[tri[:, 1]], v[tri[:, 1]],
                                 u[tri[:, 2]], v[tri[:, 2]], px, py)
    lam = np.stack([la, lb, lc], axis=1)
    z_tri = p_cam[:, 2][tri]
    ratio = lam / z_tri
    w_sum = ratio.sum(axis=1)
    bary = ratio / w_sum[:, None]
    depth = 1.0 / w_sum

    rgb = np.asarray(mesh.vertex_rgb, dtype=np.float64)
    sem = np.asarray(mesh.vertex_sem, dtype=np.float64)
    color = np.einsum("nk,nkc->nc", bary, rgb[tri])
    logits = np.einsum("nk,nkc->nc", bary, sem[tri])

    iy, ix = covered // w, covered % w
    out.color[iy, ix] = color
    out.sem[iy, ix] = logits
    out.depth[iy, ix] = depth
    out.mask[iy, ix] = True
    frag.face_id[iy, ix] = best_face[covered].astype(np.int32)
    frag.bary[iy, ix] = bary
    frag.depth[iy, ix] = depth
    return out, frag


def _zbuffer_chunk(face_ids, x0, x1, y0, y1, counts, faces, u, v, z, img_w,
                   best_depth, best_face):
    """Depth-test all (face, bbox-pixel) candidates of one chunk and fold
    them into the global per-pixel minimum of (depth, face index)."""
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    total = int(counts.sum())
    if total == 0:
        return
    cand = np.arange(total)
    which = np.searchsorted(np.cumsum(counts), cand, side="right")
    k = cand - offsets[which]
    bw = (x1 - x0 + 1)[which]
    px = x0[which] + k % bw
    py = y0[which] + k // bw

    gfid = face_ids[which]
    tri = faces[gfid]
    la, lb, lc, den = _bary_affine(u[tri[:, 0]], v[tri[:, 0]],
                                   u[tri[:, 1]], v[tri[:, 1]],
                                   u[tri[:, 2]], v[tri[:, 2]],
                                   px.astype(np.float64), py.astype(np.float64))
    inside = (la >= 0) & (lb >= 0) & (lc >= 0) & (den != 0)
    if not inside.any():
        return
    z_tri = z[tri[inside]]
    w_sum = (np.stack([la[inside], lb[inside], lc[inside]], axis=1)
             / z_tri).sum(axis=1)
    depth = 1.0 / w_sum
    pid = (py[inside] * img_w + px[inside]).astype(np.int64)
    gfid = gfid[inside]

    # Per-pixel lexicographic min over (depth, face id), then global merge.
    order = np.lexsort((gfid, depth, pid))
    pid_s, depth_s, gfid_s = pid[order], depth[order], gfid[order]
    first = np.concatenate([[True], pid_s[1:] != pid_s[:-1]])
    pid_u, depth_u, gfid_u = pid_s[first], depth_s[first], gfid_s[first]

    cur_d, cur_f = best_depth[pid_u], best_face[pid_u]
    better = (depth_u < cur_d) | ((depth_u == cur_d) & (gfid_u < cur_f))
    best_depth[pid_u[better]] = depth_u[better]
    best_face[pid_u[better]] = gfid_u[better]


def rasterize_backward(frag: FragmentBuffer, grad_color, grad_sem, grad_depth,
                       camera_pose: SE3Pose, intr: CameraIntrinsics, mesh,
                       base_pose: SE3Pose | None = None,
                       correction: ExtrinsicCorrection | None = None) -> dict:
    """Backpropagate per-pixel gradients through the rasterization.

    grad_color/grad_sem/grad_depth may be None when a term is unused.
    camera_pose and mesh must be the ones the fragments were rendered from;
    when base_pose and correction are supplied (camera_pose must equal
    base_pose o correction), extrinsic gradients are produced as well.

    Returns {"vertex_rgb", "vertex_sem", "vertex_z", "phi", "delta_t"};
    the extrinsic entries are None without a correction context.
    """
    faces = np.asarray(mesh.faces)
    if frag.num_faces != faces.shape[0]:
        raise ValueError("fragment buffer does not match this mesh")
    n_verts = mesh.vertex_xy.shape[0]
    num_classes = mesh.vertex_sem.shape[1]
    grads = {
        "vertex_rgb": np.zeros((n_verts, 3)),
        "vertex_sem": np.zeros((n_verts, num_classes)),
        "vertex_z": np.zeros(n_verts),
        "phi": None if correction is None else np.zeros(3),
        "delta_t": None if correction is None else np.zeros(3),
    }
    covered = np.nonzero(frag.face_id.ravel() >= 0)[0]
    if covered.size == 0:
        return grads

    if correction is not None:
        if base_pose is None:
            raise ValueError("extrinsic gradients need base_pose and correction")
        check = base_pose.compose(correction.as_pose())
        if not np.allclose(check.to_matrix(), camera_pose.to_matrix(),
                           atol=1e-12):
            raise ValueError(
                "camera_pose is not base_pose composed with correction")

    h, w = frag.face_id.shape
    iy, ix = covered // w, covered % w
    fid = frag.face_id[iy, ix].astype(np.int64)
    tri = faces[fid]
    bary = frag.bary[iy, ix]

    g_c = None if grad_color is None else np.asarray(grad_color, dtype=np.float64)[iy, ix]
    g_s = None if grad_sem is None else np.asarray(grad_sem, dtype=np.float64)[iy, ix]
    g_d = None if grad_depth is None else np.asarray(grad_depth, dtype=np.float64)[iy, ix]

    # Attribute gradients: weight times upstream at each winning vertex.
    if g_c is not None:
        np.add.at(grads["vertex_rgb"], tri, bary[:, :, None] * g_c[:, None, :])
    if g_s is not None:
        np.add.at(grads["vertex_sem"], tri, bary[:, :, None] * g_s[:, None, :])

    verts3d = np.column_stack([
        np.asarray(mesh.vertex_xy, dtype=np.float64),
        np.asarray(mesh.vertex_z, dtype=np.float64),
    ])
    p_cam, u, v = _project_all(camera_pose, intr, verts3d)
    z_tri = p_cam[:, 2][tri]

    # s'_i = dL/d(weight_i): channel dot of upstream with vertex attributes,
    # plus the depth upstream against vertex depths.
    s_prime = np.zeros_like(bary)
    if g_c is not None:
        rgb = np.asarray(mesh.vertex_rgb, dtype=np.float64)
        s_prime += np.einsum("nc,nkc->nk", g_c, rgb[tri])
    if g_s is not None:
        sem = np.asarray(mesh.vertex_sem, dtype=np.float64)
        s_prime += np.einsum("nc,nkc->nk", g_s, sem[tri])
    if g_d is not None:
        s_prime += g_d[:, None] * z_tri

    s_bar = np.einsum("nk,nk->n", s_prime, bary)

    # Recover affine barycentrics and their point-gradients.
    px = (covered % w).astype(np.float64)
    py = (covered // w).astype(np.float64)
    ua, va = u[tri[:, 0]], v[tri[:, 0]]
    ub, vb = u[tri[:, 1]], v[tri[:, 1]]
    uc, vc = u[tri[:, 2]], v[tri[:, 2]]
    la, lb, lc, den = _bary_affine(ua, va, ub, vb, uc, vc, px, py)
    lam = np.stack([la, lb, lc], axis=1)
    w_sum = (lam / z_tri).sum(axis=1)

    # dL/dlambda_j and the per-pixel screen-space gradient accumulator G.
    dldlam = (s_prime - s_bar[:, None]) / (z_tri * w_sum[:, None])
    inv_den = 1.0 / den
    g_ax = (vb - vc) * inv_den
    g_ay = (uc - ub) * inv_den
    g_bx = (vc - va) * inv_den
    g_by = (ua - uc) * inv_den
    g_cx = (va - vb) * inv_den
    g_cy = (ub - ua) * inv_den
    big_gx = dldlam[:, 0] * g_ax + dldlam[:, 1] * g_bx + dldlam[:, 2] * g_cx
    big_gy = dldlam[:, 0] * g_ay + dldlam[:, 1] * g_by + dldlam[:, 2] * g_cy

    # Screen-position gradients per winning vertex: dL/dq_j = -lambda_j * G.
    dldu = -lam * big_gx[:, None]
    dldv = -lam * big_gy[:, None]

    # Camera-depth gradients per winning vertex: direct depth-attribute term
    # plus the perspective reweighting term.
    dldz_w = bary * (s_bar[:, None] - s_prime) / z_tri
    if g_d is not None:
        dldz_w = dldz_w + g_d[:, None] * bary

    # Chain through the pinhole projection to camera-frame points.
    x_tri = p_cam[:, 0][tri]
    y_tri = p_cam[:, 1][tri]
    dp_cam = np.empty((covered.size, 3, 3))
    dp_cam[:, :, 0] = dldu * intr.fx / z_tri
    dp_cam[:, :, 1] = dldv * intr.fy / z_tri
    dp_cam[:, :, 2] = (dldz_w
                       - dldu * intr.fx * x_tri / (z_tri * z_tri)
                       - dldv * intr.fy * y_tri / (z_tri * z_tri))

    cot = np.zeros((n_verts, 3))
    np.add.at(cot, tri, dp_cam)

    # World-z gradient: p_cam = R^T (p_world - t), so dp_cam/dZ = R[2, :].
    grads["vertex_z"] += cot @ camera_pose.rotation[2, :]

    if correction is not None:
        # p_cam = R(phi)^T (y - 0) with y = base^-1 p_world - delta_t.
        y_pts = base_pose.apply_inverse(verts3d) - correction.delta_t
        r_phi = correction.as_pose().rotation
        grads["delta_t"] = -(r_phi @ cot.sum(axis=0))
        grads["phi"] = -rotation_vjp(-correction.phi, y_pts, cot)
    return grads


def unproject_depth(depth, mask, camera_pose: SE3Pose,
                    intr: CameraIntrinsics) -> np.ndarray:
    """World-frame point per masked pixel, row-major pixel order."""
    mask = np.asarray(mask, dtype=bool)
    iy, ix = np.nonzero(mask)
    uv = np.column_stack([ix.astype(np.float64), iy.astype(np.float64)])
    d = np.asarray(depth, dtype=np.float64)[iy, ix]
    return unproject(uv, d, camera_pose, intr)
