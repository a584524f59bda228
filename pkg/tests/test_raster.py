import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avatarlight.body import PoseParams, make_capsule, make_icosphere, pose_body
from avatarlight.camera import look_at
from avatarlight.imageio import read_pfm
from avatarlight.raster import (
    build_bvh, closest_hit, closest_hit_batch, dump_uv_image, occluded, occluded_batch, rasterize,
    shadow_epsilon, visibility,
)

from oracles import brute_any_hit, brute_hits_vec

# A minimal mesh stand-in: rasterize only needs vertices, faces, uv and vertex normals.


class _Mesh:
    def __init__(self, vertices, faces, uv=None):
        self.vertices = np.asarray(vertices, float)
        self.faces = np.asarray(faces, np.int64)
        self.uv = np.zeros((len(self.faces), 3, 2)) if uv is None else uv
        fn = np.cross(self.vertices[self.faces[:, 1]] - self.vertices[self.faces[:, 0]],
                      self.vertices[self.faces[:, 2]] - self.vertices[self.faces[:, 0]])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        self.vertex_normals = vn / np.maximum(np.linalg.norm(vn, axis=1, keepdims=True), 1e-30)


def _bumpy_sphere(rng, center, radius):
    s = make_icosphere(2)
    v = s.vertices / np.linalg.norm(s.vertices, axis=1, keepdims=True)
    k = rng.normal(size=3)
    r = radius * (1 + 0.15 * np.sin(3 * v @ k + rng.uniform(0, 6)))
    return v * r[:, None] + center, s.faces


def _random_scene(seed):
    rng = np.random.default_rng(seed)
    verts, faces = [], []
    for _ in range(int(rng.integers(1, 3))):
        v, f = _bumpy_sphere(rng, rng.uniform(-0.4, 0.4, 3), rng.uniform(0.3, 0.6))
        faces.append(f + sum(len(x) for x in verts))
        verts.append(v)
    mesh = _Mesh(np.concatenate(verts), np.concatenate(faces))
    eye = rng.normal(size=3)
    eye *= rng.uniform(2.2, 3.5) / np.linalg.norm(eye)
    cam = look_at(eye, rng.uniform(-0.1, 0.1, 3), 128, 128, rng.uniform(100, 180))
    return mesh, cam


def _oracle_image(mesh, cam):
    H, W = cam.height, cam.width
    rows, cols = np.mgrid[0:H, 0:W]
    d_cam = np.stack([(cols.ravel() + 0.5 - cam.cx) / cam.fx, (rows.ravel() + 0.5 - cam.cy) / cam.fy,
                      np.ones(H * W)], axis=1)
    # unnormalised direction with unit camera-z, so ray t equals depth
    d = d_cam @ cam.rotation
    o = np.broadcast_to(-cam.rotation.T @ cam.translation, d.shape)
    t, f = brute_hits_vec(o, d, mesh.vertices, mesh.faces, tmin=0.0, front_only=True)
    return t.reshape(H, W), f.reshape(H, W)


def _band(face, depth):
    cover = face >= 0
    band = np.zeros_like(cover)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            c = np.roll(np.roll(cover, dy, 0), dx, 1)
            z = np.roll(np.roll(depth, dy, 0), dx, 1)
            band |= c != cover
            band |= cover & c & (np.abs(z - depth) > 0.05)
    band[[0, -1], :] = True
    band[:, [0, -1]] = True
    return band


def test_single_triangle_full_cover():
    cam = look_at([0, 0, 0], [0, 0, -1], 16, 16, 8.0)
    # large front-facing triangle 1 m ahead covering the whole frustum
    tri = _Mesh([[-50, -50, -1.0], [50, -50, -1.0], [0, 100, -1.0]], [[0, 1, 2]])
    if not rasterize(tri, cam).mask.all():
        tri = _Mesh(tri.vertices, [[0, 2, 1]])
    img = rasterize(tri, cam)
    assert img.mask.all()
    assert np.all(img.face_id == 0)
    assert np.allclose(img.depth, 1.0)


def test_mesh_behind_camera_is_empty():
    cam = look_at([0, 0, 3], [0, 0, 0], 32, 32, 30.0)
    s = make_icosphere(1)
    mesh = _Mesh(s.vertices + np.array([0, 0, 6.0]), s.faces)
    img = rasterize(mesh, cam)
    assert not img.mask.any()
    assert np.all(img.face_id == -1)


@pytest.mark.parametrize("seed", range(20))
def test_rasterize_matches_ray_casting(seed):
    mesh, cam = _random_scene(seed)
    img = rasterize(mesh, cam)
    t, f = _oracle_image(mesh, cam)
    keep = ~_band(f, np.where(f >= 0, t, 0.0))
    both = (f >= 0) & (img.face_id >= 0)
    dz = np.abs(np.where(both, img.depth, 0.0) - np.where(both, t, 0.0))
    agree = (img.face_id == f) & (dz <= 1e-6)
    rate = agree[keep].mean()
    assert keep.sum() > 1000
    assert rate >= 0.999, rate


def test_uv_image_invariants():
    body = make_capsule()
    mesh = pose_body(body, PoseParams(np.array([[0, 0.4, 0], [0.5, 0, 0]]), np.zeros(3)))
    cam = look_at([0.4, 0.3, 1.8], [0, 0, 0], 96, 96, 150.0)
    img = rasterize(mesh, cam)
    m = img.mask
    assert m.sum() > 500
    assert np.all(img.face_id[~m] == -1)
    assert np.all(img.depth[m] > 0)
    assert np.allclose(np.linalg.norm(img.normal[m], axis=1), 1.0, atol=1e-4)
    b = img.barycentrics[m]
    assert b.min() >= -1e-6
    assert np.allclose(b.sum(1), 1.0, atol=1e-6)
    uv = np.einsum("nk,nka->na", b, mesh.uv[img.face_id[m]])
    assert np.allclose(img.uv[m], uv)
    pos = np.einsum("nk,nka->na", b, mesh.vertices[mesh.faces[img.face_id[m]]])
    assert np.allclose(img.position[m], pos)


def test_perspective_correct_barycentrics():
    # the interpolated surface point must lie on the camera ray through the pixel centre
    body = make_capsule()
    mesh = pose_body(body, PoseParams.identity(2))
    cam = look_at([1.0, 0.2, 0.9], [0, 0, 0], 64, 64, 90.0)
    img = rasterize(mesh, cam)
    rows, cols = np.nonzero(img.mask)
    o, d = cam.pixel_rays(np.stack([cols, rows], 1))
    p = img.position[rows, cols] - o
    perp = p - np.einsum("ij,ij->i", p, d)[:, None] * d
    assert np.max(np.linalg.norm(perp, axis=1)) < 1e-9


def test_bvh_single_triangle_is_one_leaf():
    bvh = build_bvh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    assert bvh.n_nodes == 1
    assert bvh.count[0] == 1 and bvh.left[0] == -1


def test_bvh_structure():
    s = make_icosphere(3)
    bvh = build_bvh(s.vertices, s.faces)
    leaves = bvh.left == -1
    assert np.all(bvh.count[leaves] <= 4)
    assert sorted(bvh.prims.tolist()) == list(range(len(s.faces)))
    covered = np.concatenate([bvh.prims[bvh.start[n]:bvh.start[n] + bvh.count[n]] for n in np.flatnonzero(leaves)])
    assert sorted(covered.tolist()) == list(range(len(s.faces)))
    for n in np.flatnonzero(~leaves):
        for c in (bvh.left[n], bvh.right[n]):
            assert np.all(bvh.lo[n] <= bvh.lo[c]) and np.all(bvh.hi[c] <= bvh.hi[n])
    for n in np.flatnonzero(leaves):
        tri = s.vertices[s.faces[bvh.prims[bvh.start[n]:bvh.start[n] + bvh.count[n]]]].reshape(-1, 3)
        assert np.all(tri >= bvh.lo[n]) and np.all(tri <= bvh.hi[n])


def test_closest_hit_plane_and_parallel():
    V = np.array([[-1, -1, 0], [1, -1, 0], [1, 1, 0], [-1, 1, 0.0]])
    F = np.array([[0, 1, 2], [0, 2, 3]])
    bvh = build_bvh(V, F)
    hit = closest_hit(bvh, [0.2, 0.3, 2.0], [0, 0, -1.0])
    assert hit is not None and hit[0] == pytest.approx(2.0, abs=1e-12)
    assert closest_hit(bvh, [0.2, 0.3, 2.0], [1.0, 0, 0]) is None
    assert closest_hit(bvh, [0.2, 0.3, 0.0], [0, 1.0, 0]) is None


def test_closest_hit_tie_prefers_lower_face():
    V = np.array([[-1, -1, 0], [1, -1, 0], [0, 1, 0.0]])
    F = np.array([[0, 1, 2], [0, 1, 2], [0, 1, 2]])
    bvh = build_bvh(V, F)
    t, f, _ = closest_hit(bvh, [0, 0, 1.0], [0, 0, -1.0])
    assert f == 0 and t == pytest.approx(1.0)


def _thousand_triangles():
    body = make_capsule(20, 23)
    assert 900 <= len(body.faces) <= 1100
    return pose_body(body, PoseParams(np.array([[0, 0, 0], [1.1, 0, 0]]), np.zeros(3)))


def test_closest_hit_matches_brute_force():
    mesh = _thousand_triangles()
    rng = np.random.default_rng(0)
    n = 10_000
    o = rng.normal(size=(n, 3)) * 0.8
    aim, _ = _surface_samples(mesh, n, rng)
    d = aim + rng.normal(size=(n, 3)) * 0.1 - o
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    bvh = build_bvh(mesh.vertices, mesh.faces)
    t, f, bary = closest_hit_batch(bvh, o, d)
    tb, fb = brute_hits_vec(o, d, mesh.vertices, mesh.faces)
    scale = bvh.diagonal
    assert np.array_equal(f >= 0, fb >= 0)
    hit = fb >= 0
    assert hit.sum() > 3000
    assert np.max(np.abs(t[hit] - tb[hit])) <= 1e-6 * scale
    assert np.array_equal(f, fb)
    p = np.einsum("nk,nka->na", bary[hit], mesh.vertices[mesh.faces[f[hit]]])
    assert np.allclose(p, o[hit] + t[hit, None] * d[hit], atol=1e-9)


def test_degenerate_triangle_ignored_and_reported(caplog):
    V = np.array([[-1, -1, 0], [1, -1, 0], [0, 1, 0.0], [0, 0, 0.5], [0, 0, 0.5]])
    F = np.array([[0, 3, 4], [0, 1, 2]])
    with caplog.at_level(logging.WARNING):
        bvh = build_bvh(V, F)
    assert bvh.degenerate == (0,)
    assert "degenerate" in caplog.text
    t, f, _ = closest_hit(bvh, [0, 0, 1.0], [0, 0, -1.0])
    assert f == 1 and t == pytest.approx(1.0)


def _surface_samples(mesh, n, rng):
    f = rng.integers(len(mesh.faces), size=n)
    b = rng.dirichlet(np.ones(3), size=n)
    tri = mesh.vertices[mesh.faces[f]]
    p = np.einsum("nk,nka->na", b, tri)
    nrm = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    return p, nrm / np.linalg.norm(nrm, axis=1, keepdims=True)


def test_occluded_matches_brute_force():
    mesh = _thousand_triangles()
    bvh = build_bvh(mesh.vertices, mesh.faces)
    rng = np.random.default_rng(1)
    p, n = _surface_samples(mesh, 1000, rng)
    d = rng.normal(size=(1000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = p + shadow_epsilon(bvh) * n
    got = occluded_batch(bvh, o, d)
    want = brute_hits_vec(o, d, mesh.vertices, mesh.faces, tmin=0.0)[1] >= 0
    assert all(want[i] == brute_any_hit(o[i], d[i], mesh.vertices, mesh.faces) for i in range(50))
    assert got.any() and not got.all()
    assert np.array_equal(got, want)


def test_occluded_convex_and_plate():
    s = make_icosphere(2)
    bvh = build_bvh(s.vertices, s.faces)
    rng = np.random.default_rng(2)
    p, n = _surface_samples(s, 200, rng)
    assert not occluded_batch(bvh, p + 1e-6 * n, n).any()
    plate = build_bvh(np.array([[-1, -1, 1], [1, -1, 1], [0, 1, 1.0]]), np.array([[0, 1, 2]]))
    assert occluded(plate, [0, 0, 0], [0, 0, 1.0])
    assert not occluded(plate, [0, 0, 0], [0, 0, 1.0], t_max=0.5)


def test_visibility_convex_normal_and_backface():
    s = make_icosphere(2)
    bvh = build_bvh(s.vertices, s.faces)
    p, n = _surface_samples(s, 100, np.random.default_rng(3))
    for i in range(100):
        v = visibility(p[i], n[i], np.stack([n[i], -n[i]]), bvh)
        assert v.tolist() == [[1.0, 0.0]]


def _brute_visibility(points, normals, dirs, mesh, eps):
    out = np.zeros((len(points), len(dirs)))
    for i, (x, nrm) in enumerate(zip(points, normals)):
        o = np.broadcast_to(x + eps * nrm, dirs.shape)
        blocked = brute_hits_vec(o, dirs, mesh.vertices, mesh.faces, tmin=0.0)[1] >= 0
        out[i] = (dirs @ nrm > 0) & ~blocked
    return out


def test_visibility_in_crease_matches_brute_force():
    from avatarlight.pbr import fibonacci_directions

    body = make_capsule(12, 10)
    mesh = pose_body(body, PoseParams(np.array([[0, 0, 0], [1.4, 0, 0]]), np.zeros(3)))
    bvh = build_bvh(mesh.vertices, mesh.faces)
    # points near the bent joint, where the two halves shadow each other
    near = np.argsort(np.linalg.norm(mesh.vertices - body.joint_positions[1], axis=1))[:12]
    pts = mesh.vertices[near]
    nrm = mesh.vertex_normals[near]
    dirs = fibonacci_directions(128)
    eps = shadow_epsilon(bvh)
    got = visibility(pts, nrm, dirs, bvh)
    want = _brute_visibility(pts, nrm, dirs, mesh, eps)
    assert np.array_equal(got, want)
    front = (dirs @ nrm.T).T > 0
    assert (want[front] == 0).any()


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_visibility_monotone_under_triangle_removal(seed):
    rng = np.random.default_rng(seed)
    v1, f1 = _bumpy_sphere(rng, np.array([0, 0, 0.0]), 0.5)
    v2, f2 = _bumpy_sphere(rng, np.array([0.9, 0.3, 0.0]), 0.4)
    V = np.concatenate([v1, v2])
    F = np.concatenate([f1, f2 + len(v1)])
    bvh = build_bvh(V, F)
    p, n = _surface_samples(_Mesh(V, f1), 30, rng)
    from avatarlight.pbr import fibonacci_directions

    dirs = fibonacci_directions(64)
    eps = 1e-4
    before = visibility(p, n, dirs, bvh, eps)
    keep = rng.random(len(F)) > 0.3
    after = visibility(p, n, dirs, build_bvh(V, F[keep]), eps)
    assert np.all(after >= before)


def test_dump_uv_image_pfm(tmp_path):
    mesh = pose_body(make_capsule(), PoseParams.identity(2))
    cam = look_at([0, 0.2, 1.5], [0, 0, 0], 40, 32, 60.0)
    img = rasterize(mesh, cam)
    paths = dump_uv_image(img, tmp_path)
    uv = read_pfm(paths["uv"])
    depth = read_pfm(paths["depth"])
    normal = read_pfm(paths["normal"])
    assert uv.shape == (32, 40, 3)
    assert np.allclose(uv[..., :2], img.uv, atol=1e-6)
    assert np.allclose(np.squeeze(depth)[img.mask], img.depth[img.mask], rtol=1e-6)
    assert np.allclose(normal[img.mask], (img.normal[img.mask] + 1) / 2, atol=1e-6)
    assert np.all((normal >= 0) & (normal <= 1))
