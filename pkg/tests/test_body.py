import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avatarlight.body import (
    BodyFormatError, MeshValidationError, PoseParams, deform, lbs_pose, load_body, make_capsule,
    make_icosphere, make_tetrahedron, mesh_bvh, mesh_edges, pose_body, project_points,
    project_to_surface, save_body, subdivide_midpoint,
)
from avatarlight.fields import ConstantMap, NeuralMap

from oracles import brute_closest


@pytest.fixture(scope="module")
def capsule():
    return make_capsule()


def test_capsule_file_counts(tmp_path, capsule):
    path = tmp_path / "capsule.json"
    save_body(capsule, path)
    data = json.loads(path.read_text())
    # count independently from the raw file
    assert len(data["vertices"]) == 482
    assert len(data["faces"]) == 960
    assert len(data["joints"]["positions"]) == 2
    body = load_body(path)
    assert body.vertices.shape == (482, 3) and body.faces.shape == (960, 3) and body.n_joints == 2


def test_capsule_invariants(capsule):
    assert np.allclose(capsule.skin_weights.sum(1), 1.0, atol=1e-6)
    assert capsule.uv.min() >= 0.0 and capsule.uv.max() <= 1.0
    edges, ef = mesh_edges(capsule.faces)
    assert np.all(ef >= 0)  # closed: every edge has two faces
    assert len(capsule.vertices) - len(edges) + len(capsule.faces) == 2
    assert np.allclose(np.linalg.norm(capsule.vertex_normals, axis=1), 1.0, atol=1e-12)


def test_vertex_normals_area_weighted():
    body = make_tetrahedron()
    v, f = body.vertices, body.faces
    n = np.zeros((4, 3))
    for tri in f:
        a, b, c = v[tri]
        for k in tri:
            n[k] += np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    assert np.allclose(body.vertex_normals, n)


def test_skin_row_not_summing_to_one(tmp_path, capsule):
    data = capsule.to_dict()
    data["skin_weights"][5] = [0.45, 0.45]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(MeshValidationError, match="skin_weights\\[5\\]"):
        load_body(path)


def test_schema_violation_names_field(tmp_path, capsule):
    data = capsule.to_dict()
    data["faces"][3] = [0, 1]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    with pytest.raises(BodyFormatError, match=r"faces\[3\]"):
        load_body(path)


def test_non_manifold_edge_is_named(tmp_path):
    data = make_tetrahedron().to_dict()
    data["faces"].append([0, 1, 2])
    data["uv"].append(data["uv"][0])
    path = tmp_path / "nm.json"
    path.write_text(json.dumps(data))
    with pytest.raises(MeshValidationError, match=r"edge \("):
        load_body(path)


def test_tetrahedron_loads(tmp_path):
    path = tmp_path / "tet.json"
    save_body(make_tetrahedron(), path)
    body = load_body(path)
    assert len(body.vertices) == 4 and len(body.faces) == 4


def test_identity_pose_exact(capsule):
    posed = lbs_pose(capsule, PoseParams.identity(2))
    assert np.array_equal(posed, capsule.vertices)


def test_pose_length_mismatch(capsule):
    with pytest.raises(ValueError):
        lbs_pose(capsule, PoseParams.identity(3))
    with pytest.raises(ValueError):
        PoseParams.from_vector(np.zeros(8), 2)
    assert PoseParams.from_vector(np.zeros(9), 2).as_vector().shape == (9,)


def _two_joint_body(vertices, weights):
    # tetrahedron connectivity, custom vertex positions / weights
    t = make_tetrahedron()
    from avatarlight.body import BodyModel
    return BodyModel(vertices, t.faces, t.uv, [[0.0, 0, 0], [0.0, 2.0, 0]], [-1, 0], weights)


def test_rigid_rotation_about_z():
    verts = np.array([[1.0, 0, 0], [0, 0, 1], [0, -1, 0], [-1, 0, -1]])
    body = _two_joint_body(verts, np.tile([1.0, 0.0], (4, 1)))
    pose = PoseParams(np.array([[0, 0, np.pi / 2], [0, 0, 0]]), np.zeros(3))
    assert np.allclose(lbs_pose(body, pose)[0], [0.0, 1.0, 0.0], atol=1e-12)


def test_two_joint_blend_matches_matrices():
    verts = np.array([[1.0, 0.5, 0], [0, 1, 1], [0, -1, 0.3], [-1, 0, -1]])
    w = np.array([[0.5, 0.5], [0.2, 0.8], [1.0, 0.0], [0.0, 1.0]])
    body = _two_joint_body(verts, w)
    aa0, aa1, tr = np.array([0.1, -0.4, 0.3]), np.array([0.7, 0.2, -0.1]), np.array([0.3, -0.2, 0.5])

    def rot(aa):
        th = np.linalg.norm(aa)
        k = aa / th
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return np.eye(3) + np.sin(th) * K + (1 - np.cos(th)) * K @ K

    def hom(R, t):
        M = np.eye(4)
        M[:3, :3], M[:3, 3] = R, t
        return M

    j0, j1 = np.array([0.0, 0, 0]), np.array([0.0, 2.0, 0])
    G0 = hom(rot(aa0), j0 + tr)
    G1 = G0 @ hom(rot(aa1), j1 - j0)
    A0 = G0 @ hom(np.eye(3), -j0)
    A1 = G1 @ hom(np.eye(3), -j1)
    expected = [((w[i, 0] * A0 + w[i, 1] * A1) @ np.append(verts[i], 1.0))[:3] for i in range(4)]
    pose = PoseParams(np.stack([aa0, aa1]), tr)
    assert np.allclose(lbs_pose(body, pose), expected, atol=1e-12)


def test_deform_zero_geo_equals_lbs(capsule):
    pose = PoseParams(np.array([[0.1, 0.4, 0.0], [0.0, 0.0, 0.3]]), np.array([0.1, 0, 0]))
    m = deform(capsule, pose, ConstantMap(0.0))
    assert np.array_equal(m.vertices, lbs_pose(capsule, pose))
    geo = NeuralMap("geo", 6, seed=4)  # zero-initialised head
    assert np.array_equal(deform(capsule, pose, geo).vertices, lbs_pose(capsule, pose))


def test_deform_uniform_offset_on_sphere():
    sphere = make_icosphere(3)
    m = deform(sphere, PoseParams.identity(1), ConstantMap(0.01))
    # the radius grows by exactly the offset only if the vertex normal is radial
    assert np.allclose(np.linalg.norm(m.vertices, axis=1), 1.01, atol=1e-6)
    assert np.allclose(np.linalg.norm(m.vertex_normals, axis=1), 1.0, atol=1e-5)


def test_deform_clamps_offsets(capsule):
    m = deform(capsule, PoseParams.identity(2), ConstantMap(0.5), offset_cap=0.1)
    assert np.all(np.abs(m.offsets) <= 0.1)


def test_deform_matches_independent_recomputation(capsule):
    rng = np.random.default_rng(3)
    geo = NeuralMap("geo", 6, zero_head=False, seed=11)
    geo.params += rng.normal(scale=0.05, size=geo.n_params) * geo.group_mask("dense")
    pose = PoseParams(rng.normal(scale=0.3, size=(2, 3)), rng.normal(scale=0.1, size=3))
    m = deform(capsule, pose, geo)
    posed = lbs_pose(capsule, pose)
    # posed normals recomputed by hand (area weighted)
    n = np.zeros_like(posed)
    for tri in capsule.faces:
        a, b, c = posed[tri]
        n[tri] += np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    for i in rng.choice(len(posed), 25, replace=False):
        l = geo.query(capsule.vertex_uv[i], pose)
        assert np.allclose(m.vertices[i], posed[i] + l * n[i], atol=1e-12)


def test_deform_gradient_fd(capsule):
    """d(sum w . V)/d(geo params) through the offsets, vs central differences."""
    rng = np.random.default_rng(0)
    geo = NeuralMap("geo", 6, width=16, zero_head=False, seed=5)
    pose = PoseParams(rng.normal(scale=0.2, size=(2, 3)), np.zeros(3))
    W = rng.normal(size=(len(capsule.vertices), 3))

    def loss():
        return float(np.sum(deform(capsule, pose, geo).vertices * W))

    m = deform(capsule, pose, geo)
    from avatarlight.body import deform_backward
    geo.zero_grad()
    geo.backward(deform_backward(m, W))
    g = geo.grads.copy()
    idx = np.flatnonzero(np.abs(g) > 1e-8)
    for i in rng.choice(idx, 20, replace=False):
        old = geo.params[i]
        h = 1e-3 * max(1e-3, abs(old))
        geo.params[i] = old + h
        fp = loss()
        geo.params[i] = old - h
        fm = loss()
        geo.params[i] = old
        fd = (fp - fm) / (2 * h)
        assert abs(fd - g[i]) <= 1e-3 * max(abs(fd), abs(g[i])) + 1e-9


def test_project_axis_aligned_offset():
    body = make_tetrahedron()
    f = 0
    tri = body.vertices[body.faces[f]]
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    n /= np.linalg.norm(n)
    centroid = tri.mean(0)
    mesh = pose_body(body, PoseParams.identity(1))
    proj = project_to_surface(centroid + 0.1 * n, mesh, mesh_bvh(mesh))
    assert proj.face_id == f
    assert proj.h == pytest.approx(0.1, abs=1e-12)
    assert np.allclose(proj.uv, body.uv[f].mean(0), atol=1e-12)
    assert np.allclose(proj.barycentrics, 1 / 3, atol=1e-12)


def test_project_point_on_vertex(capsule):
    mesh = pose_body(capsule, PoseParams.identity(2))
    proj = project_to_surface(mesh.vertices[37], mesh, mesh_bvh(mesh))
    assert abs(proj.h) < 1e-12


def test_project_matches_exhaustive_search(capsule):
    rng = np.random.default_rng(1)
    pose = PoseParams(np.array([[0, 0.3, 0], [0.4, 0, 0.2]]), np.zeros(3))
    mesh = pose_body(capsule, pose)
    pts = mesh.vertices[rng.integers(len(mesh.vertices), size=1000)] + rng.normal(scale=0.08, size=(1000, 3))
    fid, bary, uv, h, _ = project_points(pts, mesh, mesh_bvh(mesh))
    assert np.all(bary >= 0) and np.allclose(bary.sum(1), 1.0, atol=1e-6)
    face_mismatch = 0
    for k, p in enumerate(pts):
        d, f, _, _ = brute_closest(p, mesh.vertices, mesh.faces)
        assert abs(abs(h[k]) - d) <= 1e-9
        if fid[k] != f:
            # only acceptable as a tie
            d_ours = brute_closest(p, mesh.vertices, mesh.faces[[fid[k]]])[0]
            assert abs(d_ours - d) <= 1e-9
            face_mismatch += 1
    assert face_mismatch < 50


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 959), st.floats(0.05, 0.3), st.floats(0.001, 0.02))
def test_sign_flips_under_reflection(face, bary_seed, dist):
    body = make_capsule()
    mesh = pose_body(body, PoseParams.identity(2))
    bvh = mesh_bvh(mesh)
    tri = mesh.vertices[mesh.faces[face]]
    b = np.array([bary_seed, 0.5 - bary_seed / 2, 0.5 - bary_seed / 2])
    p0 = b @ tri
    n = mesh.face_normals[face]
    out = project_to_surface(p0 + dist * n, mesh, bvh)
    inside = project_to_surface(p0 - dist * n, mesh, bvh)
    assert out.h > 0 > inside.h


def test_subdivide_tetrahedron():
    sub = subdivide_midpoint(make_tetrahedron())
    assert (len(sub.vertices), len(sub.faces)) == (10, 16)


def test_subdivide_smpl_topology_counts():
    # a closed genus-0 mesh with 6890 vertices has 13776 faces, like the common body template
    body = make_capsule(n_segments=84, n_rings=82)
    assert (len(body.vertices), len(body.faces)) == (6890, 13776)
    sub = subdivide_midpoint(body)
    assert (len(sub.vertices), len(sub.faces)) == (27554, 55104)


def test_subdivide_preserves_euler_and_manifold(capsule):
    sub = subdivide_midpoint(capsule)
    edges, ef = mesh_edges(sub.faces)
    assert np.all(ef >= 0)
    assert len(sub.vertices) - len(edges) + len(sub.faces) == 2
    assert np.allclose(sub.skin_weights.sum(1), 1.0, atol=1e-12)


def test_subdivide_rejects_open_mesh():
    from types import SimpleNamespace
    t = make_tetrahedron()
    open_mesh = SimpleNamespace(vertices=t.vertices, faces=t.faces[:3], uv=t.uv[:3], skin_weights=t.skin_weights,
                                joint_positions=t.joint_positions, joint_parents=t.joint_parents)
    with pytest.raises(MeshValidationError):
        subdivide_midpoint(open_mesh)
