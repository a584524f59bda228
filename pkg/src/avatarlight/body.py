"""Skinned body model: BM1 file IO, linear blend skinning, normal offsets,
closest-surface projection and midpoint subdivision."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from . import kernels
from .raster import SpatialIndex, build_bvh

logger = logging.getLogger(__name__)

DEFAULT_OFFSET_CAP = 0.10


class BodyFormatError(ValueError):
    """A BM1 file does not follow the schema."""


class MeshValidationError(ValueError):
    """Mesh topology or skinning data violate a BodyModel invariant."""


BM1_SCHEMA = {
    "type": "object",
    "required": ["vertices", "faces", "uv", "joints", "skin_weights"],
    "properties": {
        "vertices": {"type": "array", "minItems": 3,
                     "items": {"type": "array", "items": {"type": "number"},
                               "minItems": 3, "maxItems": 3}},
        "faces": {"type": "array", "minItems": 1,
                  "items": {"type": "array", "items": {"type": "integer", "minimum": 0},
                            "minItems": 3, "maxItems": 3}},
        "uv": {"type": "array",
               "items": {"type": "array", "minItems": 3, "maxItems": 3,
                         "items": {"type": "array", "items": {"type": "number"},
                                   "minItems": 2, "maxItems": 2}}},
        "joints": {"type": "object", "required": ["positions", "parents"],
                   "properties": {
                       "positions": {"type": "array", "minItems": 1,
                                     "items": {"type": "array", "items": {"type": "number"},
                                               "minItems": 3, "maxItems": 3}},
                       "parents": {"type": "array", "items": {"type": "integer"}}}},
        "skin_weights": {"type": "array",
                         "items": {"type": "array", "items": {"type": "number"}}},
    },
}


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


def face_normals(vertices: np.ndarray, faces: np.ndarray, unit: bool = True) -> np.ndarray:
    v0, v1, v2 = (vertices[faces[:, k]] for k in range(3))
    n = np.cross(v1 - v0, v2 - v0)
    if unit:
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(norm > 0, norm, 1.0)
    return n


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    fn = face_normals(vertices, faces, unit=False)
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    norm = np.linalg.norm(vn, axis=1, keepdims=True)
    return vn / np.where(norm > 0, norm, 1.0)


def mesh_edges(faces: np.ndarray):
    """Unique undirected edges and, for each, the faces sharing it.

    Returns ``(edges (E, 2), edge_faces (E, 2))``; ``edge_faces`` holds -1 where
    an edge has a single face. Raises MeshValidationError when an edge has more
    than two faces.
    """
    f = np.asarray(faces)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    owner = np.tile(np.arange(len(f)), 3)
    und = np.sort(directed, axis=1)
    n = int(f.max()) + 1 if f.size else 1
    keys, inverse, counts = np.unique(und[:, 0] * n + und[:, 1], return_inverse=True, return_counts=True)
    edges = np.stack([keys // n, keys % n], axis=1)
    if np.any(counts > 2):
        e = edges[np.argmax(counts > 2)]
        raise MeshValidationError(f"non-manifold edge ({e[0]}, {e[1]}) shared by more than two faces")
    order = np.argsort(inverse, kind="stable")
    edge_faces = np.full((len(edges), 2), -1, dtype=np.int64)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    edge_faces[:, 0] = owner[order[starts]]
    two = counts == 2
    edge_faces[two, 1] = owner[order[starts[two] + 1]]
    return edges, edge_faces


def check_closed_manifold(faces: np.ndarray) -> None:
    edges, edge_faces = mesh_edges(faces)
    open_ = edge_faces[:, 1] < 0
    if np.any(open_):
        e = edges[np.argmax(open_)]
        raise MeshValidationError(f"boundary edge ({e[0]}, {e[1]}) belongs to a single face")
    f = np.asarray(faces)
    directed = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    n = int(f.max()) + 1
    keys, counts = np.unique(directed[:, 0] * n + directed[:, 1], return_counts=True)
    if np.any(counts > 1):
        k = keys[np.argmax(counts > 1)]
        d = (k // n, k % n)
        raise MeshValidationError(f"inconsistent winding on edge ({d[0]}, {d[1]})")


@dataclass(frozen=True)
class BodyModel:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray  # per face corner, (F, 3, 2)
    joint_positions: np.ndarray
    joint_parents: np.ndarray
    skin_weights: np.ndarray
    vertex_normals: np.ndarray = field(default=None)
    vertex_uv: np.ndarray = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _frozen(self.vertices, np.float64))
        object.__setattr__(self, "faces", _frozen(self.faces, np.int64))
        object.__setattr__(self, "uv", _frozen(self.uv, np.float64))
        object.__setattr__(self, "joint_positions", _frozen(self.joint_positions, np.float64))
        object.__setattr__(self, "joint_parents", _frozen(self.joint_parents, np.int64))
        object.__setattr__(self, "skin_weights", _frozen(self.skin_weights, np.float64))
        self.validate()
        object.__setattr__(self, "vertex_normals",
                           _frozen(vertex_normals(self.vertices, self.faces), np.float64))
        object.__setattr__(self, "vertex_uv", _frozen(corner_to_vertex_uv(self), np.float64))

    @property
    def n_joints(self) -> int:
        return len(self.joint_positions)

    @property
    def face_normals(self) -> np.ndarray:
        return face_normals(self.vertices, self.faces)

    def validate(self) -> None:
        V, F = len(self.vertices), len(self.faces)
        J = len(self.joint_positions)
        if self.vertices.shape != (V, 3) or self.faces.shape != (F, 3):
            raise MeshValidationError("vertices must be (V, 3) and faces (F, 3)")
        if self.faces.min() < 0 or self.faces.max() >= V:
            bad = int(np.argmax((self.faces < 0).any(1) | (self.faces >= V).any(1)))
            raise MeshValidationError(f"faces[{bad}] references a missing vertex")
        if self.uv.shape != (F, 3, 2):
            raise MeshValidationError(f"uv must have one [u, v] per face corner, got shape {self.uv.shape}")
        if np.any(self.uv < 0.0) or np.any(self.uv > 1.0):
            bad = int(np.argmax(((self.uv < 0) | (self.uv > 1)).any((1, 2))))
            raise MeshValidationError(f"uv[{bad}] lies outside [0, 1]^2")
        if self.joint_parents.shape != (J,):
            raise MeshValidationError("joints.parents must list one parent per joint")
        for j, p in enumerate(self.joint_parents):
            if not (p == -1 and j == 0) and not (0 <= p < j):
                raise MeshValidationError(f"joints.parents[{j}] = {p}: parents must precede children and only joint 0 is the root")
        if self.skin_weights.shape != (V, J):
            raise MeshValidationError(f"skin_weights must be ({V}, {J}), got {self.skin_weights.shape}")
        sums = self.skin_weights.sum(axis=1)
        bad = np.abs(sums - 1.0) > 1e-6
        if np.any(bad):
            i = int(np.argmax(bad))
            raise MeshValidationError(f"skin_weights[{i}] sums to {sums[i]:.9g}, expected 1")
        check_closed_manifold(self.faces)

    def to_dict(self) -> dict:
        return {
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "uv": self.uv.tolist(),
            "joints": {"positions": self.joint_positions.tolist(),
                       "parents": self.joint_parents.tolist()},
            "skin_weights": self.skin_weights.tolist(),
        }


def corner_to_vertex_uv(body) -> np.ndarray:
    """Canonical per-vertex uv: the first corner (lowest face, corner order) using the vertex."""
    flat_v = body.faces.ravel()
    flat_uv = body.uv.reshape(-1, 2)
    _, first = np.unique(flat_v, return_index=True)
    out = np.zeros((len(body.vertices), 2))
    out[flat_v[first]] = flat_uv[first]
    return out


def load_body(path) -> BodyModel:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BodyFormatError(f"{path}: invalid JSON: {exc}") from exc
    return body_from_dict(data, source=str(path))


def body_from_dict(data: dict, source: str = "<dict>") -> BodyModel:
    try:
        jsonschema.validate(data, BM1_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise BodyFormatError(f"{source}: {exc.json_path}: {exc.message}") from exc
    return BodyModel(
        vertices=data["vertices"], faces=data["faces"], uv=data["uv"],
        joint_positions=data["joints"]["positions"], joint_parents=data["joints"]["parents"],
        skin_weights=data["skin_weights"],
    )


def save_body(body: BodyModel, path) -> None:
    Path(path).write_text(json.dumps(body.to_dict()), encoding="utf-8")


@dataclass(frozen=True)
class PoseParams:
    theta: np.ndarray  # (J, 3) axis-angle, radians
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen(np.reshape(self.theta, (-1, 3)), np.float64))
        object.__setattr__(self, "translation", _frozen(np.reshape(self.translation, 3), np.float64))

    @classmethod
    def identity(cls, n_joints: int) -> "PoseParams":
        return cls(np.zeros((n_joints, 3)), np.zeros(3))

    @classmethod
    def from_vector(cls, vec, n_joints: int) -> "PoseParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (3 * n_joints + 3,):
            raise ValueError(f"pose vector has length {vec.size}, expected {3 * n_joints + 3}")
        return cls(vec[:3 * n_joints].reshape(n_joints, 3), vec[3 * n_joints:])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.theta.ravel(), self.translation])

    @property
    def features(self) -> np.ndarray:
        """Pose conditioning input for the neural maps (joint rotations only)."""
        return self.theta.ravel()

    def is_identity(self) -> bool:
        return not np.any(self.theta) and not np.any(self.translation)


def rodrigues(aa: np.ndarray) -> np.ndarray:
    aa = np.asarray(aa, dtype=np.float64)
    angle = np.linalg.norm(aa)
    if angle == 0.0:
        return np.eye(3)
    k = aa / angle
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


def joint_transforms(body: BodyModel, pose: PoseParams) -> np.ndarray:
    """Skinning matrices A_j (J, 4, 4) mapping rest space to posed space."""
    J = body.n_joints
    if pose.theta.shape != (J, 3):
        raise ValueError(f"pose has {len(pose.theta)} joints, body has {J}")
    G = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = rodrigues(pose.theta[j])
        p = body.joint_parents[j]
        if p < 0:
            local[:3, 3] = body.joint_positions[j] + pose.translation
            G[j] = local
        else:
            local[:3, 3] = body.joint_positions[j] - body.joint_positions[p]
            G[j] = G[p] @ local
    A = G.copy()
    A[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], body.joint_positions)
    return A


def lbs_pose(body: BodyModel, pose: PoseParams) -> np.ndarray:
    if pose.theta.shape != (body.n_joints, 3):
        raise ValueError(f"pose has {len(pose.theta)} joints, body has {body.n_joints}")
    if pose.is_identity():
        return body.vertices.copy()
    A = joint_transforms(body, pose)
    T = np.einsum("vj,jab->vab", body.skin_weights, A)
    return np.einsum("vab,vb->va", T[:, :3, :3], body.vertices) + T[:, :3, 3]


@dataclass(frozen=True)
class DeformedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    uv: np.ndarray
    offsets: np.ndarray  # signed offset l per vertex
    base_vertices: np.ndarray  # LBS result before offsetting
    base_normals: np.ndarray  # offset directions
    vertex_normals: np.ndarray
    face_normals: np.ndarray

    @property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    @property
    def bbox_diagonal(self) -> float:
        lo, hi = self.bbox
        return float(np.linalg.norm(hi - lo))


def _make_mesh(verts, faces, uv, offsets, base, base_n) -> DeformedMesh:
    return DeformedMesh(verts, faces, uv, offsets, base, base_n,
                        vertex_normals(verts, faces), face_normals(verts, faces))


def pose_body(body: BodyModel, pose: PoseParams) -> DeformedMesh:
    """Posed base mesh (LBS only, zero offsets)."""
    posed = lbs_pose(body, pose)
    vn = vertex_normals(posed, body.faces)
    return _make_mesh(posed, body.faces, body.uv, np.zeros(len(posed)), posed, vn)


def deform(body: BodyModel, pose: PoseParams, geo, offset_cap: float = DEFAULT_OFFSET_CAP,
           base: DeformedMesh | None = None) -> DeformedMesh:
    """Pose the body and push every vertex along its posed normal by the map offset.

    ``geo`` is any object with ``query_batch(uv, pose)`` returning one scalar per uv.
    """
    if base is None:
        base = pose_body(body, pose)
    l = np.clip(np.asarray(geo.query_batch(body.vertex_uv, pose), dtype=np.float64).reshape(-1),
                -offset_cap, offset_cap)
    verts = base.vertices + l[:, None] * base.vertex_normals
    return _make_mesh(verts, body.faces, body.uv, l, base.vertices, base.vertex_normals)


def deform_backward(mesh: DeformedMesh, d_vertices: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the per-vertex offsets given its vertex gradient."""
    return np.einsum("va,va->v", d_vertices, mesh.base_normals)


@dataclass(frozen=True)
class SurfaceProjection:
    uv: np.ndarray
    face_id: int
    barycentrics: np.ndarray
    h: float
    point: np.ndarray


def mesh_bvh(mesh) -> SpatialIndex:
    return build_bvh(mesh.vertices, mesh.faces)


def project_points(points: np.ndarray, mesh, bvh: SpatialIndex):
    """Batched closest-surface projection.

    Returns ``(face_id, barycentrics, uv, h, closest)``. ``h`` is signed by the
    winning face's normal (positive outside).
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    fid, bary = kernels.closest_point_batch(points, *bvh.kernel_args())
    tri = mesh.vertices[mesh.faces[fid]]
    closest = np.einsum("nk,nka->na", bary, tri)
    uv = np.einsum("nk,nka->na", bary, mesh.uv[fid])
    diff = points - closest
    dist = np.linalg.norm(diff, axis=1)
    fn = mesh.face_normals[fid]
    sign = np.where(np.einsum("na,na->n", diff, fn) < 0.0, -1.0, 1.0)
    return fid, bary, uv, sign * dist, closest


def project_to_surface(point, mesh, bvh: SpatialIndex) -> SurfaceProjection:
    fid, bary, uv, h, closest = project_points(np.asarray(point, dtype=np.float64)[None], mesh, bvh)
    return SurfaceProjection(uv[0], int(fid[0]), bary[0], float(h[0]), closest[0])


def subdivide_midpoint(body: BodyModel) -> BodyModel:
    """1-to-4 split of every triangle through its edge midpoints."""
    faces = body.faces
    edges, _ = mesh_edges(faces)
    check_closed_manifold(faces)
    V = len(body.vertices)
    # index of the midpoint vertex on each face side (ab, bc, ca)
    side = np.sort(np.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], axis=1), axis=2)
    key = side[..., 0] * V + side[..., 1]
    ekey = edges[:, 0] * V + edges[:, 1]
    ab, bc, ca = (V + np.searchsorted(ekey, key)).T

    verts = np.concatenate([body.vertices, 0.5 * (body.vertices[edges[:, 0]] + body.vertices[edges[:, 1]])])
    weights = np.concatenate([body.skin_weights,
                              0.5 * (body.skin_weights[edges[:, 0]] + body.skin_weights[edges[:, 1]])])
    weights /= weights.sum(axis=1, keepdims=True)
    a, b, c = faces.T
    new_faces = np.stack([np.stack([a, ab, ca], 1), np.stack([ab, b, bc], 1),
                          np.stack([ca, bc, c], 1), np.stack([ab, bc, ca], 1)], 1).reshape(-1, 3)
    ua, ub, uc = body.uv[:, 0], body.uv[:, 1], body.uv[:, 2]
    uab, ubc, uca = 0.5 * (ua + ub), 0.5 * (ub + uc), 0.5 * (uc + ua)
    new_uv = np.stack([np.stack([ua, uab, uca], 1), np.stack([uab, ub, ubc], 1),
                       np.stack([uca, ubc, uc], 1), np.stack([uab, ubc, uca], 1)], 1).reshape(-1, 3, 2)
    return BodyModel(verts, new_faces, new_uv, body.joint_positions, body.joint_parents, weights)


# --- synthetic bodies -------------------------------------------------------------

CAPSULE_RADIUS = 0.15
CAPSULE_HALF_LENGTH = 0.35


def _capsule_profile(v, radius, half_length):
    """Point on the capsule profile at arclength fraction v (0 = bottom pole)."""
    total = np.pi * radius + 2 * half_length
    s = v * total
    cap = 0.5 * np.pi * radius
    if s <= cap:
        a = s / radius
        return radius * np.sin(a), -half_length - radius * np.cos(a)
    if s <= cap + 2 * half_length:
        return radius, -half_length + (s - cap)
    a = (total - s) / radius
    return radius * np.sin(a), half_length + radius * np.cos(a)


def make_capsule(n_segments: int = 24, n_rings: int = 20, radius: float = CAPSULE_RADIUS,
                 half_length: float = CAPSULE_HALF_LENGTH) -> BodyModel:
    """Closed capsule along +y with a cylindrical uv atlas and a two-joint skeleton.

    Ring i (1-based) sits at v = (i - 1/2) / n_rings; the poles are v = 0 and v = 1.
    The seam runs along u = 0 / u = 1. Default counts give 482 vertices, 960 faces.
    """
    S, R = n_segments, n_rings
    verts = [(0.0, -half_length - radius, 0.0)]
    ring_v = [(i - 0.5) / R for i in range(1, R + 1)]
    for v in ring_v:
        rho, y = _capsule_profile(v, radius, half_length)
        for k in range(S):
            phi = 2 * np.pi * k / S
            verts.append((rho * np.cos(phi), y, rho * np.sin(phi)))
    verts.append((0.0, half_length + radius, 0.0))
    verts = np.array(verts)
    top = len(verts) - 1

    def vid(i, k):  # ring i in [0, R), segment k (wraps)
        return 1 + i * S + (k % S)

    faces, uvs = [], []
    for k in range(S):
        u0, u1, uc = k / S, (k + 1) / S, (k + 0.5) / S
        faces.append((0, vid(0, k), vid(0, k + 1)))
        uvs.append(((uc, 0.0), (u0, ring_v[0]), (u1, ring_v[0])))
    for i in range(R - 1):
        va, vb = ring_v[i], ring_v[i + 1]
        for k in range(S):
            u0, u1 = k / S, (k + 1) / S
            a, b, c, d = vid(i, k), vid(i, k + 1), vid(i + 1, k + 1), vid(i + 1, k)
            faces.append((a, c, b))
            uvs.append(((u0, va), (u1, vb), (u1, va)))
            faces.append((a, d, c))
            uvs.append(((u0, va), (u0, vb), (u1, vb)))
    for k in range(S):
        u0, u1, uc = k / S, (k + 1) / S, (k + 0.5) / S
        faces.append((top, vid(R - 1, k + 1), vid(R - 1, k)))
        uvs.append(((uc, 1.0), (u1, ring_v[-1]), (u0, ring_v[-1])))
    faces = np.array(faces, dtype=np.int64)
    # orient outward (positive signed volume)
    fn = np.cross(verts[faces[:, 1]] - verts[faces[:, 0]], verts[faces[:, 2]] - verts[faces[:, 0]])
    if np.einsum("fa,fa->", fn, verts[faces[:, 0]]) < 0:
        faces = faces[:, [0, 2, 1]]
        uvs = [(a, c, b) for a, b, c in uvs]
    joints = np.array([[0.0, 0.0, 0.0], [0.0, 0.05, 0.0]])
    parents = np.array([-1, 0])
    t = np.clip((verts[:, 1] + 0.1) / 0.2, 0.0, 1.0)
    w1 = t * t * (3 - 2 * t)
    weights = np.stack([1.0 - w1, w1], axis=1)
    return BodyModel(verts, faces, np.array(uvs), joints, parents, weights)


def make_tetrahedron() -> BodyModel:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    faces = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    uv = np.array([[[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]]] * 4)
    return BodyModel(verts, faces, uv, [[0.0, 0.0, 0.0]], [-1], np.ones((4, 1)))


def make_icosphere(subdivisions: int = 2, radius: float = 1.0) -> BodyModel:
    """Single-joint sphere body; uv from spherical angles (per corner, seam-unaware)."""
    t = (1 + 5 ** 0.5) / 2
    verts = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                      [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
                     dtype=np.float64)
    faces = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9],
                      [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2],
                      [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10],
                      [8, 6, 7], [9, 8, 1]])
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges, _ = mesh_edges(faces)
        lookup = {(int(a), int(b)): len(verts) + i for i, (a, b) in enumerate(edges)}
        mids = verts[edges[:, 0]] + verts[edges[:, 1]]
        verts = np.concatenate([verts, mids / np.linalg.norm(mids, axis=1, keepdims=True)])
        nf = []
        for a, b, c in faces.tolist():
            ab = lookup[(min(a, b), max(a, b))]
            bc = lookup[(min(b, c), max(b, c))]
            ca = lookup[(min(c, a), max(c, a))]
            nf += [[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]]
        faces = np.array(nf)
    verts = verts * radius
    d = verts / radius
    u = (np.arctan2(d[:, 2], d[:, 0]) / (2 * np.pi)) % 1.0
    v = np.arccos(np.clip(d[:, 1], -1, 1)) / np.pi
    uv = np.stack([u, v], axis=1)[faces]
    return BodyModel(verts, faces, uv, [[0.0, 0.0, 0.0]], [-1], np.ones((len(verts), 1)))
