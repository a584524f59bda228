"""Rasterization into UV images plus BVH ray queries (closest hit, occlusion, visibility)."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .camera import CameraModel

logger = logging.getLogger(__name__)

LEAF_SIZE = 4
SHADOW_EPS_SCALE = 1e-4


@dataclass(frozen=True)
class SpatialIndex:
    lo: np.ndarray
    hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prims: np.ndarray
    vertices: np.ndarray
    faces: np.ndarray
    degenerate: tuple = field(default=())

    @property
    def n_nodes(self) -> int:
        return len(self.lo)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi[0] - self.lo[0]))

    def kernel_args(self):
        return (self.lo, self.hi, self.left, self.right, self.start, self.count,
                self.prims, self.vertices, self.faces)


def build_bvh(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = LEAF_SIZE) -> SpatialIndex:
    """Median-split BVH over triangles (split axis = widest centroid extent)."""
    vertices = np.ascontiguousarray(vertices, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    F = len(faces)
    if F == 0:
        raise ValueError("cannot build a BVH over zero triangles")
    tri = vertices[faces]
    tlo, thi, cen = tri.min(axis=1), tri.max(axis=1), tri.mean(axis=1)
    scale = float(np.linalg.norm(thi.max(0) - tlo.min(0))) + 1.0
    pad = 1e-9 * scale
    area2 = np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    degenerate = tuple(int(i) for i in np.nonzero(area2 <= 1e-14 * scale * scale)[0])
    if degenerate:
        logger.warning("BVH build: %d degenerate triangle(s) ignored by ray queries: %s",
                       len(degenerate), list(degenerate[:10]))

    prims = np.arange(F, dtype=np.int64)
    lo, hi, left, right, start, count = [], [], [], [], [], []

    def new_node():
        lo.append(None)
        hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(lo) - 1

    stack = [(new_node(), 0, F)]
    while stack:
        n, s, e = stack.pop()
        idx = prims[s:e]
        lo[n] = tlo[idx].min(axis=0) - pad
        hi[n] = thi[idx].max(axis=0) + pad
        if e - s <= leaf_size:
            start[n], count[n] = s, e - s
            continue
        c = cen[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        prims[s:e] = idx[np.argsort(c[:, axis], kind="stable")]
        mid = (s + e) // 2
        l, r = new_node(), new_node()
        left[n], right[n] = l, r
        stack.append((r, mid, e))
        stack.append((l, s, mid))
    return SpatialIndex(np.array(lo), np.array(hi), np.array(left, np.int64),
                        np.array(right, np.int64), np.array(start, np.int64),
                        np.array(count, np.int64), prims, vertices, faces, degenerate)


def closest_hit(bvh: SpatialIndex, origin, direction, tmin: float = 1e-6, tmax: float = np.inf):
    """Nearest intersection as ``(t, face_id, barycentrics)``, or None."""
    t, f, b = closest_hit_batch(bvh, np.asarray(origin)[None], np.asarray(direction)[None], tmin, tmax)
    if f[0] < 0:
        return None
    return float(t[0]), int(f[0]), b[0]


def closest_hit_batch(bvh: SpatialIndex, origins, directions, tmin: float = 1e-6, tmax=np.inf):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    tmax = np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(origins),)).copy()
    return kernels.closest_hit_batch(origins, directions, float(tmin), tmax, *bvh.kernel_args())


def occluded(bvh: SpatialIndex, origin, direction, t_max: float = np.inf) -> bool:
    """True iff the ray hits any triangle with t in (0, t_max)."""
    return bool(occluded_batch(bvh, np.asarray(origin)[None], np.asarray(direction)[None], t_max)[0])


def occluded_batch(bvh: SpatialIndex, origins, directions, t_max=np.inf) -> np.ndarray:
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    directions = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    t_max = np.broadcast_to(np.asarray(t_max, dtype=np.float64), (len(origins),)).copy()
    return kernels.any_hit_batch(origins, directions, 0.0, t_max, *bvh.kernel_args())


def shadow_epsilon(bvh: SpatialIndex) -> float:
    return SHADOW_EPS_SCALE * bvh.diagonal


def visibility(points, normals, probe_dirs, bvh: SpatialIndex, eps: float | None = None) -> np.ndarray:
    """Binary visibility (P, N): 0 for back-facing or occluded probe directions.

    Shadow rays start at ``x + eps * n`` with eps = 1e-4 x bbox diagonal by default.
    """
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    normals = np.ascontiguousarray(normals, dtype=np.float64).reshape(-1, 3)
    probe_dirs = np.ascontiguousarray(probe_dirs, dtype=np.float64).reshape(-1, 3)
    if eps is None:
        eps = shadow_epsilon(bvh)
    return kernels.visibility_batch(points, normals, probe_dirs, float(eps), *bvh.kernel_args())


@dataclass(frozen=True)
class UVImage:
    face_id: np.ndarray  # (H, W), -1 where uncovered
    barycentrics: np.ndarray  # (H, W, 3)
    uv: np.ndarray  # (H, W, 2)
    depth: np.ndarray  # (H, W) camera-space z, inf where uncovered
    normal: np.ndarray  # (H, W, 3) interpolated unit normal
    position: np.ndarray  # (H, W, 3) world-space surface point
    mask: np.ndarray  # (H, W) bool

    @property
    def width(self) -> int:
        return self.face_id.shape[1]

    @property
    def height(self) -> int:
        return self.face_id.shape[0]


def rasterize(mesh, camera: CameraModel, width: int | None = None, height: int | None = None,
              znear: float = 1e-3) -> UVImage:
    """First-surface UV image of a mesh (front faces only, pixel-center sampling)."""
    if width is not None and height is not None and (width, height) != (camera.width, camera.height):
        camera = camera.scaled(width, height)
    verts = np.asarray(mesh.vertices, dtype=np.float64)
    faces = np.ascontiguousarray(mesh.faces, dtype=np.int64)
    cam_verts = np.ascontiguousarray(camera.world_to_camera(verts))
    fid, bary, depth = kernels.rasterize_kernel(cam_verts, faces, camera.fx, camera.fy, camera.cx,
                                                camera.cy, camera.width, camera.height, znear)
    mask = fid >= 0
    H, W = fid.shape
    uv = np.zeros((H, W, 2))
    normal = np.zeros((H, W, 3))
    position = np.zeros((H, W, 3))
    f = fid[mask]
    b = bary[mask]
    uv[mask] = np.einsum("nk,nka->na", b, mesh.uv[f])
    vn = mesh.vertex_normals[faces[f]]
    n = np.einsum("nk,nka->na", b, vn)
    normal[mask] = n / np.linalg.norm(n, axis=1, keepdims=True)
    position[mask] = np.einsum("nk,nka->na", b, verts[faces[f]])
    return UVImage(fid, bary, uv, depth, normal, position, mask)


def dump_uv_image(uvimg: UVImage, out_dir) -> dict:
    """Write uv (RG), depth (R) and normals ((n+1)/2 as RGB) as PFM files."""
    from .imageio import write_pfm

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    uv = np.zeros(uvimg.uv.shape[:2] + (3,))
    uv[..., :2] = uvimg.uv
    depth = np.where(uvimg.mask, uvimg.depth, 0.0)
    normal = np.where(uvimg.mask[..., None], (uvimg.normal + 1.0) / 2.0, 0.0)
    paths = {"uv": out / "uv.pfm", "depth": out / "depth.pfm", "normal": out / "normal.pfm"}
    write_pfm(paths["uv"], uv)
    write_pfm(paths["depth"], depth)
    write_pfm(paths["normal"], normal)
    return paths
