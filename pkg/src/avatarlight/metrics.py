"""Image and geometry metrics."""

from __future__ import annotations

import logging

import numpy as np
from skimage.metrics import structural_similarity

from .body import project_points
from .raster import build_bvh

logger = logging.getLogger(__name__)

PSNR_CAP = 99.0


def _check_same(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0, mask=None) -> float:
    a, b = _check_same(a, b)
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(peak * peak / mse))


def to_gray(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img @ np.array([0.299, 0.587, 0.114])
    return img


def ssim(a, b, data_range: float = 1.0) -> float:
    """Gaussian-windowed SSIM (sigma 1.5, 11x11 support) on grayscale versions of a and b."""
    a, b = _check_same(a, b)
    return float(structural_similarity(to_gray(a), to_gray(b), data_range=data_range,
                                       gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
                                       K1=0.01, K2=0.03))


def scale_align(pred, gt, mask=None):
    """Per-channel least-squares scale; returns ``(pred * k, k)``."""
    pred, gt = _check_same(pred, gt)
    p = pred.reshape(-1, pred.shape[-1]) if pred.ndim == 3 else pred.reshape(-1, 1)
    g = gt.reshape(p.shape)
    if mask is not None:
        m = np.asarray(mask).reshape(-1)
        p_fg, g_fg = p[m], g[m]
    else:
        p_fg, g_fg = p, g
    num = np.sum(p_fg * g_fg, axis=0)
    den = np.sum(p_fg * p_fg, axis=0)
    k = np.ones(p.shape[1])
    for c in range(p.shape[1]):
        if den[c] > 0.0:
            k[c] = num[c] / den[c]
        else:
            logger.warning("scale_align: channel %d of the prediction is all zero, factor set to 1", c)
    return (p * k).reshape(pred.shape), k


def sample_surface(vertices, faces, n: int, seed: int = 0):
    """Area-weighted uniform samples on a triangle mesh."""
    rng = np.random.default_rng(seed)
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces)]
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    f = rng.choice(len(tri), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    w = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], axis=1)
    return np.einsum("nk,nka->na", w, tri[f])


class _Mesh:
    def __init__(self, vertices, faces):
        from .body import face_normals
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.uv = np.zeros((len(self.faces), 3, 2))
        self.face_normals = face_normals(self.vertices, self.faces)


def point_to_surface(points, vertices, faces) -> np.ndarray:
    """Unsigned distance from each point to the triangle mesh."""
    mesh = _Mesh(vertices, faces)
    _, _, _, h, _ = project_points(points, mesh, build_bvh(mesh.vertices, mesh.faces))
    return np.abs(h)


def chamfer_p2s(pred, gt, n_samples: int = 10_000, seed: int = 0):
    """``(CD, P2S)`` in mesh units.

    Distances are measured from surface samples to the other mesh's surface
    (not to its samples), so a mesh compared with itself scores zero. CD is the
    mean of the two directions, P2S the pred -> gt direction alone.
    """
    a = sample_surface(pred.vertices, pred.faces, n_samples, seed)
    b = sample_surface(gt.vertices, gt.faces, n_samples, seed + 1)
    p2s = float(point_to_surface(a, gt.vertices, gt.faces).mean())
    s2p = float(point_to_surface(b, pred.vertices, pred.faces).mean())
    return 0.5 * (p2s + s2p), p2s
