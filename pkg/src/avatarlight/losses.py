"""Training losses. Each returns ``(value, gradient(s))``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .body import face_normals, mesh_edges

ENTROPY_EPS = 1e-4


@dataclass
class LossWeights:
    edge: float = 1.0
    normal_smooth: float = 0.01
    laplace: float = 0.1
    entropy: float = 1e-3
    alb_smooth: float = 1e-3
    rgh_smooth: float = 1e-3
    background: float = 0.1
    jitter_mu: float = 0.0
    jitter_var: float = 0.02

    def __post_init__(self):
        for k, v in vars(self).items():
            if k != "jitter_mu" and v < 0:
                raise ValueError(f"loss weight {k} must be non-negative")


def _same_len(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse_loss(pred, target):
    pred, target = _same_len(pred, target)
    r = pred - target
    return float(np.mean(r * r)), 2.0 * r / r.size


def material_loss(rendered, gt):
    """Sum over rays of the L2 norm of the RGB residual."""
    rendered, gt = _same_len(rendered, gt)
    r = rendered.reshape(-1, 3) - gt.reshape(-1, 3)
    norm = np.linalg.norm(r, axis=1)
    safe = np.where(norm > 0.0, norm, 1.0)
    grad = np.where(norm[:, None] > 0.0, r / safe[:, None], 0.0)
    return float(norm.sum()), grad.reshape(rendered.shape)


def bce_background(opacity, eps: float = 1e-6):
    """Mean of -log(1 - A) for rays that should stay empty."""
    a = np.clip(np.asarray(opacity, dtype=np.float64), 0.0, 1.0 - eps)
    n = max(len(a), 1)
    return float(-np.log1p(-a).sum() / n), 1.0 / ((1.0 - a) * n)


def entropy_reg(values, eps: float = ENTROPY_EPS):
    """Gaussian entropy 0.5 ln(2 pi e (var + eps)) per channel, averaged over channels."""
    x = np.asarray(values, dtype=np.float64)
    x = x.reshape(len(x), -1)
    n = len(x)
    if n < 2:
        raise ValueError("entropy_reg needs at least two samples")
    var = x.var(axis=0, ddof=1)
    h = 0.5 * np.log(2 * np.pi * np.e * (var + eps))
    C = x.shape[1]
    grad = (x - x.mean(axis=0)) / ((n - 1) * (var + eps)) / C
    return float(h.mean()), grad


def jitter_uv(uv, rng, mu: float = 0.0, var: float = 0.02):
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    noise = rng.normal(mu, np.sqrt(var), size=uv.shape) if var > 0 else np.full(uv.shape, mu)
    return np.clip(uv + noise, 0.0, 1.0)


def smooth_reg(nmap, uv, pose, rng, mu: float = 0.0, var: float = 0.02, backward_scale: float = 0.0):
    """Sum of ||map(uv) - map(uv + noise)||; noise ~ N(mu, var), jittered uv clamped.

    When ``backward_scale`` is non-zero the scaled gradient is accumulated into
    the map (which must support ``forward``/``backward``).
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    uj = jitter_uv(uv, rng, mu, var)
    both = np.concatenate([uv, uj])
    if hasattr(nmap, "forward"):
        out, cache = nmap.forward(both, pose)
    else:
        out, cache = np.asarray(nmap.query_batch(both, pose)).reshape(len(both), -1), None
    n = len(uv)
    r = out[:n] - out[n:]
    norm = np.linalg.norm(r, axis=1)
    if backward_scale and cache is not None:
        g = np.where(norm[:, None] > 0.0, r / np.where(norm > 0, norm, 1.0)[:, None], 0.0) * backward_scale
        nmap.backward(np.concatenate([g, -g]), cache)
    return float(norm.sum())


class MeshTopology:
    """Precomputed edge, face-pair and neighbourhood structure for a fixed face list."""

    def __init__(self, faces, n_vertices: int):
        self.faces = np.asarray(faces, dtype=np.int64)
        self.n_vertices = n_vertices
        self.edges, edge_faces = mesh_edges(self.faces)
        ef = np.asarray(edge_faces)
        self.face_pairs = ef[(ef[:, 0] >= 0) & (ef[:, 1] >= 0)]
        i, j = self.edges[:, 0], self.edges[:, 1]
        adj = sp.coo_matrix((np.ones(2 * len(i)), (np.concatenate([i, j]), np.concatenate([j, i]))),
                            shape=(n_vertices, n_vertices)).tocsr()
        adj.data[:] = 1.0
        deg = np.asarray(adj.sum(axis=1)).ravel()
        inv = sp.diags(1.0 / np.maximum(deg, 1.0))
        self.laplacian = (inv @ adj - sp.identity(n_vertices)).tocsr()
        self.laplacian_t = self.laplacian.T.tocsr()


def edge_loss(V, topo: MeshTopology, target=None):
    """Mean of (|e| - target)^2 over edges; ``target=None`` is length 0, i.e. the mean of |e|^2."""
    e = V[topo.edges[:, 0]] - V[topo.edges[:, 1]]
    E = len(e)
    g = np.zeros_like(V)
    if target is None:
        np.add.at(g, topo.edges[:, 0], 2.0 * e / E)
        np.add.at(g, topo.edges[:, 1], -2.0 * e / E)
        return float(np.sum(e * e) / E), g
    n = np.linalg.norm(e, axis=1)
    r = n - target
    de = (2.0 * r / (E * np.maximum(n, 1e-300)))[:, None] * e
    np.add.at(g, topo.edges[:, 0], de)
    np.add.at(g, topo.edges[:, 1], -de)
    return float(np.sum(r * r) / E), g


def normal_smooth_loss(V, topo: MeshTopology):
    f = topo.faces
    e1 = V[f[:, 1]] - V[f[:, 0]]
    e2 = V[f[:, 2]] - V[f[:, 0]]
    c = np.cross(e1, e2)
    cn = np.linalg.norm(c, axis=1, keepdims=True)
    n = c / cn
    a, b = topo.face_pairs[:, 0], topo.face_pairs[:, 1]
    P = len(a)
    if P == 0:
        return 0.0, np.zeros_like(V)
    val = float(np.mean(1.0 - np.sum(n[a] * n[b], axis=1)))
    dn = np.zeros_like(n)
    np.add.at(dn, a, -n[b] / P)
    np.add.at(dn, b, -n[a] / P)
    dc = (dn - n * np.sum(n * dn, axis=1, keepdims=True)) / cn
    g1 = np.cross(e2, dc)
    g2 = np.cross(dc, e1)
    g = np.zeros_like(V)
    np.add.at(g, f[:, 1], g1)
    np.add.at(g, f[:, 2], g2)
    np.add.at(g, f[:, 0], -g1 - g2)
    return val, g


def laplacian_loss(V, topo: MeshTopology):
    Lv = topo.laplacian @ V
    n = len(V)
    return float(np.sum(Lv * Lv) / n), 2.0 * (topo.laplacian_t @ Lv) / n


def mesh_loss(V, topo: MeshTopology, weights: LossWeights | None = None, edge_target=None):
    """Weighted edge + normal-smoothness + Laplacian loss; returns (total, dV, parts).

    ``edge_target`` gives per-edge rest lengths for the edge term (default 0).
    """
    w = weights or LossWeights()
    le, ge = edge_loss(V, topo, edge_target)
    ln, gn = normal_smooth_loss(V, topo)
    ll, gl = laplacian_loss(V, topo)
    total = w.edge * le + w.normal_smooth * ln + w.laplace * ll
    return total, w.edge * ge + w.normal_smooth * gn + w.laplace * gl, {"edge": le, "normal": ln, "laplace": ll}
