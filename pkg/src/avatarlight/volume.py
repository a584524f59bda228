"""Volumetric rendering of an offset surface over the posed body.

Each sample point is projected to the posed base mesh, giving a texel coordinate
and a signed height ``h``. The offset map contributes ``l`` at that texel, the
density follows from ``s = h - l``, and colors come from the texture map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .body import (DEFAULT_OFFSET_CAP, BodyModel, DeformedMesh, PoseParams, deform, mesh_bvh,
                   pose_body, project_points)
from .raster import SpatialIndex, closest_hit_batch

BETA_INIT = 0.05
BETA_MIN = 1e-4
N_UNIFORM = 128
N_EXTRA = 16
SHELL_FACTOR = 4.0


@dataclass
class DensityConfig:
    beta: float = BETA_INIT

    def __post_init__(self):
        self.beta = max(float(self.beta), BETA_MIN)

    def clamp(self) -> None:
        self.beta = max(float(self.beta), BETA_MIN)


def convert_signed_distance(h, l):
    return np.subtract(h, l)


def density(s, beta: float):
    """sigma(s) = logistic(-s / beta) / beta."""
    beta = max(float(beta), BETA_MIN)
    return expit(-np.asarray(s, dtype=np.float64) / beta) / beta


def density_grads(s, beta: float):
    """Partial derivatives (d sigma / d s, d sigma / d beta)."""
    beta = max(float(beta), BETA_MIN)
    s = np.asarray(s, dtype=np.float64)
    sig = expit(-s / beta)
    ss = sig * (1.0 - sig)
    return -ss / beta ** 2, -sig / beta ** 2 + ss * s / beta ** 3


def sample_ray(near: float, far: float, t_hit: float | None = None, beta: float = BETA_INIT,
               rng: np.random.Generator | None = None, n_uniform: int = N_UNIFORM, n_extra: int = N_EXTRA):
    """Sample distances along one ray; returns sorted ``(t, delta)``.

    Without ``rng`` the stratified samples sit at bin midpoints.
    """
    t, d = sample_rays(np.array([near]), np.array([far]),
                       np.array([np.nan if t_hit is None else t_hit]), beta, rng, n_uniform, n_extra)
    keep = np.isfinite(t[0])
    return t[0][keep], d[0][keep]


def sample_rays(near, far, t_hit, beta: float, rng=None, n_uniform: int = N_UNIFORM,
                n_extra: int = N_EXTRA):
    """Batched version of :func:`sample_ray`.

    Returns ``(t, delta)`` of shape (R, n_uniform + n_extra); slots unused by
    rays that miss the mesh hold ``t = inf`` and ``delta = 0`` at the end.
    """
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    t_hit = np.asarray(t_hit, dtype=np.float64)
    R = len(near)
    if np.any(near >= far):
        raise ValueError("sample_rays needs near < far")
    u = np.full((R, n_uniform), 0.5) if rng is None else rng.random((R, n_uniform))
    span = (far - near)[:, None]
    t_uni = near[:, None] + (np.arange(n_uniform) + u) / n_uniform * span
    hit = np.isfinite(t_hit)
    ue = np.full((R, n_extra), 0.5) if rng is None else rng.random((R, n_extra))
    lo = t_hit - 2.0 * beta
    t_ex = lo[:, None] + (np.arange(n_extra) + ue) / n_extra * (4.0 * beta)
    t_ex = np.clip(t_ex, near[:, None], far[:, None])
    t_ex[~hit] = np.inf
    t = np.sort(np.concatenate([t_uni, t_ex], axis=1), axis=1)
    nxt = np.concatenate([t[:, 1:], np.full((R, 1), np.inf)], axis=1)
    nxt = np.where(np.isfinite(nxt), nxt, far[:, None])
    delta = np.where(np.isfinite(t), nxt - t, 0.0)
    return t, delta


def composite(sigma, delta, colors, background=None):
    """Alpha-composite samples along rays.

    Shapes: sigma/delta (R, S) or (S,), colors (..., S, 3). Returns
    ``(C, A, weights, transmittance)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    single = sigma.ndim == 1
    if single:
        sigma, delta, colors = sigma[None], delta[None], colors[None]
    tau = sigma * delta
    with np.errstate(invalid="ignore"):
        excl = np.concatenate([np.zeros((len(tau), 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1)
        T = np.exp(-excl)
        alpha = -np.expm1(-tau)
    alpha = np.where(np.isinf(tau), 1.0, alpha)
    T = np.nan_to_num(T, nan=0.0)
    w = T * alpha
    C = np.einsum("rs,rsc->rc", w, colors)
    A = w.sum(axis=1)
    if background is not None:
        C = C + (1.0 - A)[:, None] * np.asarray(background, dtype=np.float64)
    if single:
        return C[0], A[0], w[0], T[0]
    return C, A, w, T


def composite_backward(sigma, delta, colors, weights, T, dC, dA):
    """Gradients of a loss w.r.t. sigma and colors given dL/dC (R, 3) and dL/dA (R,)."""
    tau = sigma * delta
    g = np.einsum("rc,rsc->rs", dC, colors) + dA[:, None]
    gw = g * weights
    suffix = np.cumsum(gw[:, ::-1], axis=1)[:, ::-1] - gw
    d_tau = g * T * np.exp(-tau) - suffix
    d_sigma = d_tau * delta
    d_colors = weights[:, :, None] * dC[:, None, :]
    return d_sigma, d_colors


def ray_box(origins, dirs, lo, hi):
    """Slab test; returns ``(near, far, hit)`` with near clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    t0 = np.nan_to_num(t0, nan=-np.inf)
    t1 = np.nan_to_num(t1, nan=np.inf)
    near = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
    far = np.maximum(t0, t1).min(axis=1)
    return near, far, far > near


class Stage1Scene:
    """Per-(body, pose) geometry shared by all rays of one frame."""

    def __init__(self, body: BodyModel, pose: PoseParams, geo=None,
                 offset_cap: float = DEFAULT_OFFSET_CAP, base: DeformedMesh | None = None,
                 base_bvh: SpatialIndex | None = None):
        self.body = body
        self.pose = pose
        self.offset_cap = offset_cap
        self.base = pose_body(body, pose) if base is None else base
        self.base_bvh = mesh_bvh(self.base) if base_bvh is None else base_bvh
        self.shell = SHELL_FACTOR * offset_cap
        lo, hi = self.base.bbox
        self.box = (lo - self.shell, hi + self.shell)
        self.update_geometry(geo)

    def update_geometry(self, geo) -> None:
        """Rebuild the deformed mesh used to place the extra near-surface samples."""
        if geo is None:
            self.mesh, self.mesh_bvh = self.base, self.base_bvh
        else:
            self.mesh = deform(self.body, self.pose, geo, self.offset_cap, base=self.base)
            self.mesh_bvh = mesh_bvh(self.mesh)


@dataclass
class Stage1Result:
    color: np.ndarray  # (R, 3)
    opacity: np.ndarray  # (R,)
    cache: dict


def render_rays_stage1(scene: Stage1Scene, origins, dirs, geo, dtx, beta: float,
                       rng: np.random.Generator | None = None, cull_eps: float = 1e-12,
                       background=None, sample_beta: float | None = None) -> Stage1Result:
    """Volume-render a batch of rays; sample placement is not differentiated.

    ``sample_beta`` sets the width of the refinement band independently of the
    density scale (defaults to ``beta``).
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R = len(origins)
    beta = max(float(beta), BETA_MIN)
    near, far, inbox = ray_box(origins, dirs, *scene.box)
    C = np.zeros((R, 3))
    A = np.zeros(R)
    cache = dict(rays=np.nonzero(inbox)[0], beta=beta)
    if background is not None:
        C[:] = background
    idx = cache["rays"]
    if len(idx) == 0:
        cache["empty"] = True
        return Stage1Result(C, A, cache)
    o, d = origins[idx], dirs[idx]
    t_hit, fhit, _ = closest_hit_batch(scene.mesh_bvh, o, d, 1e-9, far[idx])
    t_hit = np.where((fhit >= 0) & (t_hit >= near[idx]), t_hit, np.nan)
    band = beta if sample_beta is None else max(float(sample_beta), BETA_MIN)
    t, delta = sample_rays(near[idx], far[idx], t_hit, band, rng)
    valid = np.isfinite(t)
    pos = o[:, None, :] + np.where(valid, t, 0.0)[:, :, None] * d[:, None, :]
    flat = np.nonzero(valid.ravel())[0]
    _, _, uv, h, _ = project_points(pos.reshape(-1, 3)[flat], scene.base, scene.base_bvh)
    inshell = np.abs(h) <= scene.shell
    act = flat[inshell]
    uv_a, h_a = uv[inshell], h[inshell]

    l_a, geo_cache = geo.forward(uv_a, scene.pose)
    l_a = l_a[:, 0]
    s_a = convert_signed_distance(h_a, l_a)
    S = t.shape[1]
    sigma = np.zeros(t.size)
    sigma[act] = density(s_a, beta)
    sigma = sigma.reshape(-1, S)

    # colors are only evaluated where they can influence the result or its gradient
    tau = sigma * delta
    T = np.exp(-np.concatenate([np.zeros((len(tau), 1)), np.cumsum(tau, axis=1)[:, :-1]], axis=1))
    w = T * -np.expm1(-tau)
    if cull_eps > 0.0:
        dsd_s, _ = density_grads(s_a, beta)
        infl = w.ravel()[act] + np.abs(dsd_s) * delta.ravel()[act] * T.ravel()[act]
        need = (infl > cull_eps) & (T.ravel()[act] > cull_eps)
    else:
        need = np.ones(len(act), dtype=bool)
    col_idx = act[need]
    colors = np.zeros((t.size, 3))
    c_n, dtx_cache = dtx.forward(uv_a[need], scene.pose)
    colors[col_idx] = c_n
    colors = colors.reshape(-1, S, 3)
    Cr, Ar, w, T = composite(sigma, delta, colors)
    C[idx] = Cr if background is None else Cr + (1.0 - Ar)[:, None] * np.asarray(background)
    A[idx] = Ar
    cache.update(sigma=sigma, delta=delta, colors=colors, weights=w, T=T, act=act, s_a=s_a,
                 geo_cache=geo_cache, dtx_cache=dtx_cache, col_idx=col_idx, t=t, h=h, uv=uv,
                 valid=valid, background=background)
    return Stage1Result(C, A, cache)


def backward_rays_stage1(result: Stage1Result, geo, dtx, dC, dA) -> float:
    """Accumulate map gradients; returns dL/dbeta."""
    c = result.cache
    if c.get("empty"):
        return 0.0
    idx = c["rays"]
    dC = np.asarray(dC, dtype=np.float64)[idx]
    dA = np.asarray(dA, dtype=np.float64)[idx]
    if c["background"] is not None:
        dA = dA - dC @ np.asarray(c["background"], dtype=np.float64)
    d_sigma, d_colors = composite_backward(c["sigma"], c["delta"], c["colors"], c["weights"], c["T"], dC, dA)
    act = c["act"]
    ds_sigma = d_sigma.ravel()[act]
    dsd_s, dsd_b = density_grads(c["s_a"], c["beta"])
    # s = h - l, so dL/dl = -dL/ds
    geo.backward(-(ds_sigma * dsd_s)[:, None], c["geo_cache"])
    dtx.backward(d_colors.reshape(-1, 3)[c["col_idx"]], c["dtx_cache"])
    return float(np.sum(ds_sigma * dsd_b))


def render_pixel_stage1(camera, pixel, body: BodyModel, geo, dtx, pose: PoseParams,
                        beta: float = BETA_INIT, offset_cap: float = DEFAULT_OFFSET_CAP,
                        scene: Stage1Scene | None = None) -> np.ndarray:
    if scene is None:
        scene = Stage1Scene(body, pose, geo, offset_cap)
    o, d = camera.pixel_rays(np.asarray(pixel).reshape(1, 2))
    return render_rays_stage1(scene, o, d, geo, dtx, beta).color[0]


def render_image_stage1(camera, body: BodyModel, geo, dtx, pose: PoseParams, beta: float = BETA_INIT,
                        offset_cap: float = DEFAULT_OFFSET_CAP, chunk: int = 2048,
                        scene: Stage1Scene | None = None):
    """Full-frame stage-1 render; returns ``(rgb (H, W, 3), opacity (H, W))``."""
    if scene is None:
        scene = Stage1Scene(body, pose, geo, offset_cap)
    o, d = camera.pixel_rays()
    C = np.zeros((len(o), 3))
    A = np.zeros(len(o))
    for s in range(0, len(o), chunk):
        res = render_rays_stage1(scene, o[s:s + chunk], d[s:s + chunk], geo, dtx, beta)
        C[s:s + chunk] = res.color
        A[s:s + chunk] = res.opacity
    return C.reshape(camera.height, camera.width, 3), A.reshape(camera.height, camera.width)
