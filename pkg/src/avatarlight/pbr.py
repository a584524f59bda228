"""Physically-based shading with a discrete light-probe sphere.

Outgoing radiance at a surface point is the probe sum
``sum_i L_i * f_r(w_i, w_o) * V_i * max(0, n.w_i) * dw`` with a Lambert plus
Cook-Torrance (GGX, height-correlated Smith, Schlick) BRDF.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit, prange
from scipy.special import expit

from .body import DEFAULT_OFFSET_CAP, BodyModel, PoseParams, deform, mesh_bvh
from .raster import UVImage, rasterize, visibility

F0 = 0.04
DENOM_FLOOR = 1e-4
N_PROBES = 128


class ProbeError(ValueError):
    pass


def fibonacci_directions(n: int = N_PROBES) -> np.ndarray:
    """Unit directions on a Fibonacci spiral with +y as the polar axis."""
    i = np.arange(n, dtype=np.float64)
    y = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - y * y))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    d = np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > 30.0, y, np.log(np.expm1(np.maximum(y, 1e-30))))


@dataclass
class LightProbeArray:
    directions: np.ndarray  # (N, 3)
    radiance: np.ndarray  # (N, 3), >= 0

    def __post_init__(self):
        self.directions = np.asarray(self.directions, dtype=np.float64).reshape(-1, 3)
        self.radiance = np.asarray(self.radiance, dtype=np.float64).reshape(-1, 3)
        if len(self.directions) != len(self.radiance):
            raise ProbeError(f"{len(self.directions)} directions but {len(self.radiance)} radiances")
        if np.any(np.abs(np.linalg.norm(self.directions, axis=1) - 1.0) > 1e-6):
            raise ProbeError("probe directions must be unit vectors")
        if np.any(self.radiance < 0) or not np.all(np.isfinite(self.radiance)):
            raise ProbeError("probe radiances must be finite and non-negative")

    @property
    def n(self) -> int:
        return len(self.directions)

    @property
    def weights(self) -> np.ndarray:
        return np.full(self.n, 4.0 * np.pi / self.n)

    @classmethod
    def uniform(cls, value=1.0, n: int = N_PROBES) -> "LightProbeArray":
        return cls(fibonacci_directions(n), np.broadcast_to(np.asarray(value, dtype=np.float64), (n, 3)).copy())

    @classmethod
    def from_raw(cls, raw, n: int | None = None) -> "LightProbeArray":
        raw = np.asarray(raw, dtype=np.float64).reshape(-1, 3)
        return cls(fibonacci_directions(len(raw)), np.logaddexp(0.0, raw))

    def scaled(self, k: float) -> "LightProbeArray":
        return LightProbeArray(self.directions, self.radiance * k)

    def to_dict(self) -> dict:
        return {"directions": self.directions.tolist(), "radiances": self.radiance.tolist()}


def load_probes(path) -> LightProbeArray:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ProbeError(f"{path}: {exc}") from exc
    return probes_from_dict(data)


def probes_from_dict(data: dict) -> LightProbeArray:
    if "radiances" not in data:
        raise ProbeError("probe file needs a 'radiances' list")
    rad = np.asarray(data["radiances"], dtype=np.float64)
    if rad.ndim != 2 or rad.shape[1] != 3:
        raise ProbeError(f"radiances must be N x 3, got shape {rad.shape}")
    dirs = data.get("directions")
    dirs = fibonacci_directions(len(rad)) if dirs is None else np.asarray(dirs, dtype=np.float64)
    return LightProbeArray(dirs, rad)


def save_probes(probes: LightProbeArray, path, include_directions: bool = False) -> None:
    data = probes.to_dict() if include_directions else {"radiances": probes.radiance.tolist()}
    Path(path).write_text(json.dumps(data), encoding="utf-8")


# --- BRDF --------------------------------------------------------------------------

def _ggx_terms(a2, n_h, cos_i, cos_o):
    """D, G and their derivatives w.r.t. a2 = alpha^2 (all broadcastable arrays)."""
    x = n_h * n_h
    q = x * (a2 - 1.0) + 1.0
    D = a2 / (np.pi * q * q)
    dD = 1.0 / (np.pi * q * q) - 2.0 * a2 * x / (np.pi * q ** 3)
    ti = (1.0 - cos_i * cos_i) / np.maximum(cos_i * cos_i, 1e-12)
    to = (1.0 - cos_o * cos_o) / np.maximum(cos_o * cos_o, 1e-12)
    ri = np.sqrt(1.0 + a2 * ti)
    ro = np.sqrt(1.0 + a2 * to)
    lam = 0.5 * (ri - 1.0) + 0.5 * (ro - 1.0)
    G = 1.0 / (1.0 + lam)
    dG = -G * G * (ti / (4.0 * ri) + to / (4.0 * ro))
    return D, dD, G, dG


def specular_lobe(roughness, wi, wo, n, f0: float = F0, with_grad: bool = False):
    """Cook-Torrance term (scalar per config); zero unless both cosines are positive.

    Shapes broadcast over leading axes; the last axis of the directions is 3.
    """
    cos_i = np.sum(wi * n, axis=-1)
    cos_o = np.sum(wo * n, axis=-1)
    hv = wi + wo
    hn = np.linalg.norm(hv, axis=-1, keepdims=True)
    hv = hv / np.maximum(hn, 1e-12)
    n_h = np.clip(np.sum(hv * n, axis=-1), 0.0, 1.0)
    h_o = np.clip(np.sum(hv * wo, axis=-1), 0.0, 1.0)
    gamma = np.asarray(roughness, dtype=np.float64)
    a2 = gamma ** 4
    D, dD, G, dG = _ggx_terms(a2, n_h, np.clip(cos_i, 1e-6, 1.0), np.clip(cos_o, 1e-6, 1.0))
    F = f0 + (1.0 - f0) * (1.0 - h_o) ** 5
    denom = 4.0 * np.maximum(cos_i * cos_o, DENOM_FLOOR)
    front = (cos_i > 0.0) & (cos_o > 0.0)
    S = np.where(front, D * F * G / denom, 0.0)
    if not with_grad:
        return S
    dS = np.where(front, F * (dD * G + D * dG) / denom * 4.0 * gamma ** 3, 0.0)
    return S, dS


def brdf_eval(albedo, roughness, wi, wo, n, specular: bool = True, f0: float = F0) -> np.ndarray:
    """RGB reflectance; zero when either direction is below the surface."""
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    albedo = np.asarray(albedo, dtype=np.float64)
    front = (np.sum(wi * n, axis=-1) > 0.0) & (np.sum(wo * n, axis=-1) > 0.0)
    f = albedo / np.pi
    if specular and f0 > 0.0:
        f = f + specular_lobe(roughness, wi, wo, n, f0)[..., None]
    return np.where(front[..., None], f, 0.0)


@dataclass
class ShadingInputs:
    """Geometry-only quantities for P shading points against N probes."""
    normals: np.ndarray  # (P, 3)
    view: np.ndarray  # (P, 3) unit direction to the camera
    W: np.ndarray  # (P, N) V * max(0, cos_i) * dw, zeroed where cos_o <= 0
    cos_i: np.ndarray  # (P, N)
    cos_o: np.ndarray  # (P,)


def shading_inputs(normals, view, probe_dirs, vis, weights) -> ShadingInputs:
    normals = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    view = np.asarray(view, dtype=np.float64).reshape(-1, 3)
    cos_i = normals @ probe_dirs.T
    cos_o = np.sum(normals * view, axis=1)
    W = np.asarray(vis, dtype=np.float64) * np.maximum(cos_i, 0.0) * weights[None, :]
    W[cos_o <= 0.0] = 0.0
    return ShadingInputs(normals, view, W, cos_i, cos_o)


def specular_matrix(si: ShadingInputs, roughness, probe_dirs, with_grad: bool = False):
    """Per point/probe specular lobe values (P, N), optionally with d/d roughness."""
    wi = probe_dirs[None, :, :]
    wo = si.view[:, None, :]
    n = si.normals[:, None, :]
    r = np.asarray(roughness, dtype=np.float64).reshape(-1, 1)
    return specular_lobe(r, wi, wo, n, with_grad=with_grad)


@njit(cache=True, parallel=True)
def _specular_radiance(rough, wi, wo, n, W, radiance, f0, floor):
    """Sum over probes of lobe * W * radiance, skipping zero-weight pairs. Mirrors specular_lobe."""
    p, k = W.shape
    out = np.zeros((p, 3))
    for i in prange(p):
        a2 = rough[i] ** 4
        nx, ny, nz = n[i, 0], n[i, 1], n[i, 2]
        ox, oy, oz = wo[i, 0], wo[i, 1], wo[i, 2]
        cos_o = ox * nx + oy * ny + oz * nz
        if cos_o <= 0.0:
            continue
        co = min(max(cos_o, 1e-6), 1.0)
        to = (1.0 - co * co) / max(co * co, 1e-12)
        ro = np.sqrt(1.0 + a2 * to)
        s0 = s1 = s2 = 0.0
        for j in range(k):
            w = W[i, j]
            if w == 0.0:
                continue
            ix, iy, iz = wi[j, 0], wi[j, 1], wi[j, 2]
            cos_i = ix * nx + iy * ny + iz * nz
            if cos_i <= 0.0:
                continue
            hx, hy, hz = ix + ox, iy + oy, iz + oz
            hn = max(np.sqrt(hx * hx + hy * hy + hz * hz), 1e-12)
            hx, hy, hz = hx / hn, hy / hn, hz / hn
            n_h = min(max(hx * nx + hy * ny + hz * nz, 0.0), 1.0)
            h_o = min(max(hx * ox + hy * oy + hz * oz, 0.0), 1.0)
            x = n_h * n_h
            q = x * (a2 - 1.0) + 1.0
            D = a2 / (np.pi * q * q)
            ci = min(max(cos_i, 1e-6), 1.0)
            ti = (1.0 - ci * ci) / max(ci * ci, 1e-12)
            ri = np.sqrt(1.0 + a2 * ti)
            G = 1.0 / (1.0 + 0.5 * (ri - 1.0) + 0.5 * (ro - 1.0))
            F = f0 + (1.0 - f0) * (1.0 - h_o) ** 5
            c = D * F * G / (4.0 * max(cos_i * cos_o, floor)) * w
            s0 += c * radiance[j, 0]
            s1 += c * radiance[j, 1]
            s2 += c * radiance[j, 2]
        out[i, 0] = s0
        out[i, 1] = s1
        out[i, 2] = s2
    return out


def shade_points(si: ShadingInputs, albedo, roughness, radiance, probe_dirs,
                 specular: bool = True, return_parts: bool = False):
    """Outgoing radiance (P, 3) for P points."""
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    irr = si.W @ radiance
    Lo = albedo / np.pi * irr
    S = None
    if specular and return_parts:
        S = specular_matrix(si, roughness, probe_dirs)
        Lo = Lo + (S * si.W) @ radiance
    elif specular:
        c = np.ascontiguousarray
        r = c(np.asarray(roughness, dtype=np.float64).reshape(-1))
        Lo = Lo + _specular_radiance(r, c(probe_dirs, dtype=np.float64), c(si.view), c(si.normals), c(si.W),
                                     c(radiance, dtype=np.float64), F0, DENOM_FLOOR)
    if return_parts:
        return Lo, irr, S
    return Lo


def shade_backward(si: ShadingInputs, albedo, roughness, radiance, probe_dirs, dLo,
                   specular: bool = True):
    """Gradients (d albedo (P,3), d roughness (P,), d radiance (N,3)) of a loss given dL/dLo."""
    albedo = np.asarray(albedo, dtype=np.float64).reshape(-1, 3)
    irr = si.W @ radiance
    d_alb = dLo * irr / np.pi
    d_rad = si.W.T @ (dLo * albedo / np.pi)
    d_rgh = np.zeros(len(albedo))
    if specular:
        S, dS = specular_matrix(si, roughness, probe_dirs, with_grad=True)
        SW = S * si.W
        d_rad += SW.T @ dLo
        d_rgh = np.sum(((dS * si.W) @ radiance) * dLo, axis=1)
    return d_alb, d_rgh, d_rad


def shade(normal, view, albedo, roughness, probes: LightProbeArray, vis, specular: bool = True):
    """Outgoing radiance at a single shading point."""
    si = shading_inputs(np.reshape(normal, (1, 3)), np.reshape(view, (1, 3)), probes.directions,
                        np.reshape(vis, (1, -1)), probes.weights)
    return shade_points(si, np.reshape(albedo, (1, 3)), np.reshape(roughness, (1,)), probes.radiance,
                        probes.directions, specular)[0]


# --- image rendering ---------------------------------------------------------------

@dataclass
class PBRFrame:
    """Rasterized geometry plus visibility for one camera/pose (constant in stage 2)."""
    uvimg: UVImage
    pixels: np.ndarray  # (P,) flat indices of covered pixels
    uv: np.ndarray  # (P, 2)
    shading: ShadingInputs
    vis: np.ndarray  # (P, N) uint8


def bend_normals(normals, view, min_cos: float = 1e-3):
    """Tilt interpolated normals that face away from the viewer just past the horizon.

    Rasterized pixels always lie on front faces, but smooth vertex normals can
    still point away from the camera near silhouettes.
    """
    c = np.sum(normals * view, axis=1)
    bad = c < min_cos
    if not bad.any():
        return normals
    out = normals.copy()
    out[bad] = normals[bad] + (min_cos - c[bad])[:, None] * view[bad]
    out[bad] /= np.linalg.norm(out[bad], axis=1, keepdims=True)
    return out


def prepare_frame(mesh, camera, probe_dirs, weights=None, bvh=None, width=None, height=None) -> PBRFrame:
    if weights is None:
        weights = np.full(len(probe_dirs), 4.0 * np.pi / len(probe_dirs))
    uvimg = rasterize(mesh, camera, width, height)
    if width is not None and height is not None:
        camera = camera.scaled(width, height)
    if bvh is None:
        bvh = mesh_bvh(mesh)
    m = uvimg.mask.ravel()
    pixels = np.nonzero(m)[0]
    pos = uvimg.position.reshape(-1, 3)[pixels]
    nrm = uvimg.normal.reshape(-1, 3)[pixels]
    view = camera.center[None, :] - pos
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    nrm = bend_normals(nrm, view)
    vis = visibility(pos, nrm, probe_dirs, bvh)
    si = shading_inputs(nrm, view, probe_dirs, vis, weights)
    return PBRFrame(uvimg, pixels, uvimg.uv.reshape(-1, 2)[pixels], si, vis)


@dataclass
class PBRImages:
    radiance: np.ndarray  # (H, W, 3)
    albedo: np.ndarray  # (H, W, 3)
    roughness: np.ndarray  # (H, W)
    visibility: np.ndarray  # (H, W) mean visibility over probes
    normal: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W)


def render_frame(frame: PBRFrame, alb, rgh, probes: LightProbeArray, pose, specular: bool = True,
                 background=(0.0, 0.0, 0.0)) -> PBRImages:
    uvimg = frame.uvimg
    H, W = uvimg.height, uvimg.width
    if probes.n != frame.vis.shape[1]:
        raise ProbeError(f"frame was prepared for {frame.vis.shape[1]} probes, got {probes.n}")
    a = np.asarray(alb.query_batch(frame.uv, pose, retain=False)).reshape(-1, 3)
    r = np.asarray(rgh.query_batch(frame.uv, pose, retain=False)).reshape(-1)
    Lo = shade_points(frame.shading, a, r, probes.radiance, probes.directions, specular)
    rad = np.tile(np.asarray(background, dtype=np.float64), (H * W, 1))
    rad[frame.pixels] = Lo
    alb_img = np.zeros((H * W, 3))
    alb_img[frame.pixels] = a
    rgh_img = np.zeros(H * W)
    rgh_img[frame.pixels] = r
    vis_img = np.zeros(H * W)
    vis_img[frame.pixels] = frame.vis.mean(axis=1)
    return PBRImages(rad.reshape(H, W, 3), alb_img.reshape(H, W, 3), rgh_img.reshape(H, W),
                     vis_img.reshape(H, W), uvimg.normal, uvimg.mask)


def render_pbr(camera, body: BodyModel, pose: PoseParams, geo, alb, rgh, probes: LightProbeArray,
               specular: bool = True, offset_cap: float = DEFAULT_OFFSET_CAP, width=None, height=None,
               mesh=None) -> PBRImages:
    """Deform, rasterize, query materials once per covered pixel and shade."""
    if mesh is None:
        mesh = deform(body, pose, geo, offset_cap)
    frame = prepare_frame(mesh, camera, probes.directions, probes.weights, width=width, height=height)
    return render_frame(frame, alb, rgh, probes, pose, specular)


def relight(maps: dict, body: BodyModel, new_probes: LightProbeArray, camera, pose: PoseParams,
            n_expected: int | None = None, specular: bool = True,
            offset_cap: float = DEFAULT_OFFSET_CAP, width=None, height=None) -> PBRImages:
    """Render with the trained maps under a different probe set (maps are not modified)."""
    if n_expected is not None and new_probes.n != n_expected:
        raise ProbeError(f"probe count mismatch: checkpoint has {n_expected}, file has {new_probes.n}")
    return render_pbr(camera, body, pose, maps["geo"], maps["alb"], maps["rgh"], new_probes,
                      specular, offset_cap, width, height)


def probe_raw_grad(raw, d_radiance):
    """Chain rule through radiance = softplus(raw)."""
    return d_radiance * expit(raw)
