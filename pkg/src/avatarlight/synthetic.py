"""Synthetic capsule scenes with known geometry, materials and lighting.

Ground-truth images are rendered with the engine's own rasterize + shade path,
using float32-baked textures so that re-rendering from the stored files
reproduces the images exactly.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyModel, DeformedMesh, PoseParams, deform, make_capsule, pose_body, save_body
from .camera import CameraModel, look_at
from .fields import ConstantMap, TextureMap
from .imageio import read_pfm, write_mask, write_pfm, write_png
from .pbr import LightProbeArray, fibonacci_directions, render_pbr, save_probes

logger = logging.getLogger(__name__)

PRESETS = ("capsule-lambert", "capsule-specular", "capsule-bumpy")
RESOLUTION = 128
N_CAMERAS = 8
RING_RADIUS = 2.2
RING_HEIGHT = 0.2
FOCAL_FACTOR = 1.75
TEXTURE_RES = 256
BUMP_AMPLITUDE = 0.02


class PresetError(ValueError):
    pass


class BumpOffset:
    """Analytic offset field a * sin(6 pi u) * sin(4 pi v)."""

    def __init__(self, amplitude: float = BUMP_AMPLITUDE):
        self.amplitude = amplitude

    def query_batch(self, uvs, pose=None, retain: bool = False):
        uv = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        return self.amplitude * np.sin(6 * np.pi * uv[:, 0]) * np.sin(4 * np.pi * uv[:, 1])

    def query(self, uv, pose=None):
        return float(self.query_batch(np.reshape(uv, (1, 2)))[0])


def texel_grid(res: int = TEXTURE_RES):
    c = (np.arange(res) + 0.5) / res
    return np.meshgrid(c, c)  # u varies along columns, v along rows


def bake_albedo(kind: str, rng) -> np.ndarray:
    u, v = texel_grid()
    if kind == "white":
        tex = np.ones(u.shape + (3,))
    else:
        phase = rng.uniform(0, 2 * np.pi, size=(3, 2))
        tex = np.stack([0.5 + 0.2 * np.sin(2 * np.pi * u + phase[c, 0])
                        + 0.15 * np.cos(4 * np.pi * v + phase[c, 1]) for c in range(3)], axis=2)
    return tex.astype(np.float32)


def bake_roughness(kind: str, rng) -> np.ndarray:
    u, v = texel_grid()
    if kind == "const":
        tex = np.full(u.shape, 0.5)
    else:
        phase = rng.uniform(0, 2 * np.pi)
        tex = 0.35 + 0.25 * np.sin(4 * np.pi * v + phase) * np.cos(2 * np.pi * u)
    return tex.astype(np.float32)


def lobe(dirs, axis, sharpness: float):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.exp(sharpness * (dirs @ axis - 1.0))


def sky_sun_probes(sun_dir, n: int = 128) -> LightProbeArray:
    d = fibonacci_directions(n)
    sky = np.array([0.25, 0.3, 0.4])[None, :] * (0.6 + 0.4 * d[:, 1:2])
    sun = np.array([4.0, 3.6, 3.0])[None, :] * lobe(d, sun_dir, 12.0)[:, None]
    return LightProbeArray(d, sky + sun)


def relight_probe_sets(n: int = 128) -> dict:
    """Held-out lighting conditions (never used for training)."""
    d = fibonacci_directions(n)

    def sun(axis, color, ambient):
        return LightProbeArray(d, np.asarray(ambient)[None, :] + np.asarray(color)[None, :] * lobe(d, axis, 20.0)[:, None])

    return {
        "sun_x": sun([1.0, 0.2, 0.0], [3.0, 3.0, 3.0], [0.02, 0.02, 0.02]),
        "sun_back": sun([-0.3, 0.4, -1.0], [2.5, 2.2, 1.8], [0.08, 0.08, 0.1]),
        "top_warm": sun([0.0, 1.0, 0.3], [3.5, 2.6, 1.6], [0.05, 0.04, 0.03]),
        "sky_blue": LightProbeArray(d, np.array([0.3, 0.45, 0.8])[None, :] * (0.5 + 0.5 * np.maximum(d[:, 1:2], 0.0))),
    }


def preset_config(preset: str) -> dict:
    if preset not in PRESETS:
        raise PresetError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    return {
        "capsule-lambert": dict(albedo="white", roughness="const", probes="uniform", offset="none",
                                specular=False, poses="root"),
        "capsule-specular": dict(albedo="textured", roughness="textured", probes="sky_sun", offset="none",
                                 specular=True, poses="bent"),
        "capsule-bumpy": dict(albedo="textured", roughness="const", probes="sky_sun", offset="bumpy",
                              specular=False, poses="bent"),
    }[preset]


def preset_poses(kind: str, n_joints: int = 2) -> list:
    if kind == "root":
        thetas = [np.zeros((2, 3)), np.array([[0.0, 0.7, 0.0], [0, 0, 0]]),
                  np.array([[0.0, -1.2, 0.0], [0, 0, 0]])]
    else:
        thetas = [np.zeros((2, 3)), np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.35]]),
                  np.array([[0.0, 0.5, 0.0], [-0.3, 0.0, 0.0]])]
    return [PoseParams(t, np.zeros(3)) for t in thetas]


def camera_ring(rng, n: int = N_CAMERAS, res: int = RESOLUTION) -> list:
    start = rng.uniform(0.0, 2 * np.pi / n)
    cams = []
    for k in range(n):
        a = start + 2 * np.pi * k / n
        eye = [RING_RADIUS * np.sin(a), RING_HEIGHT, RING_RADIUS * np.cos(a)]
        cams.append(look_at(eye, [0.0, 0.0, 0.0], res, res, FOCAL_FACTOR * res))
    return cams


@dataclass
class SyntheticScene:
    preset: str
    seed: int
    body: BodyModel
    offset: object  # query_batch-able field or None
    albedo: np.ndarray  # (R, R, 3) float32
    roughness: np.ndarray  # (R, R) float32
    probes: LightProbeArray
    cameras: list
    poses: list
    specular: bool
    sun_dir: np.ndarray

    def gt_mesh(self, pose: PoseParams) -> DeformedMesh:
        if self.offset is None:
            return pose_body(self.body, pose)
        return deform(self.body, pose, self.offset)

    def albedo_map(self):
        return TextureMap(self.albedo)

    def roughness_map(self):
        return TextureMap(self.roughness)


def build_scene(preset: str, seed: int = 0, resolution: int = RESOLUTION) -> SyntheticScene:
    cfg = preset_config(preset)
    rng = np.random.default_rng(seed)
    body = make_capsule()
    albedo = bake_albedo(cfg["albedo"], rng)
    roughness = bake_roughness(cfg["roughness"], rng)
    sun_angle = rng.uniform(-0.4, 0.4)
    sun_dir = np.array([np.sin(0.9 + sun_angle), 0.8, np.cos(0.9 + sun_angle)])
    sun_dir /= np.linalg.norm(sun_dir)
    probes = LightProbeArray.uniform(1.0) if cfg["probes"] == "uniform" else sky_sun_probes(sun_dir)
    cameras = camera_ring(rng, res=resolution)
    poses = preset_poses(cfg["poses"])
    offset = BumpOffset() if cfg["offset"] == "bumpy" else None
    return SyntheticScene(preset, seed, body, offset, albedo, roughness, probes, cameras, poses,
                          cfg["specular"], sun_dir)


def render_scene_frame(scene: SyntheticScene, camera: CameraModel, pose: PoseParams, mesh=None):
    mesh = scene.gt_mesh(pose) if mesh is None else mesh
    return render_pbr(camera, scene.body, pose, None, scene.albedo_map(), scene.roughness_map(),
                      scene.probes, scene.specular, mesh=mesh)


def _mesh_dict(mesh) -> dict:
    return {"vertices": np.asarray(mesh.vertices).tolist(), "faces": np.asarray(mesh.faces).tolist()}


def generate_synthetic(out_dir, preset: str, seed: int = 0, resolution: int = RESOLUTION) -> dict:
    """Build the scene, render every camera x pose, and write the dataset directory."""
    scene = build_scene(preset, seed, resolution)
    out = Path(out_dir)
    for sub in ("images", "masks", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    save_body(scene.body, out / "gt" / "body.json")
    write_pfm(out / "gt" / "albedo.pfm", scene.albedo)
    write_pfm(out / "gt" / "roughness.pfm", scene.roughness)
    save_probes(scene.probes, out / "gt" / "probes.json")
    relight_files = {}
    for name, pr in relight_probe_sets(scene.probes.n).items():
        rel = f"gt/relight_{name}.json"
        save_probes(pr, out / rel)
        relight_files[name] = rel

    frames, meshes = [], []
    idx = 0
    for p, pose in enumerate(scene.poses):
        mesh = scene.gt_mesh(pose)
        mrel = f"gt/mesh_pose{p}.json"
        (out / mrel).write_text(json.dumps(_mesh_dict(mesh)), encoding="utf-8")
        meshes.append(mrel)
        for c, cam in enumerate(scene.cameras):
            imgs = render_scene_frame(scene, cam, pose, mesh)
            name = f"{idx:03d}_p{p}_c{c}"
            write_pfm(out / "images" / f"{name}.pfm", imgs.radiance)
            write_png(out / "images" / f"{name}.png", imgs.radiance)
            write_mask(out / "masks" / f"{name}.png", imgs.mask)
            frames.append({"camera": cam.to_dict(), "pose": pose.as_vector().tolist(), "pose_index": p,
                           "camera_index": c, "image": f"images/{name}.pfm", "mask": f"masks/{name}.png"})
            idx += 1

    manifest = {
        "format": "avatarlight-dataset-1",
        "preset": preset,
        "seed": seed,
        "resolution": resolution,
        "specular": scene.specular,
        "offset": {"kind": "bumpy", "amplitude": BUMP_AMPLITUDE} if scene.offset is not None else {"kind": "none"},
        "body": "gt/body.json",
        "gt": {"body": "gt/body.json", "albedo": "gt/albedo.pfm", "roughness": "gt/roughness.pfm",
               "probes": "gt/probes.json", "meshes": meshes, "relight": relight_files},
        "frames": frames,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    logger.info("wrote %d frames for preset %s to %s", len(frames), preset, out)
    return manifest


def load_gt_mesh(path):
    from .metrics import _Mesh
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return _Mesh(np.asarray(data["vertices"]), np.asarray(data["faces"]))


def load_gt_textures(root):
    root = Path(root)
    return read_pfm(root / "gt" / "albedo.pfm"), read_pfm(root / "gt" / "roughness.pfm")
