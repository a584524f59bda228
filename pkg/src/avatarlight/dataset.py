"""Multi-view dataset directories.

Layout::

    manifest.json     frames (camera, pose vector, image + mask paths), scene info
    images/*.pfm      linear radiance (PNG previews alongside)
    masks/*.png       8-bit foreground masks
    gt/               body.json, per-pose meshes, textures, probe files
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .body import BodyModel, PoseParams, load_body
from .camera import CameraModel
from .imageio import read_image, read_mask


class DatasetError(ValueError):
    pass


@dataclass
class FrameRecord:
    camera: CameraModel
    pose: PoseParams
    image_path: Path
    mask_path: Path
    pose_index: int = 0
    _image: np.ndarray | None = None
    _mask: np.ndarray | None = None

    @property
    def image(self) -> np.ndarray:
        if self._image is None:
            img = read_image(self.image_path).astype(np.float64)
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=2)
            if img.shape[:2] != (self.camera.height, self.camera.width):
                raise DatasetError(f"{self.image_path}: size {img.shape[:2]} does not match camera")
            self._image = img
        return self._image

    @property
    def mask(self) -> np.ndarray:
        if self._mask is None:
            m = read_mask(self.mask_path)
            if m.shape != (self.camera.height, self.camera.width):
                raise DatasetError(f"{self.mask_path}: size {m.shape} does not match camera")
            self._mask = m
        return self._mask


@dataclass
class Dataset:
    root: Path
    manifest: dict
    body: BodyModel
    frames: list

    @property
    def poses(self) -> list:
        seen = {}
        for fr in self.frames:
            seen.setdefault(fr.pose_index, fr.pose)
        return [seen[k] for k in sorted(seen)]

    def gt_path(self, key: str) -> Path | None:
        rel = self.manifest.get("gt", {}).get(key)
        return None if rel is None else self.root / rel

    def content_hash(self) -> str:
        """SHA-256 over the manifest and every referenced image and mask."""
        h = hashlib.sha256((self.root / "manifest.json").read_bytes())
        for fr in self.frames:
            h.update(Path(fr.image_path).read_bytes())
            h.update(Path(fr.mask_path).read_bytes())
        return h.hexdigest()


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: {exc}") from exc
    body_rel = manifest.get("body") or manifest.get("gt", {}).get("body")
    if body_rel is None:
        raise DatasetError(f"{mpath}: no body file listed")
    body = load_body(root / body_rel)
    frames = []
    for i, fr in enumerate(manifest.get("frames", [])):
        try:
            cam = CameraModel.from_dict(fr["camera"])
            pose = PoseParams.from_vector(fr["pose"], body.n_joints)
            frames.append(FrameRecord(cam, pose, root / fr["image"], root / fr["mask"],
                                      int(fr.get("pose_index", 0))))
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"{mpath}: frame {i}: {exc}") from exc
    if not frames:
        raise DatasetError(f"{root}: dataset has no frames")
    return Dataset(root, manifest, body, frames)
