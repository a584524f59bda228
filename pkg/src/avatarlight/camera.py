"""Pinhole camera in the OpenCV convention (x right, y down, z forward)."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # world -> camera, (3, 3)
    translation: np.ndarray  # world -> camera, (3,)

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def pixel_rays(self, pixels: np.ndarray | None = None):
        """World-space rays through pixel centers.

        ``pixels`` is an (N, 2) integer array of (col, row); default is every pixel
        in row-major order. Directions are unit length.
        """
        if pixels is None:
            jj, ii = np.mgrid[0:self.height, 0:self.width]
            pixels = np.stack([ii.ravel(), jj.ravel()], axis=1)
        pixels = np.asarray(pixels)
        d_cam = np.stack([(pixels[:, 0] + 0.5 - self.cx) / self.fx,
                          (pixels[:, 1] + 0.5 - self.cy) / self.fy,
                          np.ones(len(pixels))], axis=1)
        d = d_cam @ self.rotation
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def scaled(self, width: int, height: int) -> "CameraModel":
        sx, sy = width / self.width, height / self.height
        return CameraModel(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy,
                           width, height, self.rotation, self.translation)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]),
                   np.array(d["rotation"], dtype=np.float64),
                   np.array(d["translation"], dtype=np.float64))


def look_at(eye, target, width: int, height: int, focal: float,
            up=(0.0, 1.0, 0.0)) -> CameraModel:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return CameraModel(focal, focal, width / 2.0, height / 2.0, width, height, R, -R @ eye)
