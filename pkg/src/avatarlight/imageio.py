"""PFM (float) and PNG (8-bit) image IO."""

from pathlib import Path

import numpy as np
from PIL import Image


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top as the format requires."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        header = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {image.shape}")
    h, w = image.shape[:2]
    data = np.ascontiguousarray(np.flipud(image)).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(data.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        channels = 3 if header == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def to_ldr(radiance: np.ndarray, exposure: float = 1.0, gamma: float = 2.2) -> np.ndarray:
    x = np.clip(np.asarray(radiance, dtype=np.float64) * exposure, 0.0, 1.0)
    return np.round(255.0 * x ** (1.0 / gamma)).astype(np.uint8)


def write_png(path, radiance: np.ndarray, exposure: float = 1.0, gamma: float = 2.2) -> None:
    Image.fromarray(to_ldr(radiance, exposure, gamma)).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8)).save(path)


def read_mask(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L")) > 127


def read_image(path) -> np.ndarray:
    """Linear float image from PFM, or from an sRGB-ish PNG via gamma 2.2."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    rgb = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0
    return (rgb ** 2.2).astype(np.float32)
