"""Image export/import: sRGB PNG frames, raw float dumps, float depth images."""
from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError
from .rasterizer import DepthMap, Framebuffer


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def to_srgb8(fb: Framebuffer) -> np.ndarray:
    return np.round(linear_to_srgb(fb.pixels) * 255.0).astype(np.uint8)


def png_bytes(fb: Framebuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(to_srgb8(fb), mode="RGB").save(buf, format="PNG", optimize=False,
                                                    compress_level=6)
    return buf.getvalue()


def save_png(fb: Framebuffer, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(png_bytes(fb))


def load_png_linear(path) -> np.ndarray:
    """(H, W, 3) linear RGB from an 8-bit sRGB image."""
    try:
        img = Image.open(path).convert("RGB")
    except (OSError, FileNotFoundError) as e:
        raise ConfigError(f"cannot read image {path}: {e}") from None
    return srgb_to_linear(np.asarray(img, dtype=np.float64) / 255.0)


def load_mask(path) -> np.ndarray:
    """(H, W) mask in [0, 1] from a grayscale image."""
    try:
        img = Image.open(path).convert("L")
    except (OSError, FileNotFoundError) as e:
        raise ConfigError(f"cannot read mask {path}: {e}") from None
    return np.asarray(img, dtype=np.float64) / 255.0


def save_raw_planar(fb: Framebuffer, path) -> None:
    """Channel-planar little-endian float32 dump, shape (3, H, W), no header."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    planar = np.ascontiguousarray(np.moveaxis(fb.pixels, -1, 0), dtype="<f4")
    Path(path).write_bytes(planar.tobytes())


def load_raw_planar(path, width: int, height: int) -> np.ndarray:
    """Inverse of :func:`save_raw_planar`; returns (H, W, 3) float32."""
    data = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if data.size != 3 * width * height:
        raise ConfigError(f"{path}: expected {3 * width * height} floats, got {data.size}")
    return np.moveaxis(data.reshape(3, height, width), 0, -1)


def save_depth(depth: DepthMap, path) -> None:
    """32-bit float single-channel TIFF; invalid pixels are written as 0."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    vals = np.where(depth.valid, depth.values, 0.0).astype(np.float32)
    Image.fromarray(vals, mode="F").save(path, format="TIFF")


def load_depth(path, scale: float = 1.0) -> DepthMap:
    """Load an external depth image (float TIFF or .npy).

    ``scale`` multiplies every value; use it to align relative (monocular) depth
    to scene units. Non-positive or non-finite samples are invalid.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"depth image not found: {path}")
    if path.suffix == ".npy":
        vals = np.load(path).astype(np.float64)
    else:
        vals = np.asarray(Image.open(path), dtype=np.float64)
    if vals.ndim != 2:
        raise ConfigError(f"{path}: depth must be single-channel")
    vals = vals * float(scale)
    valid = np.isfinite(vals) & (vals > 0)
    vals = np.where(valid, vals, 0.0)
    return DepthMap(vals.shape[1], vals.shape[0], vals, valid)
