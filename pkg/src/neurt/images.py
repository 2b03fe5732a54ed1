"""Image files: 8-bit sRGB PNG and a raw float32 dump."""
from __future__ import annotations

import struct

import numpy as np
from PIL import Image

RAW_MAGIC = b"NRTRAW01"


def linear_to_srgb(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def encode_8bit(rgb, srgb=True):
    v = linear_to_srgb(rgb) if srgb else np.clip(rgb, 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8)


def decode_8bit(data, srgb=True):
    v = np.asarray(data, dtype=np.float64) / 255.0
    return srgb_to_linear(v) if srgb else v


def write_png(path, rgb, alpha=None, srgb=True):
    """Linear RGB in [0,1] (clamped) -> 8-bit PNG, sRGB-encoded unless ``srgb`` is False."""
    data = encode_8bit(rgb, srgb)
    if alpha is not None:
        a = np.round(np.clip(alpha, 0.0, 1.0) * 255.0).astype(np.uint8)
        data = np.concatenate([data, a[..., None]], axis=-1)
    Image.fromarray(data).save(path)


def read_png(path, srgb=True):
    """Returns (linear RGB float (H, W, 3), alpha float (H, W) or None)."""
    with Image.open(path) as im:
        data = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    rgb = decode_8bit(data[..., :3], srgb)
    alpha = data[..., 3] / 255.0 if data.shape[-1] == 4 else None
    return rgb, alpha


def read_mask(path):
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    return (data > 0.5).astype(np.float64)


def write_mask(path, mask):
    Image.fromarray((np.asarray(mask) > 0.5).astype(np.uint8) * 255).save(path)


def write_raw(path, image):
    """Header: magic, uint32 width, height, channels (little-endian); then row-major float32."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<III", w, h, c))
        fh.write(image.astype("<f4").tobytes())


def read_raw(path):
    with open(path, "rb") as fh:
        head = fh.read(len(RAW_MAGIC) + 12)
        if head[:len(RAW_MAGIC)] != RAW_MAGIC:
            raise ValueError(f"{path}: not a raw image dump")
        w, h, c = struct.unpack("<III", head[len(RAW_MAGIC):])
        data = np.frombuffer(fh.read(), dtype="<f4", count=w * h * c)
    return data.reshape(h, w, c).astype(np.float64)


def composite(rgb, alpha, background):
    a = np.asarray(alpha)[..., None]
    return rgb * a + np.asarray(background, dtype=np.float64) * (1.0 - a)
