"""Image files: 8-bit PNG views and PFM float dumps"""
from __future__ import annotations

import io
import os

import numpy as np
from PIL import Image as PILImage

from .general import FormatError, SpeedeError


def png_bytes(image: np.ndarray) -> bytes:
    """Encode an H×W×3 image in [0,1] as 8-bit PNG."""
    data = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    pixels = np.round(data * 255.0).astype(np.uint8)
    buf = io.BytesIO()
    PILImage.fromarray(pixels, "RGB").save(buf, format="PNG")
    return buf.getvalue()


def write_png(path: str, image: np.ndarray) -> None:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(png_bytes(image))
    except OSError as e:
        raise SpeedeError(f'Could not write PNG "{path}": {e}') from e


def read_png(path: str) -> np.ndarray:
    """Decode a PNG into an H×W×3 float64 image in [0,1]."""
    try:
        with PILImage.open(path) as img:
            pixels = np.asarray(img.convert("RGB"), dtype=np.float64)
    except OSError as e:
        raise SpeedeError(f'Could not read image "{path}": {e}') from e
    return pixels / 255.0


def pfm_bytes(data: np.ndarray) -> bytes:
    """Portable float map, little-endian, bottom row first."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        kind = b"PF"
    elif data.ndim == 2:
        kind = b"Pf"
    else:
        raise FormatError(f"PFM needs an H×W or H×W×3 array, got {data.shape}")
    h, w = data.shape[:2]
    header = kind + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    return header + np.flipud(data).astype("<f4").tobytes()


def write_pfm(path: str, data: np.ndarray) -> None:
    try:
        with open(path, "wb") as f:
            f.write(pfm_bytes(data))
    except OSError as e:
        raise SpeedeError(f'Could not write PFM "{path}": {e}') from e


def read_pfm(path: str) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            kind = f.readline().strip()
            w, h = (int(v) for v in f.readline().split())
            scale = float(f.readline())
            payload = f.read()
    except (OSError, ValueError) as e:
        raise FormatError(f'Could not read PFM "{path}": {e}') from e
    channels = {b"PF": 3, b"Pf": 1}.get(kind)
    if channels is None:
        raise FormatError(f'"{path}": unknown PFM kind {kind!r}')
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload, dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float32)
