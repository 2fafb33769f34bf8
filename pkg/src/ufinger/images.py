"""Grayscale image files.

Images are handled as 2-D float64 arrays (height x width) with values in
[0, 1]. PGM (binary P5) is read and written directly; PNG goes through Pillow.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError

PathLike = Union[str, os.PathLike]

IMAGE_SUFFIXES = (".png", ".pgm")

_LUMA = np.array([0.299, 0.587, 0.114])


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """First ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise FormatError("truncated PGM header")
        if data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def read_pgm(data: bytes) -> np.ndarray:
    tokens, offset = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise FormatError(f"unsupported PNM magic {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError("malformed PGM header") from None
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError("PGM header out of range")
    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    need = width * height * dtype.itemsize
    raster = data[offset : offset + need]
    if len(raster) < need:
        raise FormatError("truncated PGM raster")
    pixels = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return np.clip(pixels / float(maxval), 0.0, 1.0)


def write_pgm(img: np.ndarray) -> bytes:
    h, w = img.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(img).tobytes()


def quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def to_gray(arr: np.ndarray, scale: float) -> np.ndarray:
    arr = arr.astype(np.float64) / scale
    if arr.ndim == 3:
        if arr.shape[2] in (2, 4):  # drop alpha
            arr = arr[..., :-1]
        arr = arr[..., 0] if arr.shape[2] == 1 else arr[..., :3] @ _LUMA
    return np.clip(arr, 0.0, 1.0)


def load_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        return read_pgm(data)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                return to_gray(np.asarray(im), 65535.0)
            if im.mode not in ("L", "LA", "RGB", "RGBA"):
                im = im.convert("RGB")
            return to_gray(np.asarray(im), 255.0)
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"{path}: not a supported image ({exc})") from None


def save_image(img: np.ndarray, path: PathLike) -> None:
    path = Path(path)
    if img.ndim != 2:
        raise FormatError(f"expected a 2-D grayscale image, got shape {img.shape}")
    if path.suffix.lower() == ".pgm":
        path.write_bytes(write_pgm(img))
    else:
        Image.fromarray(quantize(img)).save(path, format="PNG")


def list_images(directory: PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
