"""Full-image inference with reflection padding to undo receptive-field shrinkage."""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .net import Model, NetworkConfig, forward, min_input_size, output_shape, total_shrink
from .tensor import Tensor


def _aligned_size(cfg: NetworkConfig, size: int, shrink: int) -> int:
    """Smallest input extent >= size + shrink whose output is exactly input - shrink."""
    s = max(size + shrink, min_input_size(cfg))
    while output_shape(cfg, s)[0] != s - shrink:
        s += 1
    return s


def padding_plan(cfg: NetworkConfig, h: int, w: int) -> tuple[tuple[int, int], tuple[int, int], tuple[int, int]]:
    """Reflection pads per axis and the (top, left) crop taken from the output.

    The padded input sits on the lattice where the network acts as a pure
    translation by shrink/2, so the cropped output is aligned pixel for pixel
    with the original image.
    """
    shrink = total_shrink(cfg)
    half = shrink // 2
    pads, crop = [], []
    for size in (h, w):
        extra = _aligned_size(cfg, size, shrink) - size - shrink
        pads.append((half + extra // 2, half + extra - extra // 2))
        crop.append(extra // 2)
    return pads[0], pads[1], (crop[0], crop[1])


def restore_image(model: Model, img: np.ndarray, pad_input: bool = True) -> np.ndarray:
    """Restore one 2-D image; returns float64 clamped to [0, 1].

    With ``pad_input`` the output has the input's extents. Without it, valid
    models return the shrunken centre.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a 2-D grayscale image, got shape {img.shape}")
    cfg = model.config
    h, w = img.shape
    if pad_input:
        py, px, (top, left) = padding_plan(cfg, h, w)
        x = np.pad(img, (py, px), mode="reflect") if min(h, w) > 1 else np.pad(img, (py, px), mode="edge")
    else:
        minimum = min_input_size(cfg)
        if min(h, w) < minimum:
            raise DataError(f"image {h}x{w} is smaller than the minimum input size {minimum}")
        x, top, left = img, 0, 0
    out = forward(model, Tensor(x[None, None]), "eval").data[0, 0]
    if pad_input:
        out = out[top : top + h, left : left + w]
    return np.clip(out.astype(np.float64), 0.0, 1.0)
