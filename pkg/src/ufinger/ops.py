"""Forward operations with their gradient rules.

Every op takes and returns :class:`~ufinger.tensor.Tensor` objects and records
its backward rule on the active tape. Feature maps are NCHW, stride is always
1 for convolutions, and padding is either none ("valid") or zero padding that
preserves extents ("same").
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ShapeError, StateError
from .tensor import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

# Upper bound on im2col buffer elements; larger batches are processed in chunks.
_COLS_BUDGET = 48 * 1024 * 1024


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    dilation: int = 1
    padding_mode: str = "valid"

    def __post_init__(self):
        if self.padding_mode not in ("valid", "same"):
            raise ValueError(f"padding_mode must be 'valid' or 'same', got {self.padding_mode!r}")
        if self.dilation < 1 or self.kernel_size < 1:
            raise ValueError("kernel_size and dilation must be >= 1")
        if self.padding_mode == "same" and (self.dilation * (self.kernel_size - 1)) % 2:
            raise ValueError("same padding needs an even dilated kernel span")

    @property
    def extent(self) -> int:
        """Spatial span of the dilated kernel."""
        return self.dilation * (self.kernel_size - 1) + 1

    @property
    def padding(self) -> int:
        if self.padding_mode == "valid":
            return 0
        return self.dilation * (self.kernel_size - 1) // 2

    def output_size(self, size: int) -> int:
        return size + 2 * self.padding - (self.extent - 1)


def _check4(t: Tensor, what: str) -> None:
    if t.data.ndim != 4:
        raise ShapeError(f"{what} must be rank-4 NCHW, got shape {t.shape}")


# --------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, k: int, d: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape (N, C*k*k, ho*wo) for a dilated k x k window."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, :, i, j] = xp[:, :, i * d : i * d + ho, j * d : j * d + wo]
    return cols.reshape(n, c * k * k, ho * wo)


def _col2im_add(dxp: np.ndarray, dcols: np.ndarray, k: int, d: int, ho: int, wo: int) -> None:
    n, c = dxp.shape[:2]
    dcols = dcols.reshape(n, c, k, k, ho, wo)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i * d : i * d + ho, j * d : j * d + wo] += dcols[:, :, i, j]


def _chunks(n: int, per_sample: int):
    step = max(1, min(n, _COLS_BUDGET // max(per_sample, 1)))
    for start in range(0, n, step):
        yield slice(start, min(n, start + step))


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Stride-1 dilated 2-D cross-correlation."""
    _check4(x, "conv2d input")
    n, c, h, w = x.shape
    k, d, p = spec.kernel_size, spec.dilation, spec.padding
    if c != spec.in_channels:
        raise ShapeError(f"conv2d expects {spec.in_channels} input channels, got {c}")
    if weight.shape != (spec.out_channels, spec.in_channels, k, k):
        raise ShapeError(f"conv2d weight shape {weight.shape} does not match {spec}")
    ho, wo = spec.output_size(h), spec.output_size(w)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d input {h}x{w} is smaller than the kernel extent {spec.extent}"
        )
    oc = spec.out_channels
    kk = c * k * k
    w2 = weight.data.reshape(oc, kk)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data

    out = np.empty((n, oc, ho * wo), dtype=x.dtype)
    if k == 1:
        np.matmul(w2, xp.reshape(n, c, h * w), out=out)
    elif kk * ho * wo > _COLS_BUDGET:
        # one sample alone is too large (full-image inference): band over output rows
        rows = max(1, _COLS_BUDGET // (kk * wo))
        span = (k - 1) * d
        for i in range(n):
            for r0 in range(0, ho, rows):
                r1 = min(ho, r0 + rows)
                cols = _im2col(xp[i : i + 1, :, r0 : r1 + span], k, d, r1 - r0, wo)
                np.matmul(w2, cols[0], out=out[i, :, r0 * wo : r1 * wo])
    else:
        for sl in _chunks(n, kk * ho * wo):
            np.matmul(w2, _im2col(xp[sl], k, d, ho, wo), out=out[sl])
    out = out.reshape(n, oc, ho, wo)
    if bias is not None:
        out += bias.data.reshape(1, oc, 1, 1)
    result = Tensor(out)

    def backward_fn(g: np.ndarray):
        gb = _channel_sum(g) if bias is not None else None
        g3 = g.reshape(n, oc, ho * wo)
        if k == 1:
            xs = xp.reshape(n, c, h * w)
            gw = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
            gx = np.matmul(w2.T, g3).reshape(n, c, h, w) if x.requires_grad else None
            return gx, gw, gb
        gw2 = np.zeros_like(w2)
        dxp = np.zeros_like(xp) if x.requires_grad else None
        for sl in _chunks(n, kk * ho * wo):
            cols = _im2col(xp[sl], k, d, ho, wo)
            gw2 += np.matmul(g3[sl], cols.transpose(0, 2, 1)).sum(axis=0)
            if dxp is not None:
                _col2im_add(dxp[sl], np.matmul(w2.T, g3[sl]), k, d, ho, wo)
        gx = None
        if dxp is not None:
            gx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return gx, gw2.reshape(weight.shape), gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record(inputs, result, backward_fn)


# --------------------------------------------------------------------------
# normalization and activations


def _channel_sum(a: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return a.reshape(n, c, -1).sum(axis=2).sum(axis=0)


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return np.einsum("nci,nci->c", a.reshape(n, c, -1), b.reshape(n, c, -1))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    mode: str = "train",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Spatial batch normalization.

    In train mode the running statistics arrays are updated in place.
    """
    _check4(x, "batchnorm2d input")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d affine params must have shape ({c},)")
    xd = x.data
    dt = xd.dtype
    bshape = (1, c, 1, 1)

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d train mode needs at least 2 values per channel")
        mean = _channel_sum(xd) / m
        xhat = xd - mean.reshape(bshape)
        var = _channel_dot(xhat, xhat) / m
        invstd = (1.0 / np.sqrt(var + eps)).astype(dt)
        xhat *= invstd.reshape(bshape)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
        if running_var is not None:
            running_var *= 1.0 - momentum
            running_var += momentum * var
        out = xhat * gamma.data.reshape(bshape)
        out += beta.data.reshape(bshape)

        def backward_fn(g: np.ndarray):
            gg = _channel_dot(g, xhat)
            gbeta = _channel_sum(g)
            gx = None
            if x.requires_grad:
                # gamma/(m*std) * (m*g - sum(g) - xhat*sum(g*xhat))
                gx = xhat * (-gg).reshape(bshape)
                gx += g * dt.type(m)
                gx -= gbeta.reshape(bshape)
                gx *= (gamma.data * invstd / m).astype(dt).reshape(bshape)
            return gx, gg, gbeta

    elif mode == "eval":
        if running_mean is None or running_var is None:
            raise StateError("batchnorm2d eval mode needs initialized running statistics")
        invstd = (1.0 / np.sqrt(running_var + eps)).astype(dt)
        scale = (gamma.data * invstd).astype(dt)
        shift = (beta.data - running_mean * scale).astype(dt)
        out = xd * scale.reshape(bshape)
        out += shift.reshape(bshape)

        def backward_fn(g: np.ndarray):
            gx = g * scale.reshape(bshape) if x.requires_grad else None
            xhat = (xd - running_mean.reshape(bshape)) * invstd.reshape(bshape)
            return gx, _channel_dot(g, xhat), _channel_sum(g)

    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    return record((x, gamma, beta), Tensor(out), backward_fn)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)

    def backward_fn(g: np.ndarray):
        gx = g * (out > 0)
        return (gx,)

    return record((x,), Tensor(out), backward_fn)


# --------------------------------------------------------------------------
# resampling and alignment


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; a trailing odd row/column is dropped."""
    _check4(x, "maxpool2x2 input")
    n, c, h, w = x.shape
    if h < 2 or w < 2:
        raise ShapeError(f"maxpool2x2 needs extents >= 2, got {h}x{w}")
    ho, wo = h // 2, w // 2
    xd = x.data
    # window members in row-major order: top-left, top-right, bottom-left, bottom-right
    views = [xd[:, :, i : 2 * ho : 2, j : 2 * wo : 2] for i in (0, 1) for j in (0, 1)]
    out = np.maximum(np.maximum(views[0], views[1]), np.maximum(views[2], views[3]))

    def backward_fn(g: np.ndarray):
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        # a position receives the gradient if it is the first maximum of its window
        taken = np.zeros(out.shape, dtype=bool)
        for (i, j), v in zip(((0, 0), (0, 1), (1, 0), (1, 1)), views):
            hit = v == out
            hit &= ~taken
            taken |= hit
            gx[:, :, i : 2 * ho : 2, j : 2 * wo : 2] = g * hit
        return (gx,)

    return record((x,), Tensor(out), backward_fn)


def upsample_nearest2x(x: Tensor) -> Tensor:
    _check4(x, "upsample_nearest2x input")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward_fn(g: np.ndarray):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record((x,), Tensor(out), backward_fn)


def crop_offsets(size: int, target: int) -> tuple[int, int]:
    """(start, stop) of a centred window; the extra odd pixel comes off the end."""
    diff = size - target
    start = diff // 2
    return start, start + target


def center_crop(x: Tensor, target_h: int, target_w: int) -> Tensor:
    _check4(x, "center_crop input")
    n, c, h, w = x.shape
    if target_h > h or target_w > w:
        raise ShapeError(f"cannot crop {h}x{w} to larger target {target_h}x{target_w}")
    if target_h < 1 or target_w < 1:
        raise ShapeError("crop target extents must be >= 1")
    if (target_h, target_w) == (h, w):
        return x
    r0, r1 = crop_offsets(h, target_h)
    c0, c1 = crop_offsets(w, target_w)
    out = Tensor(x.data[:, :, r0:r1, c0:c1].copy())

    def backward_fn(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, r0:r1, c0:c1] = g
        return (gx,)

    return record((x,), out, backward_fn)


# --------------------------------------------------------------------------
# combination and loss


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check4(a, "concat_channels input")
    _check4(b, "concat_channels input")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ShapeError(f"concat_channels needs matching N,H,W; got {a.shape} and {b.shape}")
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    return record((a, b), out, lambda g: (g[:, :ca], g[:, ca:]))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add needs identical shapes; got {a.shape} and {b.shape}")
    return record((a, b), Tensor(a.data + b.data), lambda g: (g, g))


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype))
    return record((x,), out, lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean of squared differences as a rank-0 tensor."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss needs identical shapes; got {pred.shape} and {target.shape}")
    diff = pred.data - target.data
    count = diff.size
    out = Tensor(np.asarray(np.mean(diff * diff), dtype=pred.dtype))

    def backward_fn(g: np.ndarray):
        gp = (2.0 / count) * g * diff
        return gp, -gp

    return record((pred, target), out, backward_fn)
