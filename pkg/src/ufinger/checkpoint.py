"""Binary checkpoint format (little-endian).

Layout::

    b"UFGR"                       magic
    u32 version (= 1)
    u32 scales, u32 dilation, u8 padding (0 valid, 1 same), u8 fusion (0 concat, 1 sum)
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 rank, u32 extent * rank, f32 payload
    u32 CRC-32 of every preceding byte

Entries are all parameters followed by all batch-norm running statistics.
"""

from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, IntegrityError
from .net import Model, NetworkConfig, build

MAGIC = b"UFGR"
VERSION = 1

_PADDING = {"valid": 0, "same": 1}
_FUSION = {"concat": 0, "sum": 1}


def to_bytes(m: Model) -> bytes:
    cfg = m.config
    parts = [
        MAGIC,
        struct.pack("<IIIBB", VERSION, cfg.scales, cfg.dilation, _PADDING[cfg.padding_mode], _FUSION[cfg.fusion]),
    ]
    state = m.state()
    parts.append(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(blob: bytes) -> Model:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("not a checkpoint: bad magic")
    if len(blob) < 8:
        raise IntegrityError("checkpoint truncated inside header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    if len(blob) < 4 + 14 + 4 + 4:
        raise IntegrityError("checkpoint truncated inside header")
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != crc:
        raise IntegrityError("checkpoint CRC mismatch (corrupted or truncated)")

    _, scales, dilation, pad, fusion = struct.unpack_from("<IIIBB", blob, 4)
    try:
        padding_mode = {v: k for k, v in _PADDING.items()}[pad]
        fusion_mode = {v: k for k, v in _FUSION.items()}[fusion]
        cfg = NetworkConfig(scales=scales, dilation=dilation, padding_mode=padding_mode, fusion=fusion_mode)
    except (KeyError, ValueError) as exc:
        raise FormatError(f"invalid config block: {exc}") from None

    model = build(cfg, seed=0, dtype=np.float32)
    expected = model.state()
    pos = 4 + 14
    end = len(blob) - 4
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if count != len(expected):
            raise IntegrityError(f"checkpoint has {count} entries, config implies {len(expected)}")
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            if name not in expected:
                raise IntegrityError(f"unexpected entry {name!r}")
            if tuple(shape) != expected[name].shape:
                raise IntegrityError(f"entry {name!r} has shape {shape}, expected {expected[name].shape}")
            nbytes = 4 * int(np.prod(shape))
            if pos + nbytes > end:
                raise IntegrityError("checkpoint truncated inside payload")
            arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
            pos += nbytes
            if name in model.params:
                model.params[name].data = arr.astype(np.float32)
            else:
                model.buffers[name][...] = arr
    except struct.error:
        raise IntegrityError("checkpoint truncated") from None
    except UnicodeDecodeError:
        raise IntegrityError("entry name is not valid UTF-8") from None
    if pos != end:
        raise IntegrityError(f"{end - pos} trailing bytes after last entry")
    return model


def save_checkpoint(m: Model, path: Union[str, os.PathLike]) -> None:
    Path(path).write_bytes(to_bytes(m))


def load_checkpoint(path: Union[str, os.PathLike]) -> Model:
    return from_bytes(Path(path).read_bytes())
