"""Synthetic ridge images, degradation steps and paired datasets.

A dataset directory holds ``clean_%04d.png`` / ``degraded_%04d.png`` pairs
plus ``manifest.csv`` recording the parameters drawn for each pair.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .images import PathLike, load_image, save_image


def synth_fingerprint(width: int, height: int, seed: int, ridge_frequency: float = 0.1) -> np.ndarray:
    """Concentric ridge pattern warped by a smooth random phase field."""
    if width < 32 or height < 32:
        raise ConfigError("synthetic images need extents >= 32")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cx = rng.uniform(0.3, 0.7) * width
    cy = rng.uniform(0.3, 0.7) * height
    aspect = rng.uniform(0.6, 1.0)  # elliptical core, taller than wide
    rho = np.hypot(xx - cx, (yy - cy) * aspect)
    scale = float(max(width, height))
    phase = np.zeros_like(rho)
    for _ in range(4):
        u, v = rng.uniform(-1.5, 1.5, size=2)
        amp = rng.uniform(2.0, 5.0)
        theta = rng.uniform(0, 2 * np.pi)
        phase += amp * np.sin(2 * np.pi * (u * xx + v * yy) / scale + theta)
    img = 0.5 + 0.5 * np.cos(2 * np.pi * ridge_frequency * rho + phase)
    return np.clip(img, 0.0, 1.0)


# --------------------------------------------------------------------------
# individual degradations; each maps [0, 1] images to [0, 1] images


def gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(img: np.ndarray, sigma: float) -> np.ndarray:
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel1d(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="reflect")
    out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.clip(out, 0.0, 1.0)


def brightness(img: np.ndarray, offset: float) -> np.ndarray:
    return np.clip(img + offset, 0.0, 1.0)


def contrast(img: np.ndarray, gain: float) -> np.ndarray:
    return np.clip((img - 0.5) * gain + 0.5, 0.0, 1.0)


def occlusion(img: np.ndarray, rng: np.random.Generator, count: int, size_min: int, size_max: int, fill: float) -> np.ndarray:
    out = img.copy()
    h, w = img.shape
    for _ in range(int(count)):
        rh = int(rng.integers(size_min, size_max + 1))
        rw = int(rng.integers(size_min, size_max + 1))
        top = int(rng.integers(0, max(1, h - rh + 1)))
        left = int(rng.integers(0, max(1, w - rw + 1)))
        out[top : top + rh, left : left + rw] = fill
    return out


def scratch(img: np.ndarray, rng: np.random.Generator, count: int, width: float, intensity: float) -> np.ndarray:
    out = img.copy()
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(count)):
        y0, y1 = rng.uniform(0, h, size=2)
        x0, x1 = rng.uniform(0, w, size=2)
        dy, dx = y1 - y0, x1 - x0
        length2 = dy * dy + dx * dx
        if length2 == 0:
            t = np.zeros_like(xx)
        else:
            t = np.clip(((yy - y0) * dy + (xx - x0) * dx) / length2, 0.0, 1.0)
        dist = np.hypot(yy - (y0 + t * dy), xx - (x0 + t * dx))
        out[dist <= width / 2.0] = intensity
    return out


def resolution(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-average ``factor x factor`` blocks, then replicate back."""
    factor = int(factor)
    if factor == 1:
        return img.copy()
    h, w = img.shape
    rows = np.arange(0, h, factor)
    cols = np.arange(0, w, factor)
    sums = np.add.reduceat(np.add.reduceat(img, rows, axis=0), cols, axis=1)
    counts = np.outer(np.diff(np.append(rows, h)), np.diff(np.append(cols, w)))
    small = sums / counts
    big = np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)
    return np.clip(big[:h, :w], 0.0, 1.0)


def rotation(img: np.ndarray, angle: float) -> np.ndarray:
    if angle == 0:
        return img.copy()
    out = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=1.0)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# degradation specs


STEP_PARAMS = {
    "blur": ("sigma",),
    "brightness": ("offset",),
    "contrast": ("gain",),
    "occlusion": ("count", "size_min", "size_max", "fill"),
    "scratch": ("count", "width", "intensity"),
    "resolution": ("factor",),
    "rotation": ("angle",),
}


@dataclass
class Step:
    kind: str
    params: dict
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in STEP_PARAMS:
            raise ConfigError(f"unknown degradation {self.kind!r}")
        missing = set(STEP_PARAMS[self.kind]) - set(self.params)
        extra = set(self.params) - set(STEP_PARAMS[self.kind])
        if missing or extra:
            raise ConfigError(f"{self.kind}: bad parameters (missing {sorted(missing)}, unknown {sorted(extra)})")
        p = self.params
        if self.kind == "blur" and p["sigma"] < 0:
            raise ConfigError("blur sigma must be >= 0")
        if self.kind == "contrast" and p["gain"] <= 0:
            raise ConfigError("contrast gain must be > 0")
        if self.kind == "resolution" and (int(p["factor"]) != p["factor"] or p["factor"] < 1):
            raise ConfigError("resolution factor must be an integer >= 1")
        if self.kind == "occlusion" and not 1 <= p["size_min"] <= p["size_max"]:
            raise ConfigError("occlusion needs 1 <= size_min <= size_max")
        if self.kind in ("occlusion", "scratch") and p["count"] < 0:
            raise ConfigError(f"{self.kind} count must be >= 0")
        if self.kind == "scratch" and p["width"] <= 0:
            raise ConfigError("scratch width must be > 0")
        for key in ("fill", "intensity"):
            if key in p and not 0.0 <= p[key] <= 1.0:
                raise ConfigError(f"{self.kind} {key} must lie in [0, 1]")


@dataclass
class DegradeSpec:
    steps: list = field(default_factory=list)

    def validate(self) -> None:
        for step in self.steps:
            step.validate()


def apply_step(img: np.ndarray, step: Step) -> np.ndarray:
    p = step.params
    rng = np.random.default_rng(step.seed)
    if step.kind == "blur":
        return blur(img, p["sigma"])
    if step.kind == "brightness":
        return brightness(img, p["offset"])
    if step.kind == "contrast":
        return contrast(img, p["gain"])
    if step.kind == "occlusion":
        return occlusion(img, rng, p["count"], p["size_min"], p["size_max"], p["fill"])
    if step.kind == "scratch":
        return scratch(img, rng, p["count"], p["width"], p["intensity"])
    if step.kind == "resolution":
        return resolution(img, p["factor"])
    return rotation(img, p["angle"])


def apply_degradations(img: np.ndarray, spec: DegradeSpec) -> np.ndarray:
    """Apply the steps of ``spec`` in order."""
    spec.validate()
    out = np.asarray(img, dtype=np.float64)
    for step in spec.steps:
        out = apply_step(out, step)
    return out


# --------------------------------------------------------------------------
# datasets

# (lo, hi) ranges are sampled per pair: ints inclusive, floats uniform
DEFAULT_TEMPLATE = {
    "blur": {"sigma": (0.5, 1.5)},
    "brightness": {"offset": (-0.15, 0.15)},
    "contrast": {"gain": (0.6, 1.2)},
    "occlusion": {"count": (1, 3), "size_min": 8, "size_max": 32, "fill": (0.0, 1.0)},
    "scratch": {"count": (1, 4), "width": (1.0, 3.0), "intensity": (0.0, 1.0)},
    "resolution": {"factor": (1, 2)},
    "rotation": {"angle": (-2.0, 2.0)},
}


def _draw(value, rng: np.random.Generator):
    if isinstance(value, (tuple, list)):
        lo, hi = value
        if isinstance(lo, int) and isinstance(hi, int):
            return int(rng.integers(lo, hi + 1))
        return float(rng.uniform(lo, hi))
    return value


def sample_spec(template: dict, seed: int) -> DegradeSpec:
    rng = np.random.default_rng(seed)
    steps = []
    for kind, ranges in template.items():
        params = {name: _draw(ranges[name], rng) for name in STEP_PARAMS.get(kind, ranges)}
        steps.append(Step(kind, params, seed=int(rng.integers(0, 2**31 - 1))))
    spec = DegradeSpec(steps)
    spec.validate()
    return spec


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else format(v, ".10g")


def build_dataset(
    count: int,
    image_size: int,
    seed: int,
    out_dir: PathLike,
    spec_template: Optional[dict] = None,
    ridge_frequency: float = 0.1,
) -> list[dict]:
    """Write ``count`` clean/degraded pairs and their manifest; returns the manifest rows."""
    template = DEFAULT_TEMPLATE if spec_template is None else spec_template
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    columns = ["index", "seed"] + [f"{kind}_{name}" for kind in template for name in STEP_PARAMS.get(kind, ())]
    rows = []
    for index in range(count):
        pair_seed = seed + index
        clean = synth_fingerprint(image_size, image_size, pair_seed, ridge_frequency)
        spec = sample_spec(template, pair_seed)
        degraded = apply_degradations(clean, spec)
        save_image(clean, out / f"clean_{index:04d}.png")
        save_image(degraded, out / f"degraded_{index:04d}.png")
        row = {"index": index, "seed": pair_seed}
        for step in spec.steps:
            for name, value in step.params.items():
                row[f"{step.kind}_{name}"] = value
        rows.append(row)
    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])
    return rows


def load_pairs(data_dir: PathLike) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(id, degraded, clean) for every pair in a dataset directory, sorted by id."""
    root = Path(data_dir)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    clean = {p.name[len("clean_"):]: p for p in root.glob("clean_*") if p.suffix.lower() in (".png", ".pgm")}
    degraded = {p.name[len("degraded_"):]: p for p in root.glob("degraded_*") if p.suffix.lower() in (".png", ".pgm")}
    unmatched = sorted(set(clean) ^ set(degraded))
    if unmatched:
        raise DataError(f"{root}: unpaired files {unmatched}")
    pairs = []
    for key in sorted(clean):
        d, c = load_image(degraded[key]), load_image(clean[key])
        if d.shape != c.shape:
            raise DataError(f"{root}: pair {key} has mismatched extents {d.shape} vs {c.shape}")
        pairs.append((Path(key).stem, d, c))
    return pairs
