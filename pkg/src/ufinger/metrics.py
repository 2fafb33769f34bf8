"""MSE, PSNR and SSIM for grayscale images in [0, 1], plus report files."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, DomainError, ShapeError
from .images import PathLike, list_images, load_image

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01**2
C2 = 0.03**2

KNOWN_PREFIXES = ("clean_", "degraded_", "restored_")


def mse(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mse needs identical extents; got {a.shape} and {b.shape}")
    d = np.clip(a, 0.0, 1.0) - np.clip(b, 0.0, 1.0)
    return float(np.mean(d * d))


def psnr(mse_value: float) -> float:
    """Peak signal-to-noise ratio in dB for peak 1; +inf when the error is 0."""
    if mse_value < 0 or math.isnan(mse_value):
        raise DomainError(f"psnr needs mse >= 0, got {mse_value}")
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse_value)


def _gaussian1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2-D Gaussian; SSIM applies it separably."""
    g = _gaussian1d(size, sigma)
    return np.outer(g, g)


def _filter_valid(img: np.ndarray, g1: np.ndarray) -> np.ndarray:
    """Separable correlation at valid window positions only."""
    k = g1.size
    rows = sliding_window_view(img, k, axis=0) @ g1
    return sliding_window_view(rows, k, axis=1) @ g1


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"ssim needs identical extents; got {a.shape} and {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"ssim needs extents >= {SSIM_WINDOW}, got {a.shape}")
    x = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    y = np.clip(np.asarray(b, dtype=np.float64), 0.0, 1.0)
    g1 = _gaussian1d(SSIM_WINDOW, SSIM_SIGMA)
    mx, my = _filter_valid(x, g1), _filter_valid(y, g1)
    sxx = _filter_valid(x * x, g1) - mx * mx
    syy = _filter_valid(y * y, g1) - my * my
    sxy = _filter_valid(x * y, g1) - mx * my
    num = (2 * mx * my + C1) * (2 * sxy + C2)
    den = (mx * mx + my * my + C1) * (sxx + syy + C2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5)."""
    return float(np.mean(ssim_map(a, b)))


def center_align(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Centre-crop both images to their common (smaller) extents."""
    h = min(a.shape[0], b.shape[0])
    w = min(a.shape[1], b.shape[1])

    def crop(x):
        top = (x.shape[0] - h) // 2
        left = (x.shape[1] - w) // 2
        return x[top : top + h, left : left + w]

    return crop(a), crop(b)


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricsRow:
    id: str
    mse: float
    psnr_db: float
    ssim: float


@dataclass
class MetricsReport:
    label: str
    rows: list = field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return float(np.mean([r.mse for r in self.rows])) if self.rows else math.nan

    @property
    def mean_psnr(self) -> float:
        # per-image PSNR averaged, not PSNR of the mean error
        return float(np.mean([r.psnr_db for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def add(self, image_id: str, restored: np.ndarray, truth: np.ndarray) -> MetricsRow:
        r, t = center_align(restored, truth)
        e = mse(r, t)
        row = MetricsRow(image_id, e, psnr(e), ssim(r, t))
        self.rows.append(row)
        return row

    def write_csv(self, path: PathLike) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "mse", "psnr_db", "ssim"])
            for r in self.rows:
                w.writerow([r.id, _num(r.mse), _num(r.psnr_db), _num(r.ssim)])
            w.writerow(["AGGREGATE", _num(self.mean_mse), _num(self.mean_psnr), _num(self.mean_ssim)])


def _num(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".6f")


def format_table(reports: list, title: str = "MSE, PSNR and SSIM", header: Optional[str] = None) -> str:
    """Plain-text block with one row per report."""
    width = max([len(r.label) for r in reports] + [10])
    lines = [title]
    if header:
        lines.append(header)
    lines.append(f"{'':<{width}}  {'MSE':>10}  {'PSNR':>9}  {'SSIM':>8}")
    for r in reports:
        lines.append(f"{r.label:<{width}}  {_num(r.mean_mse):>10}  {_num(r.mean_psnr):>9}  {_num(r.mean_ssim):>8}")
    return "\n".join(lines) + "\n"


def pairing_key(name: str) -> str:
    stem = Path(name).stem
    for prefix in KNOWN_PREFIXES:
        if stem.startswith(prefix):
            return stem[len(prefix):]
    return stem


def _select(directory: PathLike, *preferred: str) -> dict:
    files = list_images(directory)
    for prefix in preferred:
        chosen = [p for p in files if p.name.startswith(prefix)]
        if chosen:
            break
    else:
        chosen = files
    out = {}
    for p in chosen:
        key = pairing_key(p.name)
        if key in out:
            raise DataError(f"{directory}: {out[key].name} and {p.name} share id {key!r}")
        out[key] = p
    return out


def evaluate_pairs(restored_dir: PathLike, truth_dir: PathLike, label: str = "") -> MetricsReport:
    """Score every restored image against the ground truth of the same id.

    Ids are filenames with any ``clean_``/``degraded_``/``restored_`` prefix
    and the suffix removed. On the restored side ``restored_*`` files are used
    if present, then ``clean_*``; on the truth side ``clean_*``; otherwise all
    images in the directory.
    """
    restored = _select(restored_dir, "restored_", "clean_")
    truth = _select(truth_dir, "clean_")
    offenders = sorted(set(restored) ^ set(truth))
    if offenders:
        raise DataError(f"unmatched files between {restored_dir} and {truth_dir}: {offenders}")
    report = MetricsReport(label)
    for key in sorted(restored):
        report.add(key, load_image(restored[key]), load_image(truth[key]))
    return report
