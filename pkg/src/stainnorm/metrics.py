"""SSIM, PSNR and the target/source similarity scores used to compare normalizers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import serialization
from .image import check_rgb

BT601 = (0.299, 0.587, 0.114)
REPORT_COLUMNS = ("method", "ssim_target", "psnr_target", "ssim_source", "fps")


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 255.0

    def __post_init__(self):
        if self.k1 <= 0 or self.k2 <= 0:
            raise ValueError("k1 and k2 must be positive")
        if self.window_size < 1 or self.sigma <= 0:
            raise ValueError("invalid window")

    def window(self) -> np.ndarray:
        """Normalized 1-D Gaussian; the 2-D window is its outer product."""
        x = np.arange(self.window_size) - (self.window_size - 1) / 2.0
        g = np.exp(-(x * x) / (2.0 * self.sigma**2))
        return g / g.sum()


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB over all pixels and channels; ``inf`` for identical images."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0**2 / mse)


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = sliding_window_view(x, k, axis=1) @ g
    return sliding_window_view(rows, k, axis=0) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError(f"expected two single-channel images of equal size, got {a.shape} and {b.shape}")
    if min(a.shape) < cfg.window_size:
        raise ValueError(f"image {a.shape} is smaller than the {cfg.window_size}x{cfg.window_size} window")
    g = cfg.window()
    c1 = (cfg.k1 * cfg.dynamic_range) ** 2
    c2 = (cfg.k2 * cfg.dynamic_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean SSIM over valid-mode Gaussian windows of two single-channel images."""
    return float(np.mean(ssim_map(a, b, cfg)))


def ssim_rgb(a: np.ndarray, b: np.ndarray, cfg: SsimConfig = SsimConfig()) -> float:
    """Mean of the per-channel SSIM over R, G and B."""
    a = check_rgb(a, "a")
    b = check_rgb(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean([ssim(a[..., c], b[..., c], cfg) for c in range(3)]))


def grayscale(image: np.ndarray, weights=BT601) -> np.ndarray:
    image = check_rgb(image)
    w = np.asarray(weights, dtype=np.float64)
    return image.astype(np.float64) @ w


def linear_stretch(image: np.ndarray) -> np.ndarray:
    """Affinely map the value range onto 0..255; constant images become zeros."""
    image = np.asarray(image, dtype=np.float64)
    lo = image.min()
    hi = image.max()
    if hi == lo:
        return np.zeros_like(image)
    return (image - lo) * (255.0 / (hi - lo))


def ssim_source(normalized: np.ndarray, source: np.ndarray, cfg: SsimConfig = SsimConfig(), weights=BT601) -> float:
    """SSIM between the stretched grayscale versions of both images."""
    if np.shape(normalized) != np.shape(source):
        raise ValueError(f"dimension mismatch: {np.shape(normalized)} vs {np.shape(source)}")
    return ssim(
        linear_stretch(grayscale(normalized, weights)),
        linear_stretch(grayscale(source, weights)),
        cfg,
    )


@dataclass
class MetricRow:
    method: str
    ssim_target: float
    psnr_target: float
    ssim_source: float
    fps: float | None = None

    def values(self) -> list:
        return [self.method, self.ssim_target, self.psnr_target, self.ssim_source, self.fps]


@dataclass
class MetricReport:
    rows: list[MetricRow] = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for row in self.rows:
            writer.writerow([_csv_cell(v) for v in row.values()])
        return buf.getvalue()

    def to_json(self) -> str:
        return serialization.dumps([dict(zip(REPORT_COLUMNS, r.values())) for r in self.rows])

    def write(self, path: str | Path) -> None:
        path = Path(path)
        text = self.to_json() + "\n" if path.suffix == ".json" else self.to_csv()
        path.write_text(text)

    def table(self) -> str:
        lines = [f"{'Methods':<14}{'SSIM Target':>12}{'PSNR Target':>13}{'SSIM Source':>13}{'FPS':>10}"]
        for r in self.rows:
            fps = "-" if r.fps is None else f"{r.fps:.1f}"
            lines.append(f"{r.method:<14}{r.ssim_target:>12.3f}{r.psnr_target:>13.1f}{r.ssim_source:>13.3f}{fps:>10}")
        return "\n".join(lines)


def _csv_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(value)
    return str(value)


def evaluate(method: str, normalized: list, targets: list, sources: list, cfg: SsimConfig = SsimConfig(), fps=None) -> MetricRow:
    """Average SSIM Target, PSNR Target and SSIM Source over aligned image lists."""
    if not (len(normalized) == len(targets) == len(sources)) or not normalized:
        raise ValueError("image lists must be non-empty and of equal length")
    st = [ssim_rgb(n, t, cfg) for n, t in zip(normalized, targets)]
    pt = [psnr(n, t) for n, t in zip(normalized, targets)]
    ss = [ssim_source(n, s, cfg) for n, s in zip(normalized, sources)]
    return MetricRow(method, float(np.mean(st)), float(np.mean(pt)), float(np.mean(ss)), fps)
