"""Throughput of per-image normalization, excluding I/O and one-off fitting."""

from __future__ import annotations

import csv
import hashlib
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from threadpoolctl import threadpool_limits

from . import conventional as conv
from .lut import Lut3D, apply_lut
from .pixelnet import PixelNet, normalize_image

CSV_COLUMNS = ("method", "threads", "precision", "fit_ms", "fps", "p50_ms", "p95_ms")


@dataclass
class BenchResult:
    method: str
    images: int
    elapsed_s: float
    fps: float
    p50_ms: float
    p95_ms: float
    fit_ms: float = 0.0
    threads: int = 1
    precision: str = "64"
    processed: int = 0

    def csv_row(self) -> list:
        return [self.method, self.threads, self.precision, f"{self.fit_ms:.3f}", f"{self.fps:.3f}", f"{self.p50_ms:.3f}", f"{self.p95_ms:.3f}"]


def _digest(image: np.ndarray) -> bytes:
    return hashlib.blake2b(np.ascontiguousarray(image).tobytes(), digest_size=16).digest()


def measure_fps(
    method: Callable[[np.ndarray], np.ndarray],
    images: list[np.ndarray],
    warmup: int = 5,
    reps: int = 3,
    name: str = "method",
    fit_ms: float = 0.0,
    threads: int = 1,
    precision: str = "64",
) -> BenchResult:
    """Time ``method`` over preloaded images.

    Warmup calls are untimed.  Each rep times every image separately with a
    monotonic clock; outputs are hashed outside the timed region and must not
    change between reps.  The reported FPS is the image count over the median
    rep time.
    """
    if not images:
        raise ValueError("empty image list")
    if reps < 1 or warmup < 0:
        raise ValueError("reps must be >= 1 and warmup >= 0")
    processed = 0
    rep_times = []
    latencies = []
    reference = None
    with threadpool_limits(limits=threads):
        for i in range(warmup):
            method(images[i % len(images)])
            processed += 1
        for _ in range(reps):
            digests = []
            total = 0.0
            for img in images:
                t0 = time.perf_counter()
                out = method(img)
                dt = time.perf_counter() - t0
                total += dt
                latencies.append(dt)
                digests.append(_digest(out))
                processed += 1
            if reference is None:
                reference = digests
            elif digests != reference:
                raise RuntimeError(f"{name}: outputs changed between repetitions")
            rep_times.append(total)
    elapsed = float(np.median(rep_times))
    lat_ms = np.asarray(latencies) * 1e3
    return BenchResult(
        method=name,
        images=len(images),
        elapsed_s=elapsed,
        fps=len(images) / elapsed,
        p50_ms=float(np.percentile(lat_ms, 50)),
        p95_ms=float(np.percentile(lat_ms, 95)),
        fit_ms=fit_ms,
        threads=threads,
        precision=precision,
        processed=processed,
    )


def make_normalizer(
    method: str,
    reference: np.ndarray | None = None,
    net: PixelNet | None = None,
    lut: Lut3D | None = None,
    precision: int = 32,
) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    """Build a per-image callable; returns it with the setup time in milliseconds."""
    t0 = time.perf_counter()
    if method in conv.METHODS:
        if reference is None:
            raise ValueError(f"{method} needs a reference image")
        model = conv.fit_reference(method, reference)
        fn = lambda img: conv.normalize_with(method, img, model)  # noqa: E731
    elif method == "pixelnet":
        if net is None:
            raise ValueError("pixelnet needs a network")
        fn = lambda img: normalize_image(net, img, precision)  # noqa: E731
    elif method == "lut":
        if lut is None:
            raise ValueError("lut needs a table")
        fn = lambda img: apply_lut(lut, img)  # noqa: E731
    else:
        raise ValueError(f"unknown method {method!r}")
    return fn, (time.perf_counter() - t0) * 1e3


def append_csv(results: list[BenchResult], path: str | Path) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(CSV_COLUMNS)
        for r in results:
            writer.writerow(r.csv_row())


def format_table(results: list[BenchResult]) -> str:
    lines = [f"{'Methods':<12}{'threads':>8}{'precision':>10}{'fit ms':>10}{'FPS':>10}{'p50 ms':>10}{'p95 ms':>10}"]
    for r in results:
        lines.append(
            f"{r.method:<12}{r.threads:>8}{r.precision:>10}{r.fit_ms:>10.1f}{r.fps:>10.1f}{r.p50_ms:>10.2f}{r.p95_ms:>10.2f}"
        )
    lines.append(f"cpu count: {os.cpu_count()}")
    return "\n".join(lines)
