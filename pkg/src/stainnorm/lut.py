"""Dense 3D lookup tables baked from fully 1x1 networks.

A 256-point table enumerates every 8-bit color and reproduces direct
inference exactly; 33- and 64-point tables are trilinearly interpolated in
output-byte space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import SYMMETRIC, check_rgb, from_float, round_half_away, scale_values
from .pixelnet import PixelNet, SpatialKernelError, forward

SIZES = (33, 64, 256)
MAGIC = b"STAINLUT3D\x00\x00"
VERSION = 1
HEADER = struct.Struct("<12sI")


@dataclass(frozen=True)
class Lut3D:
    size: int
    table: np.ndarray  # (size, size, size, 3) uint8, indexed [r, g, b]

    def __post_init__(self):
        if self.size not in SIZES:
            raise ValueError(f"LUT size must be one of {SIZES}, got {self.size}")
        table = np.ascontiguousarray(self.table, dtype=np.uint8)
        if table.shape != (self.size,) * 3 + (3,):
            raise ValueError(f"table shape {table.shape} does not match size {self.size}")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def lattice(self) -> np.ndarray:
        return 255.0 * np.arange(self.size) / (self.size - 1)


def bake_lut(net: PixelNet, size: int = 256, precision: int = 32) -> Lut3D:
    """Tabulate ``net`` on the uniform lattice over 0..255 in each channel."""
    if not net.pointwise:
        raise SpatialKernelError()
    if size not in SIZES:
        raise ValueError(f"LUT size must be one of {SIZES}, got {size}")
    axis = 255.0 * np.arange(size) / (size - 1)
    g, b = np.meshgrid(axis, axis, indexing="ij")
    table = np.empty((size, size, size, 3), dtype=np.uint8)
    plane = np.empty((size, size, 3))
    plane[..., 1] = g
    plane[..., 2] = b
    for i, r in enumerate(axis):
        plane[..., 0] = r
        out = forward(net, scale_values(plane, SYMMETRIC), precision)
        table[i] = from_float(out, SYMMETRIC)
    return Lut3D(size, table)


def apply_lut(lut: Lut3D, image: np.ndarray) -> np.ndarray:
    image = check_rgb(image)
    n = lut.size
    if n == 256:
        flat = lut.table.reshape(-1, 3)
        idx = (image[..., 0].astype(np.intp) << 16) | (image[..., 1].astype(np.intp) << 8) | image[..., 2]
        return flat[idx]
    t = image.astype(np.float64) * ((n - 1) / 255.0)
    i0 = np.minimum(np.floor(t).astype(np.intp), n - 2)
    f = t - i0
    table = lut.table.astype(np.float64)
    r0, g0, b0 = i0[..., 0], i0[..., 1], i0[..., 2]
    fr, fg, fb = (f[..., c : c + 1] for c in range(3))
    acc = np.zeros(image.shape, dtype=np.float64)
    for dr, wr in ((0, 1 - fr), (1, fr)):
        for dg, wg in ((0, 1 - fg), (1, fg)):
            for db, wb in ((0, 1 - fb), (1, fb)):
                acc += (wr * wg * wb) * table[r0 + dr, g0 + dg, b0 + db]
    return np.clip(round_half_away(acc), 0, 255).astype(np.uint8)


def save_lut(lut: Lut3D, path: str | Path) -> None:
    """Binary layout: 16-byte magic+version, uint32 LE size, r-major table bytes."""
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION))
        fh.write(struct.pack("<I", lut.size))
        fh.write(lut.table.tobytes())


def load_lut(path: str | Path) -> Lut3D:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size + 4:
        raise ValueError("truncated LUT file")
    magic, version = HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise ValueError("not a LUT file of a supported version")
    (size,) = struct.unpack_from("<I", data, HEADER.size)
    body = data[HEADER.size + 4 :]
    if size not in SIZES or len(body) != size**3 * 3:
        raise ValueError(f"LUT body does not match size {size}")
    return Lut3D(size, np.frombuffer(body, dtype=np.uint8).reshape(size, size, size, 3))


def write_cube(lut: Lut3D, path: str | Path, title: str = "stainnorm") -> None:
    """Export as text ``.cube`` (red index varies fastest)."""
    values = lut.table.transpose(2, 1, 0, 3).reshape(-1, 3) / 255.0
    with open(path, "w") as fh:
        fh.write(f'TITLE "{title}"\n')
        fh.write(f"LUT_3D_SIZE {lut.size}\n")
        fh.write("DOMAIN_MIN 0.0 0.0 0.0\nDOMAIN_MAX 1.0 1.0 1.0\n")
        for r, g, b in values:
            fh.write(f"{r:.6f} {g:.6f} {b:.6f}\n")


def read_cube(path: str | Path) -> Lut3D:
    size = None
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()[0]
        if head == "LUT_3D_SIZE":
            size = int(line.split()[1])
        elif head[0].isdigit() or head[0] in "-.":
            rows.append([float(v) for v in line.split()])
    if size is None:
        raise ValueError("missing LUT_3D_SIZE")
    values = np.asarray(rows).reshape(size, size, size, 3).transpose(2, 1, 0, 3)
    return Lut3D(size, np.clip(round_half_away(values * 255.0), 0, 255).astype(np.uint8))
