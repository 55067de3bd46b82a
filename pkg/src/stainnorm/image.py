"""Raster representation, PNG I/O and float conversions.

An RGB image is a ``uint8`` array of shape ``(height, width, 3)``; a float
image is a real array of shape ``(height, width, channels)``.  Plain numpy
arrays are used throughout so every module can share them without wrappers.
"""

from __future__ import annotations

import logging
import struct
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

UNIT = "unit"
SYMMETRIC = "symmetric"
SCALES = (UNIT, SYMMETRIC)

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_PNG_COLOR_TYPES = {0: "grayscale", 2: "truecolor", 3: "palette", 4: "grayscale+alpha", 6: "truecolor+alpha"}


class ImageFormatError(ValueError):
    """Raised when a file does not decode as an 8-bit RGB raster."""


def round_half_away(values: np.ndarray) -> np.ndarray:
    """Round to the nearest integer, ties away from zero."""
    values = np.asarray(values, dtype=np.float64)
    return np.copysign(np.floor(np.abs(values) + 0.5), values)


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Round half away from zero and saturate into ``0..255``.

    Saturating first is equivalent and cheaper: on ``[0, 255]`` rounding
    half away from zero is ``floor(v + 0.5)``.
    """
    out = np.clip(values, 0.0, 255.0, dtype=np.float64)
    out += 0.5
    np.floor(out, out=out)
    return out.astype(np.uint8)


def check_rgb(image: np.ndarray, name: str = "image") -> np.ndarray:
    image = np.asarray(image)
    if image.dtype != np.uint8 or image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"{name} must be a uint8 array of shape (H, W, 3), got {image.dtype} {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise ValueError(f"{name} must be at least 1x1")
    return image


def _png_header(path: Path) -> tuple[int, int] | None:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if not head.startswith(_PNG_SIGNATURE) or head[12:16] != b"IHDR":
        return None
    bit_depth, color_type = struct.unpack(">BB", head[24:26])
    return bit_depth, color_type


def load_image(path: str | Path) -> np.ndarray:
    """Load an 8-bit RGB image.

    PNG files are validated from their header: anything other than 8-bit
    truecolor (with or without alpha) is rejected.  An alpha channel is
    dropped with a warning.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    header = _png_header(path)
    if header is not None:
        bit_depth, color_type = header
        if color_type not in (2, 6):
            kind = _PNG_COLOR_TYPES.get(color_type, str(color_type))
            raise ImageFormatError(f"unsupported color type: {kind} ({path})")
        if bit_depth != 8:
            raise ImageFormatError(f"unsupported bit depth: {bit_depth} ({path})")
    with Image.open(path) as pil:
        mode = pil.mode
        if mode == "RGBA":
            logger.warning("dropping alpha channel of %s", path)
            pil = pil.convert("RGB")
        elif mode != "RGB":
            raise ImageFormatError(f"unsupported color type: {mode} ({path})")
        data = np.array(pil, dtype=np.uint8)
    return data


def save_image(image: np.ndarray, path: str | Path) -> None:
    """Write ``image`` as an 8-bit truecolor PNG."""
    image = check_rgb(image)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    Image.fromarray(np.ascontiguousarray(image), mode="RGB").save(path, format="PNG")


def _check_scale(scale: str) -> None:
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")


def scale_values(values: np.ndarray, scale: str = SYMMETRIC, dtype=np.float64) -> np.ndarray:
    """Map intensities on the 0..255 axis linearly onto ``scale``.

    Real-valued inputs are accepted so that lattice points of a lookup table
    go through exactly the same arithmetic as decoded pixels.
    """
    _check_scale(scale)
    values = np.asarray(values, dtype=np.float64)
    if scale == UNIT:
        out = values / 255.0
    else:
        out = values / 127.5 - 1.0
    return out.astype(dtype, copy=False)


def to_float(image: np.ndarray, scale: str = SYMMETRIC, dtype=np.float64) -> np.ndarray:
    """Convert an RGB image to floats on the unit or symmetric interval."""
    return scale_values(check_rgb(image), scale, dtype)


def from_float(image: np.ndarray, scale: str = SYMMETRIC) -> np.ndarray:
    """Clamp to ``scale``, map back to 0..255 and round half away from zero."""
    _check_scale(scale)
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected 3 channels, got shape {image.shape}")
    if scale == UNIT:
        values = np.clip(image, 0.0, 1.0)
        values *= 255.0
    else:
        values = np.clip(image, -1.0, 1.0)
        values += 1.0
        values *= 127.5
    # values already lie in [0, 255], where half-away rounding is floor(v + 0.5)
    values += 0.5
    np.floor(values, out=values)
    return values.astype(np.uint8)
