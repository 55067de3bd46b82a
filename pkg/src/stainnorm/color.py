"""Optical density and l-alpha-beta conversions."""

from __future__ import annotations

import numpy as np

from .image import to_uint8

DEFAULT_I0 = 255.0

# Reinhard et al. (2001) color-transfer matrices.
RGB_TO_LMS = np.array(
    [
        [0.3811, 0.5783, 0.0402],
        [0.1967, 0.7244, 0.0782],
        [0.0241, 0.1288, 0.8444],
    ]
)
LMS_TO_RGB = np.linalg.inv(RGB_TO_LMS)
LOG_LMS_TO_LAB = np.diag([1.0 / np.sqrt(3.0), 1.0 / np.sqrt(6.0), 1.0 / np.sqrt(2.0)]) @ np.array(
    [
        [1.0, 1.0, 1.0],
        [1.0, 1.0, -2.0],
        [1.0, -1.0, 0.0],
    ]
)
LAB_TO_LOG_LMS = np.linalg.inv(LOG_LMS_TO_LAB)

LMS_FLOOR = 1.0 / 255.0


def rgb_to_od(image: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Optical density ``-log10(max(I, 1) / i0)`` per channel.

    Accepts 8-bit images or real-valued intensities.
    """
    if i0 <= 0:
        raise ValueError("i0 must be positive")
    intensity = np.maximum(np.asarray(image, dtype=np.float64), 1.0)
    return -np.log10(intensity / i0)


def od_to_rgb(od: np.ndarray, i0: float = DEFAULT_I0) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, clamped and rounded to 8 bits."""
    return to_uint8(i0 * np.power(10.0, -np.asarray(od, dtype=np.float64)))


def rgb_to_lab(image: np.ndarray) -> np.ndarray:
    """RGB to l-alpha-beta: linear LMS, log10 (floored at 1/255), decorrelation."""
    rgb = np.asarray(image, dtype=np.float64) / 255.0
    lms = rgb @ RGB_TO_LMS.T
    np.maximum(lms, LMS_FLOOR, out=lms)
    return np.log10(lms) @ LOG_LMS_TO_LAB.T


def rgb_to_log_lms_planar(image: np.ndarray) -> np.ndarray:
    """Floored ``log10`` LMS as a ``(3, N)`` array, one contiguous row per cone."""
    rgb = np.asarray(image).reshape(-1, 3).T.astype(np.float64)
    rgb *= 1.0 / 255.0
    lms = RGB_TO_LMS @ rgb
    np.maximum(lms, LMS_FLOOR, out=lms)
    return np.log10(lms, out=lms)


def log_lms_planar_to_rgb(log_lms: np.ndarray, shape: tuple) -> np.ndarray:
    """Inverse of :func:`rgb_to_log_lms_planar`, rounded to 8 bits.  Consumes ``log_lms``."""
    lms = np.power(10.0, log_lms, out=log_lms)
    rgb = (255.0 * LMS_TO_RGB) @ lms
    return to_uint8(rgb.T).reshape(shape)


def lab_to_rgb_float(lab: np.ndarray) -> np.ndarray:
    """Algebraic inverse of :func:`rgb_to_lab` on the 0..255 axis, unclamped."""
    lms = np.power(10.0, np.asarray(lab, dtype=np.float64) @ LAB_TO_LOG_LMS.T)
    return (lms @ LMS_TO_RGB.T) * 255.0


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    return to_uint8(lab_to_rgb_float(lab))
