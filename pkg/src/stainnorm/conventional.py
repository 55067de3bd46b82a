"""Reference-image baselines: Reinhard, Macenko and Vahadane.

Reinhard matches per-channel statistics in l-alpha-beta space.  Macenko and
Vahadane estimate a two-stain model in optical density space, either from
the extreme angles of the OD cloud in its principal plane (Macenko) or from
a sparse non-negative factorization (Vahadane).  Stain models are applied
through :func:`stain_normalize`, which swaps stain vectors and rescales
concentrations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import serialization
from .color import (
    DEFAULT_I0,
    LAB_TO_LOG_LMS,
    LOG_LMS_TO_LAB,
    log_lms_planar_to_rgb,
    od_to_rgb,
    rgb_to_lab,
    rgb_to_log_lms_planar,
    rgb_to_od,
)
from .image import check_rgb

REINHARD_EPS = 1e-6
MIN_TISSUE_PIXELS = 100
DEGENERATE_RATIO = 1e-6

METHODS = ("reinhard", "macenko", "vahadane")


class InsufficientTissueError(ValueError):
    pass


class DegenerateStainError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Reinhard


@dataclass(frozen=True)
class ReinhardParams:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        std = np.asarray(self.std, dtype=np.float64).reshape(3)
        if np.any(std < REINHARD_EPS):
            raise ValueError("std components must be >= eps")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def to_dict(self) -> dict:
        return {"method": "reinhard", "mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "ReinhardParams":
        if doc.get("method") != "reinhard":
            raise ValueError(f"not a Reinhard model: {doc.get('method')!r}")
        return cls(
            mean=[serialization.parse_real(v) for v in doc["mean"]],
            std=[serialization.parse_real(v) for v in doc["std"]],
        )


def _lab_stats(lab: np.ndarray) -> ReinhardParams:
    flat = lab.reshape(-1, 3)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), REINHARD_EPS)
    return ReinhardParams(mean, std)


def reinhard_fit(reference: np.ndarray) -> ReinhardParams:
    """Per-channel mean and population std of ``reference`` in l-alpha-beta."""
    return _lab_stats(rgb_to_lab(check_rgb(reference, "reference")))


def reinhard_normalize(source: np.ndarray, ref_params: ReinhardParams) -> np.ndarray:
    """Match per-channel l-alpha-beta mean and std of ``source`` to the reference.

    l-alpha-beta is a linear map ``L`` of log-LMS, so the statistics follow
    from the log-LMS mean and covariance, and the per-channel affine map
    folds into one 3x3 map ``L^-1 diag(s) L`` applied directly in log-LMS.
    """
    source = check_rgb(source, "source")
    x = rgb_to_log_lms_planar(source)
    mu = x.mean(axis=1)
    x -= mu[:, None]
    cov = (x @ x.T) / x.shape[1]
    src_std = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", LOG_LMS_TO_LAB, cov, LOG_LMS_TO_LAB), 0.0))
    scale = np.asarray(ref_params.std) / np.maximum(src_std, REINHARD_EPS)
    m = LAB_TO_LOG_LMS @ (scale[:, None] * LOG_LMS_TO_LAB)
    y = m @ x
    y += (LAB_TO_LOG_LMS @ np.asarray(ref_params.mean))[:, None]
    return log_lms_planar_to_rgb(y, source.shape)


# --------------------------------------------------------------------------
# Stain models


@dataclass(frozen=True)
class StainModel:
    """Two OD-space stain vectors (columns) and robust maximum concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray
    method: str = "macenko"

    def __post_init__(self):
        w = np.array(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        c = np.array(self.max_concentrations, dtype=np.float64).reshape(2)
        if np.any(w < 0):
            raise ValueError("stain vectors must be non-negative")
        if not np.allclose(np.linalg.norm(w, axis=0), 1.0, atol=1e-9):
            raise ValueError("stain vectors must have unit norm")
        if np.any(c < 0):
            raise ValueError("max concentrations must be non-negative")
        w.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "stain_matrix", w)
        object.__setattr__(self, "max_concentrations", c)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "stain_matrix": self.stain_matrix.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StainModel":
        w = [[serialization.parse_real(v) for v in row] for row in doc["stain_matrix"]]
        c = [serialization.parse_real(v) for v in doc["max_concentrations"]]
        return cls(w, c, doc.get("method", "macenko"))


def save_model(model: StainModel | ReinhardParams, path: str | Path) -> None:
    serialization.write_json(model.to_dict(), path)


def load_model(path: str | Path) -> StainModel | ReinhardParams:
    doc = serialization.read_json(path)
    if doc.get("method") == "reinhard":
        return ReinhardParams.from_dict(doc)
    return StainModel.from_dict(doc)


@dataclass(frozen=True)
class MacenkoConfig:
    i0: float = DEFAULT_I0
    od_threshold: float = 0.15
    angle_percentile: float = 1.0
    conc_percentile: float = 99.0

    def __post_init__(self):
        if not 0 < self.angle_percentile < 50:
            raise ValueError("angle_percentile must be in (0, 50)")
        if not 50 < self.conc_percentile < 100:
            raise ValueError("conc_percentile must be in (50, 100)")
        if self.od_threshold <= 0 or self.i0 <= 0:
            raise ValueError("od_threshold and i0 must be positive")


@dataclass(frozen=True)
class VahadaneConfig:
    sparsity: float = 0.1
    n_iterations: int = 100
    sample_limit: int = 100_000
    seed: int = 0
    n_stains: int = 2
    i0: float = DEFAULT_I0
    od_threshold: float = 0.15
    conc_percentile: float = 99.0

    def __post_init__(self):
        if self.sparsity < 0:
            raise ValueError("sparsity must be >= 0")
        if self.n_iterations < 1:
            raise ValueError("n_iterations must be >= 1")
        if self.n_stains != 2:
            raise ValueError("only two-stain models are supported")
        if self.sample_limit < MIN_TISSUE_PIXELS:
            raise ValueError(f"sample_limit must be >= {MIN_TISSUE_PIXELS}")


def tissue_od(image: np.ndarray, i0: float, od_threshold: float) -> np.ndarray:
    """OD rows ``(n, 3)`` of pixels whose every channel reaches ``od_threshold``."""
    od = rgb_to_od(check_rgb(image), i0).reshape(-1, 3)
    od = od[np.all(od >= od_threshold, axis=1)]
    if len(od) < MIN_TISSUE_PIXELS:
        raise InsufficientTissueError(
            f"insufficient tissue pixels: {len(od)} < {MIN_TISSUE_PIXELS} with OD >= {od_threshold}"
        )
    return od


def order_stains(w: np.ndarray) -> np.ndarray:
    """Put the hematoxylin-like column (larger blue OD, then larger red) first."""
    a, b = w[:, 0], w[:, 1]
    if (b[2], b[0]) > (a[2], a[0]):
        return w[:, ::-1].copy()
    return w


def _unit_nonneg(v: np.ndarray) -> np.ndarray:
    if v.sum() < 0:
        v = -v
    v = np.maximum(v, 0.0)
    norm = np.linalg.norm(v)
    if norm == 0:
        raise DegenerateStainError("degenerate stain vector")
    return v / norm


def concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    """Least-squares stain concentrations ``(n, 2)`` via the 2x2 normal equations.

    Negative concentrations are not clipped here; see :func:`clipped_concentrations`.
    """
    w = np.asarray(stain_matrix, dtype=np.float64)
    gram = w.T @ w
    det = gram[0, 0] * gram[1, 1] - gram[0, 1] * gram[1, 0]
    if det <= 1e-12:
        raise DegenerateStainError("stain vectors are collinear")
    inv = np.array([[gram[1, 1], -gram[0, 1]], [-gram[1, 0], gram[0, 0]]]) / det
    return od @ (w @ inv.T)


def clipped_concentrations(od: np.ndarray, stain_matrix: np.ndarray) -> np.ndarray:
    return np.maximum(concentrations(od, stain_matrix), 0.0)


def _max_concentrations(od: np.ndarray, w: np.ndarray, percentile: float) -> np.ndarray:
    c = clipped_concentrations(od, w)
    return np.percentile(c, percentile, axis=0)


def macenko_fit(image: np.ndarray, cfg: MacenkoConfig = MacenkoConfig()) -> StainModel:
    od = tissue_od(image, cfg.i0, cfg.od_threshold)
    evals, evecs = np.linalg.eigh(np.cov(od.T))
    if evals[1] < DEGENERATE_RATIO * evals[2]:
        raise DegenerateStainError(
            f"degenerate stain plane: second eigenvalue {evals[1]:.3g} < {DEGENERATE_RATIO:g} x {evals[2]:.3g}"
        )
    plane = evecs[:, [2, 1]]
    # orient the principal axis along the cloud so projected angles stay in (-pi/2, pi/2)
    if plane[:, 0].sum() < 0:
        plane[:, 0] = -plane[:, 0]
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [cfg.angle_percentile, 100.0 - cfg.angle_percentile])
    v1 = _unit_nonneg(plane @ np.array([np.cos(lo), np.sin(lo)]))
    v2 = _unit_nonneg(plane @ np.array([np.cos(hi), np.sin(hi)]))
    w = order_stains(np.column_stack([v1, v2]))
    return StainModel(w, _max_concentrations(od, w, cfg.conc_percentile), "macenko")


def snmf_objective(v: np.ndarray, w: np.ndarray, h: np.ndarray, sparsity: float) -> float:
    resid = v - w @ h
    return float(np.sum(resid * resid) + sparsity * h.sum())


W_SWEEPS = 5


def _nonneg_lasso_2(w: np.ndarray, v: np.ndarray, sparsity: float) -> np.ndarray:
    """Exact ``argmin_{h >= 0} ||v - w h||^2 + sparsity * sum(h)`` for each column of ``v``.

    With two components the optimum is either the unconstrained stationary
    point (when it is non-negative) or lies on one of the axes.
    """
    g = w.T @ w
    r = w.T @ v - 0.5 * sparsity
    det = g[0, 0] * g[1, 1] - g[0, 1] * g[0, 1]
    h = np.empty_like(r)
    if det > 0:
        h[0] = (g[1, 1] * r[0] - g[0, 1] * r[1]) / det
        h[1] = (g[0, 0] * r[1] - g[0, 1] * r[0]) / det
        inside = (h[0] >= 0) & (h[1] >= 0)
    else:
        inside = np.zeros(r.shape[1], dtype=bool)
    a = np.maximum(r[0] / g[0, 0], 0.0)
    b = np.maximum(r[1] / g[1, 1], 0.0)
    # objective up to a constant: h^T g h - 2 r^T h
    first = g[0, 0] * a * a - 2.0 * r[0] * a <= g[1, 1] * b * b - 2.0 * r[1] * b
    h[0] = np.where(inside, h[0], np.where(first, a, 0.0))
    h[1] = np.where(inside, h[1], np.where(first, 0.0, b))
    return h


def _update_columns(w: np.ndarray, vh: np.ndarray, hh: np.ndarray) -> np.ndarray:
    """Sweep the columns of ``w``; each is the exact minimizer on the non-negative unit sphere."""
    m, k = w.shape
    for _ in range(W_SWEEPS):
        for j in range(k):
            if hh[j, j] == 0:
                continue
            p = vh[:, j] - w @ hh[:, j] + w[:, j] * hh[j, j]
            pos = np.maximum(p, 0.0)
            norm = np.linalg.norm(pos)
            w[:, j] = pos / norm if norm > 0 else np.eye(m)[np.argmax(p)]
    return w


def sparse_nmf(
    v: np.ndarray,
    sparsity: float,
    n_iterations: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Factor non-negative ``v (3, n)`` as ``w @ h`` with two unit-norm columns in ``w``.

    Minimizes ``||v - w h||_F^2 + sparsity * sum(h)`` by alternating
    minimization.  Each iteration re-fits ``w`` with a few exact column sweeps
    (their cost does not depend on ``n``) and then solves for ``h`` exactly,
    pixel by pixel.  Every step is an exact block minimization, so the
    objective never increases.

    Returns ``(w, h, objective_history)``; the history has ``n_iterations + 1``
    entries, the first taken at initialization.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 2 or v.shape[1] < 2:
        raise ValueError("v must be a (channels, n >= 2) matrix")
    if sparsity < 0 or n_iterations < 1:
        raise ValueError("sparsity must be >= 0 and n_iterations >= 1")
    m, n = v.shape
    idx = rng.choice(n, size=2, replace=False)
    w = np.abs(v[:, idx]) + 1e-3
    w /= np.linalg.norm(w, axis=0)
    h = _nonneg_lasso_2(w, v, sparsity)
    history = np.empty(n_iterations + 1)
    history[0] = snmf_objective(v, w, h, sparsity)
    if not np.isfinite(history[0]):
        raise DivergenceError("objective diverged at initialization")
    for it in range(1, n_iterations + 1):
        w = _update_columns(w, v @ h.T, h @ h.T)
        h = _nonneg_lasso_2(w, v, sparsity)
        history[it] = snmf_objective(v, w, h, sparsity)
        if not np.isfinite(history[it]):
            raise DivergenceError(f"objective diverged at iteration {it}")
    return w, h, history


@dataclass
class VahadaneFit:
    model: StainModel
    objective: np.ndarray = field(repr=False)


def vahadane_fit_detailed(image: np.ndarray, cfg: VahadaneConfig = VahadaneConfig()) -> VahadaneFit:
    od = tissue_od(image, cfg.i0, cfg.od_threshold)
    rng = np.random.default_rng(cfg.seed)
    sample = od
    if len(od) > cfg.sample_limit:
        sample = od[np.sort(rng.choice(len(od), size=cfg.sample_limit, replace=False))]
    w, _, history = sparse_nmf(sample.T, cfg.sparsity, cfg.n_iterations, rng)
    slack = 1e-9 * np.maximum(1.0, history[:-1])
    if np.any(np.diff(history) > slack):
        raise DivergenceError("objective increased between iterations")
    w = order_stains(w / np.linalg.norm(w, axis=0))
    if abs(float(w[:, 0] @ w[:, 1])) > 1 - 1e-12:
        raise DegenerateStainError("degenerate stain plane: recovered stain vectors coincide")
    model = StainModel(w, _max_concentrations(od, w, cfg.conc_percentile), "vahadane")
    return VahadaneFit(model, history)


def vahadane_fit(image: np.ndarray, cfg: VahadaneConfig = VahadaneConfig()) -> StainModel:
    return vahadane_fit_detailed(image, cfg).model


def stain_normalize(
    source: np.ndarray, src_model: StainModel, tgt_model: StainModel, i0: float = DEFAULT_I0
) -> np.ndarray:
    """Re-express ``source`` with the target's stain vectors and concentration range."""
    source = check_rgb(source, "source")
    od = rgb_to_od(source, i0).reshape(-1, 3)
    c = clipped_concentrations(od, src_model.stain_matrix)
    src_max = src_model.max_concentrations
    ratio = np.divide(
        tgt_model.max_concentrations, src_max, out=np.ones(2), where=src_max > 0
    )
    out = (c * ratio) @ tgt_model.stain_matrix.T
    return od_to_rgb(out, i0).reshape(source.shape)


# --------------------------------------------------------------------------
# Reference sensitivity


@dataclass
class SensitivityReport:
    method: str
    psnr: np.ndarray
    outputs: list = field(repr=False, default_factory=list)

    def to_dict(self) -> dict:
        return {"method": self.method, "n_references": len(self.psnr), "psnr": self.psnr.tolist()}


def fit_reference(method: str, reference: np.ndarray, macenko_cfg=MacenkoConfig(), vahadane_cfg=VahadaneConfig()):
    if method == "reinhard":
        return reinhard_fit(reference)
    if method == "macenko":
        return macenko_fit(reference, macenko_cfg)
    if method == "vahadane":
        return vahadane_fit(reference, vahadane_cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def normalize_with(method: str, source: np.ndarray, target_model, macenko_cfg=MacenkoConfig(), vahadane_cfg=VahadaneConfig()):
    """Normalize ``source`` against a fitted reference model of ``method``."""
    if method == "reinhard":
        return reinhard_normalize(source, target_model)
    if method == "macenko":
        return stain_normalize(source, macenko_fit(source, macenko_cfg), target_model, macenko_cfg.i0)
    if method == "vahadane":
        return stain_normalize(source, vahadane_fit(source, vahadane_cfg), target_model, vahadane_cfg.i0)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def reference_sensitivity_report(source: np.ndarray, references: list, method: str = "reinhard") -> SensitivityReport:
    """Normalize ``source`` against each reference and compare the outputs pairwise."""
    from .metrics import psnr

    if len(references) < 2:
        raise ValueError("need at least two references")
    outputs = [normalize_with(method, source, fit_reference(method, ref)) for ref in references]
    k = len(outputs)
    table = np.full((k, k), np.inf)
    for i in range(k):
        for j in range(i + 1, k):
            table[i, j] = table[j, i] = psnr(outputs[i], outputs[j])
    return SensitivityReport(method, table, outputs)
