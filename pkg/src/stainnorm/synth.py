"""Synthetic cytology-like scenes and closed-form teacher color transforms.

Paired datasets are built by rendering seeded scenes and passing them through
a known per-pixel transform, so a distilled network can be checked against
an exact oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import serialization
from .color import rgb_to_od
from .image import check_rgb, save_image, to_uint8
from .training import PairedDataset

KINDS = ("identity", "linear_matrix", "per_channel_gamma", "composed")


@dataclass(frozen=True)
class ColorTransform:
    kind: str = "identity"
    matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    offset: tuple = (0.0, 0.0, 0.0)
    gamma: tuple = (1.0, 1.0, 1.0)
    parts: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "per_channel_gamma" and not all(0.4 <= g <= 2.5 for g in self.gamma):
            raise ValueError("gamma exponents must lie in [0.4, 2.5]")
        if self.kind == "linear_matrix" and np.shape(self.matrix) != (3, 3):
            raise ValueError("linear transform needs a 3x3 matrix")

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def linear(cls, matrix, offset=(0.0, 0.0, 0.0)):
        m = tuple(tuple(float(v) for v in row) for row in np.asarray(matrix, dtype=float))
        return cls("linear_matrix", matrix=m, offset=tuple(float(v) for v in offset))

    @classmethod
    def per_channel_gamma(cls, exponents):
        return cls("per_channel_gamma", gamma=tuple(float(g) for g in exponents))

    @classmethod
    def compose(cls, parts):
        return cls("composed", parts=tuple(parts))

    def apply_float(self, rgb: np.ndarray) -> np.ndarray:
        """Apply to real intensities on 0..255; each stage saturates to [0, 255]."""
        rgb = np.asarray(rgb, dtype=np.float64)
        if self.kind == "identity":
            return rgb
        if self.kind == "linear_matrix":
            out = rgb @ np.asarray(self.matrix).T + np.asarray(self.offset)
        elif self.kind == "per_channel_gamma":
            out = 255.0 * np.power(np.clip(rgb, 0.0, 255.0) / 255.0, np.asarray(self.gamma))
        else:
            out = rgb
            for part in self.parts:
                out = part.apply_float(out)
        return np.clip(out, 0.0, 255.0)

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        if self.kind == "linear_matrix":
            return {"kind": self.kind, "matrix": [list(r) for r in self.matrix], "offset": list(self.offset)}
        if self.kind == "per_channel_gamma":
            return {"kind": self.kind, "gamma": list(self.gamma)}
        return {"kind": self.kind, "parts": [p.to_dict() for p in self.parts]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ColorTransform":
        kind = doc["kind"]
        if kind == "identity":
            return cls.identity()
        if kind == "linear_matrix":
            return cls.linear(doc["matrix"], doc.get("offset", (0.0, 0.0, 0.0)))
        if kind == "per_channel_gamma":
            return cls.per_channel_gamma(doc["gamma"])
        if kind == "composed":
            return cls.compose([cls.from_dict(p) for p in doc["parts"]])
        raise ValueError(f"unknown transform kind {kind!r}")


def parse_transform(text: str) -> ColorTransform:
    """Parse ``identity``, ``gamma:g1,g2,g3``, ``linear:m11,...,m33[,o1,o2,o3]``; ``+`` composes."""
    parts = [p.strip() for p in text.split("+")]
    if len(parts) > 1:
        return ColorTransform.compose([parse_transform(p) for p in parts])
    name, _, args = text.strip().partition(":")
    try:
        values = [float(v) for v in args.split(",")] if args else []
    except ValueError:
        raise ValueError(f"bad transform spec {text!r}") from None
    if name == "identity" and not values:
        return ColorTransform.identity()
    if name == "gamma" and len(values) == 3:
        return ColorTransform.per_channel_gamma(values)
    if name == "linear" and len(values) in (9, 12):
        offset = values[9:] or (0.0, 0.0, 0.0)
        return ColorTransform.linear(np.reshape(values[:9], (3, 3)), offset)
    raise ValueError(f"bad transform spec {text!r}")


def apply_transform(t: ColorTransform, image: np.ndarray) -> np.ndarray:
    image = check_rgb(image)
    return to_uint8(t.apply_float(image))


@dataclass(frozen=True)
class SynthSceneConfig:
    size: int = 128
    cell_count: tuple[int, int] = (4, 9)
    nucleus_color: tuple = (80, 60, 140)
    cytoplasm_color: tuple = (175, 115, 165)
    background_color: tuple = (238, 232, 242)
    noise: float = 2.0
    texture: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ValueError("size must be >= 64")
        lo, hi = self.cell_count
        if lo < 0 or hi < lo:
            raise ValueError("invalid cell count range")
        if self.noise < 0 or self.texture < 0:
            raise ValueError("noise and texture amplitudes must be >= 0")


def _ellipse_mask(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy = yy - cy
    dx = xx - cx
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def render_scene(cfg: SynthSceneConfig) -> np.ndarray:
    """Elliptical cells with dark nuclei and granular cytoplasm on a bright background.

    Colors are mixed in optical density, so overlapping cells darken the way
    absorbing dyes do.  Cytoplasm and nuclei carry per-pixel grain of relative
    amplitude ``texture``; ``noise`` is additive in intensity.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    bg_od = rgb_to_od(np.asarray(cfg.background_color, dtype=np.float64))
    cyto_od = rgb_to_od(np.asarray(cfg.cytoplasm_color, dtype=np.float64)) - bg_od
    nuc_od = rgb_to_od(np.asarray(cfg.nucleus_color, dtype=np.float64)) - bg_od
    od = np.empty((n, n, 3))
    od[:] = bg_od
    scale = n / 128.0
    lo, hi = cfg.cell_count
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        cy, cx = rng.uniform(0, n, size=2)
        ry, rx = rng.uniform(10, 24, size=2) * scale
        angle = rng.uniform(0, np.pi)
        cyto = _ellipse_mask(yy, xx, cy, cx, ry, rx, angle)
        density = rng.uniform(0.7, 1.2)
        grain = np.maximum(1.0 + rng.normal(0, cfg.texture, size=(n, n)), 0.0)
        od[cyto] += (density * grain[cyto])[:, None] * cyto_od
        frac = rng.uniform(0.25, 0.45)
        nuc = _ellipse_mask(yy, xx, cy + rng.normal(0, 1), cx + rng.normal(0, 1), ry * frac, rx * frac, angle)
        od[nuc] += rng.uniform(0.8, 1.2) * np.sqrt(grain[nuc])[:, None] * nuc_od
    img = 255.0 * np.power(10.0, -od) + rng.normal(0, cfg.noise, size=od.shape)
    return to_uint8(img)


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=(index,)).generate_state(1)[0])


def generate_dataset(
    scene_cfg: SynthSceneConfig,
    teacher: ColorTransform | Callable[[np.ndarray], np.ndarray],
    n_train: int,
    n_val: int,
    out_dir: str | Path,
) -> tuple[PairedDataset, PairedDataset]:
    """Render ``n_train + n_val`` scenes, pass them through ``teacher`` and write the tree.

    Layout: ``source/NNNN.png``, ``target/NNNN.png``, ``manifest.jsonl`` and,
    for closed-form teachers, ``teacher.json``.
    """
    if n_train < 1 or n_val < 0:
        raise ValueError("n_train must be >= 1 and n_val >= 0")
    out = Path(out_dir)
    (out / "source").mkdir(parents=True, exist_ok=True)
    (out / "target").mkdir(parents=True, exist_ok=True)
    apply = (lambda img: apply_transform(teacher, img)) if isinstance(teacher, ColorTransform) else teacher
    rows, train_pairs, val_pairs = [], [], []
    for i in range(n_train + n_val):
        src = render_scene(replace(scene_cfg, seed=scene_seed(scene_cfg.seed, i)))
        tgt = check_rgb(apply(src), "teacher output")
        name = f"{i:04d}.png"
        save_image(src, out / "source" / name)
        save_image(tgt, out / "target" / name)
        split = "train" if i < n_train else "val"
        rows.append({"source": f"source/{name}", "target": f"target/{name}", "split": split})
        pair = (out / "source" / name, out / "target" / name)
        (train_pairs if split == "train" else val_pairs).append(pair)
    with open(out / "manifest.jsonl", "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    if isinstance(teacher, ColorTransform):
        serialization.write_json(teacher.to_dict(), out / "teacher.json")
    return PairedDataset(train_pairs, "train"), PairedDataset(val_pairs, "val")
