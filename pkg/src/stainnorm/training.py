"""Distillation of a PixelNet onto teacher-normalized images.

Mean L1 loss, SGD with momentum, cosine-annealed learning rate and
checkpoint selection by validation PSNR.  Gradients are computed
analytically in float64.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .image import load_image, to_float
from .metrics import psnr
from .pixelnet import PixelNet, conv_layer, normalize_image, reflect_pad, reflect_pad_adjoint

logger = logging.getLogger(__name__)


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for the named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),)))


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    batch_size: int = 10
    epochs: int = 300
    momentum: float = 0.9
    crop: int | None = None
    seed: int = 0
    eval_every: int = 1
    precision: int = 32

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.batch_size < 1 or self.epochs < 1 or self.eval_every < 1:
            raise ValueError("batch_size, epochs and eval_every must be >= 1")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.crop is not None and self.crop < 2:
            raise ValueError("crop must be >= 2")


@dataclass
class PairedDataset:
    pairs: list[tuple[Path, Path]]
    split: str = "train"

    def __len__(self):
        return len(self.pairs)

    @classmethod
    def from_manifest(cls, path: str | Path, split: str) -> "PairedDataset":
        """Read the ``split`` rows of a JSON-lines manifest; paths resolve against its directory."""
        path = Path(path)
        pairs = []
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if row["split"] == split:
                pairs.append(((path.parent / row["source"]), (path.parent / row["target"])))
        return cls(pairs, split)

    def load(self) -> tuple[list[np.ndarray], list[np.ndarray]]:
        sources, targets = [], []
        for src, tgt in self.pairs:
            s = load_image(src)
            t = load_image(tgt)
            if s.shape != t.shape:
                raise ValueError(f"dimension mismatch between {src} and {tgt}")
            sources.append(s)
            targets.append(t)
        return sources, targets


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    psnr: float | None


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_psnr: float = -math.inf

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "loss", "lr", "psnr"])
        for r in self.records:
            p = "" if r.psnr is None else ("inf" if math.isinf(r.psnr) else repr(r.psnr))
            writer.writerow([r.epoch, repr(r.loss), repr(r.lr), p])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())


def cosine_lr(epoch: int, total: int, lr0: float) -> float:
    """``0.5 * lr0 * (1 + cos(pi * epoch / total))``."""
    if not 0 <= epoch <= total:
        raise ValueError(f"epoch {epoch} outside [0, {total}]")
    if epoch == total:
        return 0.0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total))


def l1_loss(pred: np.ndarray, target: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean(np.abs(pred - target)))


def _stack(images, name):
    arr = [np.asarray(x, dtype=np.float64) for x in images]
    if not arr:
        raise ValueError(f"{name} batch is empty")
    shape = arr[0].shape
    if any(a.shape != shape for a in arr) or len(shape) != 3 or shape[2] != 3:
        raise ValueError(f"{name} images must share one (H, W, 3) shape")
    return np.stack(arr)


def forward_train(net: PixelNet, x: np.ndarray):
    """Float64 forward on a batch ``(n, H, W, 3)`` keeping what backprop needs."""
    inputs, pre = [], []
    a = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = conv_layer(a, w, b)
        pre.append(z)
        a = np.maximum(z, 0.0) if i < last else np.clip(z, -1.0, 1.0)
    return a, inputs, pre


def _layer_backward(a: np.ndarray, w: np.ndarray, dz: np.ndarray, need_input_grad: bool):
    n, h, wd, c = a.shape
    out = w.shape[0]
    dz_flat = dz.reshape(-1, out)
    db = dz_flat.sum(axis=0)
    dw = np.empty_like(w)
    if w.shape[2] == 1:
        dw[:, :, 0, 0] = dz_flat.T @ a.reshape(-1, c)
        da = (dz_flat @ w[:, :, 0, 0]).reshape(a.shape) if need_input_grad else None
        return dw, db, da
    ap = reflect_pad(a)
    dap = np.zeros_like(ap) if need_input_grad else None
    for dy in range(3):
        for dx in range(3):
            window = ap[:, dy : dy + h, dx : dx + wd]
            dw[:, :, dy, dx] = dz_flat.T @ window.reshape(-1, c)
            if need_input_grad:
                dap[:, dy : dy + h, dx : dx + wd] += (dz_flat @ w[:, :, dy, dx]).reshape(n, h, wd, c)
    da = reflect_pad_adjoint(dap) if need_input_grad else None
    return dw, db, da


def backward(net: PixelNet, batch_src, batch_tgt) -> tuple[np.ndarray, float]:
    """Analytic gradient of the mean L1 loss, as a flat vector matching ``net.parameters()``.

    Sub-gradients are zero at the kinks: ``|residual| = 0``, ReLU input 0 and
    the output clamp boundary.
    """
    x = _stack(batch_src, "source")
    t = _stack(batch_tgt, "target")
    if x.shape != t.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {t.shape}")
    y, inputs, pre = forward_train(net, x)
    resid = y - t
    loss = float(np.mean(np.abs(resid)))
    grad = np.sign(resid) / resid.size
    last = len(net.weights) - 1
    grad *= (pre[last] > -1.0) & (pre[last] < 1.0)
    grads_w = [None] * len(net.weights)
    grads_b = [None] * len(net.weights)
    for i in range(last, -1, -1):
        dw, db, da = _layer_backward(inputs[i], net.weights[i], grad, i > 0)
        grads_w[i] = dw
        grads_b[i] = db
        if i > 0:
            grad = da * (pre[i - 1] > 0.0)
    flat = []
    for dw, db in zip(grads_w, grads_b):
        flat.append(dw.ravel())
        flat.append(db)
    return np.concatenate(flat), loss


def sgd_step(net: PixelNet, grads: np.ndarray, velocity: np.ndarray | None, lr: float, momentum: float):
    """``v <- momentum * v + g``; ``theta <- theta - lr * v``.  Returns ``(net, v)``."""
    grads = np.asarray(grads, dtype=np.float64)
    theta = net.parameters()
    if grads.shape != theta.shape:
        raise ValueError(f"gradient has {grads.shape} entries, net has {theta.shape}")
    if velocity is None:
        velocity = np.zeros_like(theta)
    velocity = momentum * velocity + grads
    return net.with_parameters(theta - lr * velocity), velocity


def evaluate_psnr(net: PixelNet, sources: list[np.ndarray], targets: list[np.ndarray], precision: int = 32) -> float:
    """Mean PSNR of 8-bit network outputs against 8-bit targets."""
    values = [psnr(normalize_image(net, s, precision), t) for s, t in zip(sources, targets)]
    return float(np.mean(values))


def _crop_pair(src, tgt, size, rng):
    h, w = src.shape[:2]
    if size is None or (size >= h and size >= w):
        return src, tgt
    if size > h or size > w:
        raise ValueError(f"crop {size} larger than image {h}x{w}")
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    return src[top : top + size, left : left + size], tgt[top : top + size, left : left + size]


def train_arrays(
    net: PixelNet,
    train_src: list[np.ndarray],
    train_tgt: list[np.ndarray],
    val_src: list[np.ndarray],
    val_tgt: list[np.ndarray],
    cfg: TrainConfig,
    progress=None,
) -> tuple[PixelNet, TrainReport]:
    """Train on in-memory 8-bit image pairs; see :func:`train`."""
    if not train_src or not val_src:
        raise ValueError("training and validation sets must be non-empty")
    if len(train_src) != len(train_tgt) or len(val_src) != len(val_tgt):
        raise ValueError("source and target lists differ in length")
    for s, t in zip(train_src + val_src, train_tgt + val_tgt):
        if s.shape != t.shape:
            raise ValueError(f"dimension mismatch {s.shape} vs {t.shape}")
    if cfg.crop is None and len({s.shape for s in train_src}) > 1:
        raise ValueError("training images differ in size; set a crop")
    xs = [to_float(s) for s in train_src]
    ts = [to_float(t) for t in train_tgt]
    shuffle_rng = rng_stream(cfg.seed, "shuffle")
    crop_rng = rng_stream(cfg.seed, "crop")
    report = TrainReport()
    best = net.copy()
    velocity = None
    n = len(xs)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            pairs = [_crop_pair(xs[i], ts[i], cfg.crop, crop_rng) for i in idx]
            grads, loss = backward(net, [p[0] for p in pairs], [p[1] for p in pairs])
            net, velocity = sgd_step(net, grads, velocity, lr, cfg.momentum)
            loss_sum += loss * len(idx)
        value = None
        if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            value = evaluate_psnr(net, val_src, val_tgt, cfg.precision)
            if value > report.best_psnr:
                report.best_psnr = value
                report.best_epoch = epoch
                best = net.copy()
        report.records.append(EpochRecord(epoch, loss_sum / n, lr, value))
        if progress is not None:
            progress(report.records[-1])
        logger.debug("epoch %d loss %.6f lr %.6g psnr %s", epoch, loss_sum / n, lr, value)
    return best, report


def train(net: PixelNet, train_set: PairedDataset, val_set: PairedDataset, cfg: TrainConfig, progress=None):
    """Distill ``net`` onto the pairs of ``train_set``.

    Returns the snapshot with the highest validation PSNR (earliest epoch on
    ties) and the per-epoch report.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ValueError("training and validation sets must be non-empty")
    train_src, train_tgt = train_set.load()
    val_src, val_tgt = val_set.load()
    return train_arrays(net, train_src, train_tgt, val_src, val_tgt, cfg, progress)
