"""Shared constructors for test inputs."""

import numpy as np

from stainnorm.color import od_to_rgb
from stainnorm.pixelnet import LayerSpec, PixelNet, PixelNetConfig


def random_image(rng, h=16, w=16):
    return rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8)


def identity_net() -> PixelNet:
    config = PixelNetConfig((LayerSpec(3, 3, 1),))
    return PixelNet(config, [np.eye(3).reshape(3, 3, 1, 1)], [np.zeros(3)])


def tiny_config(widths=(3, 4, 4, 3), kernels=(1, 1, 1)) -> PixelNetConfig:
    return PixelNetConfig(tuple(LayerSpec(a, b, k) for a, b, k in zip(widths[:-1], widths[1:], kernels)))


def angle_deg(a, b):
    cos = np.sum(a * b, axis=0) / (np.linalg.norm(a, axis=0) * np.linalg.norm(b, axis=0))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def random_stain_pair(rng, min_angle_deg=15.0, min_component=0.2):
    """Two unit OD vectors with every component >= ``min_component`` and a minimum separation."""
    while True:
        w = rng.uniform(0, 1, size=(3, 2))
        w /= np.linalg.norm(w, axis=0)
        if w.min() >= min_component and angle_deg(w[:, :1], w[:, 1:])[0] >= min_angle_deg:
            return w


def stain_concentrations(rng, n, pure_fraction=0.2, low=0.8, high=1.6):
    """Mixture concentrations ``(n, 2)``; a fraction of pixels carries a single stain."""
    total = rng.uniform(low, high, size=n)
    t = rng.uniform(0, 1, size=n)
    kind = rng.uniform(0, 1, size=n)
    t[kind < pure_fraction] = 0.0
    t[kind > 1 - pure_fraction] = 1.0
    return np.column_stack([total * t, total * (1 - t)])


def stain_image(w, conc, side):
    od = conc @ np.asarray(w).T
    return od_to_rgb(od.reshape(side, side, 3))


def _kink_state(net, xs, ts):
    from stainnorm.training import forward_train

    y, _, pre = forward_train(net, np.stack(xs))
    masks = [p > 0 for p in pre[:-1]]
    masks.append((pre[-1] > -1) & (pre[-1] < 1))
    masks.append(np.sign(y - np.stack(ts)))
    return masks


def _loss(net, xs, ts):
    from stainnorm.training import forward_train

    y, _, _ = forward_train(net, np.stack(xs))
    return float(np.mean(np.abs(y - np.stack(ts))))


def finite_difference_check(net, xs, ts, h=1e-5, floor=1e-7):
    """Compare analytic and central-difference gradients.

    A parameter counts as kink-adjacent, and is skipped, when moving it by
    ``+-h`` changes a ReLU pattern, the clamp pattern or a residual sign.
    Returns ``(max_relative_error, n_checked, n_skipped)``.
    """
    from stainnorm.training import backward

    grad, _ = backward(net, xs, ts)
    theta = net.parameters()
    base = _kink_state(net, xs, ts)
    worst, checked, skipped = 0.0, 0, 0
    for i in range(len(theta)):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += h
        minus[i] -= h
        net_p, net_m = net.with_parameters(plus), net.with_parameters(minus)
        states = _kink_state(net_p, xs, ts) + _kink_state(net_m, xs, ts)
        if any(not np.array_equal(s, base[j % len(base)]) for j, s in enumerate(states)):
            skipped += 1
            continue
        numeric = (_loss(net_p, xs, ts) - _loss(net_m, xs, ts)) / (2 * h)
        err = abs(grad[i] - numeric) / max(abs(grad[i]), abs(numeric), floor)
        worst = max(worst, err)
        checked += 1
    return worst, checked, skipped
