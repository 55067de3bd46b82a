import numpy as np
import pytest

from stainnorm.image import from_float, to_float
from stainnorm.pixelnet import (
    LayerSpec,
    PixelNet,
    PixelNetConfig,
    SpatialKernelError,
    ablation_variants,
    forward,
    forward_pixel,
    init,
    load_checkpoint,
    normalize_image,
    param_count,
    parse_variant,
    reflect_pad,
    reflect_pad_adjoint,
    save_checkpoint,
)

from helpers import identity_net


def test_default_config_shape():
    cfg = PixelNetConfig.default()
    assert [(l.in_channels, l.out_channels, l.kernel) for l in cfg.layers] == [(3, 32, 1), (32, 32, 1), (32, 3, 1)]


def test_param_counts():
    assert param_count(PixelNetConfig.default()) == 1283
    assert param_count(init(PixelNetConfig.default(), 0)) == 128 + 1056 + 99
    assert param_count(PixelNetConfig.from_counts(0, 3)) == 896 + 9248 + 867 == 11011
    assert param_count(identity_net()) == 12


def test_ablation_variants():
    variants = ablation_variants()
    assert [v.n_spatial for v in variants] == [0, 1, 2, 3]
    for v in variants:
        assert [(l.in_channels, l.out_channels) for l in v.layers] == [(3, 32), (32, 32), (32, 3)]
    # trailing layers become 3x3 first
    assert [l.kernel for l in variants[1].layers] == [1, 1, 3]
    assert [l.kernel for l in parse_variant("1x1:1,3x3:2").layers] == [1, 3, 3]
    with pytest.raises(ValueError):
        parse_variant("1x1:2,5x5:1")
    with pytest.raises(ValueError):
        PixelNetConfig.from_counts(2, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        PixelNetConfig((LayerSpec(3, 8), LayerSpec(4, 3)))
    with pytest.raises(ValueError):
        LayerSpec(3, 3, 5)


def test_init_deterministic():
    a = init(PixelNetConfig.default(), 7).parameters()
    b = init(PixelNetConfig.default(), 7).parameters()
    c = init(PixelNetConfig.default(), 8).parameters()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_zero_net_outputs_zero(rng):
    cfg = PixelNetConfig.default()
    net = init(cfg, 0).with_parameters(np.zeros(1283))
    out = forward(net, to_float(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)))
    assert np.all(out == 0)
    assert np.all(forward_pixel(net, (0.0, 0.0, 0.0)) == 0)


@pytest.mark.parametrize("precision", [32, 64])
def test_identity_net(rng, precision):
    img = rng.integers(0, 256, (9, 7, 3), dtype=np.uint8)
    x = to_float(img)
    out = forward(identity_net(), x, precision)
    assert np.allclose(out, x, atol=1e-7)
    assert np.array_equal(from_float(out), img)


def test_output_clamped(rng):
    net = identity_net()
    net = PixelNet(net.config, [5 * net.weights[0]], [net.biases[0]])
    out = forward(net, to_float(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)))
    assert out.min() >= -1 and out.max() <= 1


def _reference_forward(net, x):
    """Straightforward float64 evaluation, one pixel at a time for 1x1 nets."""
    a = x.reshape(-1, 3).astype(np.float64)
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        a = a @ w[:, :, 0, 0].T + b
        a = np.maximum(a, 0) if i < len(net.weights) - 1 else np.clip(a, -1, 1)
    return a.reshape(x.shape)


def test_forward_matches_reference(rng):
    net = init(PixelNetConfig.default(), 3)
    x = to_float(rng.integers(0, 256, (20, 30, 3), dtype=np.uint8))
    assert np.allclose(forward(net, x, 64), _reference_forward(net, x), atol=1e-12)
    assert np.allclose(forward(net, x, 32), _reference_forward(net, x), atol=1e-5)


@pytest.mark.parametrize("precision", [32, 64])
def test_pixel_purity_under_permutation(rng, precision):
    net = init(PixelNetConfig.default(), 11)
    for _ in range(5):
        x = to_float(rng.integers(0, 256, (33, 17, 3), dtype=np.uint8))
        perm = rng.permutation(33 * 17)
        xp = x.reshape(-1, 3)[perm].reshape(x.shape)
        a = forward(net, xp, precision).reshape(-1, 3)
        b = forward(net, x, precision).reshape(-1, 3)[perm]
        assert np.array_equal(a, b)


def test_forward_independent_of_image_size(rng):
    net = init(PixelNetConfig.default(), 2)
    x = to_float(rng.integers(0, 256, (40, 40, 3), dtype=np.uint8))
    full = forward(net, x)
    assert np.array_equal(forward(net, x[3:10, 5:31]), full[3:10, 5:31])
    assert np.array_equal(forward_pixel(net, x[4, 4]), full[4, 4])


def test_spatial_variants_keep_shape_and_locality(rng):
    x = to_float(rng.integers(0, 256, (15, 13, 3), dtype=np.uint8))
    for cfg in ablation_variants(8)[1:]:
        net = init(cfg, 1)
        y = forward(net, x, 64)
        assert y.shape == x.shape
        x2 = x.copy()
        x2[7, 6] = -x2[7, 6] + 0.5
        changed = np.any(forward(net, x2, 64) != y, axis=-1)
        ys, xs = np.nonzero(changed)
        radius = cfg.n_spatial
        assert np.all(np.abs(ys - 7) <= radius) and np.all(np.abs(xs - 6) <= radius)


def test_forward_pixel_rejects_spatial_net():
    with pytest.raises(SpatialKernelError, match="net contains spatial kernels"):
        forward_pixel(init(PixelNetConfig.from_counts(2, 1), 0), (0.0, 0.0, 0.0))


def test_forward_deterministic(rng):
    net = init(PixelNetConfig.default(), 5)
    x = to_float(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8))
    assert np.array_equal(forward(net, x), forward(net, x))


def test_reflect_pad_adjoint(rng):
    x = rng.normal(size=(2, 5, 4, 3))
    g = rng.normal(size=(2, 7, 6, 3))
    assert np.sum(reflect_pad(x) * g) == pytest.approx(np.sum(x * reflect_pad_adjoint(g)), rel=1e-12)


def test_checkpoint_round_trip(tmp_path):
    for cfg in ablation_variants(4):
        net = init(cfg, 9)
        save_checkpoint(net, tmp_path / "c.json")
        back = load_checkpoint(tmp_path / "c.json")
        assert back.config == net.config
        assert np.array_equal(back.parameters(), net.parameters())


def test_with_parameters_checks_length():
    net = init(PixelNetConfig.default(), 0)
    with pytest.raises(ValueError):
        net.with_parameters(np.zeros(10))


@pytest.mark.parametrize("precision", [32, 64])
def test_normalize_image_matches_float_round_trip(rng, precision):
    net = init(PixelNetConfig.default(), 3)
    for shape in ((1, 1, 3), (5, 300, 3), (64, 64, 3)):
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        expected = from_float(forward(net, to_float(img), precision))
        assert np.array_equal(normalize_image(net, img, precision), expected)


def test_normalize_image_spatial_net_falls_back(rng):
    net = init(parse_variant("1x1:1,3x3:2"), 4)
    img = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
    assert np.array_equal(normalize_image(net, img), from_float(forward(net, to_float(img))))
