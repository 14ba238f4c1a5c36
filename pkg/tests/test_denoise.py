import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import analytic_grads, fd_grads, max_rel_err
from noisylab.denoise import (DnCnn9, UNetSmall, build_denoiser,
                              denoiser_from_descriptor)
from noisylab.engine import Tensor
from noisylab.errors import ShapeError

RNG = np.random.default_rng(0)


def _zero_weights(model):
    for p in model.parameters().values():
        p.data = np.zeros_like(p.data)


@pytest.mark.parametrize("build", [
    lambda: DnCnn9(channels=1, width=8, rng=np.random.default_rng(1)),
    lambda: UNetSmall(channels=1, width=8, rng=np.random.default_rng(1)),
])
def test_zero_weight_network_is_identity(build):
    model = build()
    _zero_weights(model)
    x = Tensor(RNG.uniform(0, 1, (2, 1, 32, 32)).astype(np.float32))
    np.testing.assert_array_equal(model(x).data, x.data)


@pytest.mark.parametrize("build", [
    lambda c: DnCnn9(channels=c, width=8, rng=np.random.default_rng(2)),
    lambda c: UNetSmall(channels=c, width=8, rng=np.random.default_rng(2)),
])
@pytest.mark.parametrize("channels", [1, 4])
def test_output_finite_on_zero_input(build, channels):
    model = build(channels)
    out = model(Tensor(np.zeros((1, channels, 32, 32), np.float32)))
    assert out.shape == (1, channels, 32, 32)
    assert np.isfinite(out.data).all()


@given(st.sampled_from([8, 12, 16, 24, 32]), st.sampled_from([8, 12, 16, 24, 32]))
@settings(max_examples=10)
def test_shape_preserved_for_divisible_extents(h, w):
    for model in (DnCnn9(channels=2, width=4, rng=np.random.default_rng(3)),
                  UNetSmall(channels=2, width=4, rng=np.random.default_rng(3))):
        out = model(Tensor(np.zeros((1, 2, h, w), np.float32)))
        assert out.shape == (1, 2, h, w)


def test_unet_rejects_bad_extents():
    model = UNetSmall(channels=1, width=4, rng=np.random.default_rng(4))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 30, 32), np.float32)))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 4, 4), np.float32)))


def test_channel_mismatch_raises():
    model = DnCnn9(channels=4, width=8, rng=np.random.default_rng(5))
    with pytest.raises(ShapeError):
        model(Tensor(np.zeros((1, 1, 32, 32), np.float32)))


def smooth_check_point(model, weight_scale=0.1, bias_shift=1.0):
    """Move a relu network away from its kinks so finite differences are valid.

    Small weights keep activations modest; a positive bias on every hidden
    conv pushes pre-relu values well clear of zero, so a 1e-3 step cannot
    flip any relu region while still exercising the whole backward chain.
    """
    for name, p in model.parameters().items():
        if name.endswith("/w"):
            p.data = p.data * weight_scale
        elif name.endswith("/b") and not name.startswith(("conv8", "out")):
            p.data = p.data + bias_shift
    return model


@pytest.mark.parametrize("kind", ["dncnn9", "unet"])
def test_weight_gradients_match_finite_differences(kind):
    model = smooth_check_point(
        build_denoiser(kind, 2, 4, np.random.default_rng(6), dtype=np.float64))
    x = Tensor(RNG.uniform(0.2, 0.8, (1, 2, 8, 8)), dtype=np.float64)
    target = Tensor(RNG.uniform(0.2, 0.8, (1, 2, 8, 8)), dtype=np.float64)
    params = list(model.parameters().values())

    def build():
        return (model(x) - target).square().sum()

    sampler = np.random.default_rng(7)
    analytic = analytic_grads(build, params)
    # >=1% of each tensor's weights, at least 2 per tensor
    numeric = fd_grads(build, params, step=1e-3,
                       sample=max(2, int(0.01 * max(p.size for p in params))),
                       rng=sampler)
    assert max_rel_err(analytic, numeric) < 1e-3


def test_parameters_are_all_trained_tensors():
    model = DnCnn9(channels=1, width=4, rng=np.random.default_rng(8))
    params = model.parameters()
    assert len(params) == 18  # 9 convs x (w, b)
    assert all(p.requires_grad for p in params.values())


def test_descriptor_round_trip():
    model = UNetSmall(channels=4, width=16, rng=np.random.default_rng(9))
    rebuilt = denoiser_from_descriptor(model.arch_descriptor())
    assert rebuilt.arch_descriptor() == model.arch_descriptor()
    assert {k: p.shape for k, p in rebuilt.parameters().items()} == \
           {k: p.shape for k, p in model.parameters().items()}
    with pytest.raises(ValueError):
        build_denoiser("resnet", 1, 8)
