from pathlib import Path

import pytest

import numpy as np
from pydantic import ValidationError

from self_diffusion import autodiff as ad
from self_diffusion.autodiff import Tensor
from self_diffusion.denoiser import DenoiserConfig, DenoiserConfigError, build_unet

from tests.util import GRAD_TOL, SEED, tiny_denoiser


@pytest.mark.parametrize(
    "dims,channels,spatial",
    [(1, 1, (32,)), (2, 1, (16, 16)), (2, 2, (8, 16))],
)
def test_output_shape_matches_input(dims: int, channels: int, spatial: tuple[int, ...]) -> None:
    net = build_unet(tiny_denoiser(dims, channels), spatial)
    x = np.random.default_rng(SEED).standard_normal(net.input_shape)
    out = net.evaluate(x)
    assert out.shape == (1, channels, *spatial)
    assert np.all(np.isfinite(out))


def test_initialization_is_seeded() -> None:
    a = build_unet(tiny_denoiser(seed=1), (32,))
    b = build_unet(tiny_denoiser(seed=1), (32,))
    c = build_unet(tiny_denoiser(seed=2), (32,))
    assert np.array_equal(a.flat_parameters(), b.flat_parameters())
    assert not np.array_equal(a.flat_parameters(), c.flat_parameters())


def test_weights_follow_init_std() -> None:
    config = DenoiserConfig(dims=1, depth=3, base_channels=32, init_std=0.02, seed=1)
    net = build_unet(config, (128,))
    kernels = np.concatenate([w.data.reshape(-1) for w in net.weights()])
    assert kernels.size >= 10_000
    assert np.std(kernels) == pytest.approx(0.02, rel=0.05)
    assert abs(float(np.mean(kernels))) < 0.002
    for block in net.blocks():
        assert np.all(block.bias.data == 0.0)
        assert np.all(block.gain.data == 1.0)


def test_spatial_size_must_divide() -> None:
    with pytest.raises(DenoiserConfigError, match="pad by 2 to 32"):
        build_unet(tiny_denoiser(), (30,))
    with pytest.raises(DenoiserConfigError):
        build_unet(tiny_denoiser(dims=2), (32,))
    with pytest.raises(DenoiserConfigError):
        build_unet(DenoiserConfig(kernel_size=4), (32,))
    with pytest.raises(ValidationError):
        DenoiserConfig(depth=0)


def test_input_shape_is_checked() -> None:
    net = build_unet(tiny_denoiser(), (32,))
    with pytest.raises(ad.ShapeMismatchError):
        net.evaluate(np.zeros((1, 1, 16)))


def test_sigmoid_head_is_bounded() -> None:
    config = tiny_denoiser(dims=2).model_copy(update={"head": "sigmoid"})
    net = build_unet(config, (16, 16))
    out = net.evaluate(np.random.default_rng(0).standard_normal(net.input_shape) * 10)
    assert np.all((out > 0) & (out < 1))


def test_network_gradients_match_finite_differences() -> None:
    net = build_unet(tiny_denoiser(), (16,))
    rng = np.random.default_rng(SEED)
    x = Tensor(rng.standard_normal(net.input_shape))
    target = Tensor(rng.standard_normal(net.output_shape))
    error = ad.grad_check(
        lambda inp: ad.l2sq(ad.sub(net(inp), target)), x, net.parameters(), n_samples=48
    )
    assert error < GRAD_TOL


def test_checkpoint_restores_parameters(tmp_path: Path) -> None:
    net = build_unet(tiny_denoiser(seed=1), (32,))
    net.save(tmp_path / "net.sdt")
    other = build_unet(tiny_denoiser(seed=2), (32,))
    other.load(tmp_path / "net.sdt")
    assert np.array_equal(other.flat_parameters(), net.flat_parameters())
    with pytest.raises(DenoiserConfigError):
        other.load_flat_parameters(np.zeros(3))


def test_describe() -> None:
    net = build_unet(tiny_denoiser(), (32,))
    info = net.describe()
    assert info["parameter_count"] == net.parameter_count
    assert info["spatial_shape"] == [32]


if __name__ == "__main__":
    test_network_gradients_match_finite_differences()
