"""
The untrained U-Net self-denoiser D_theta.

Layout per level l (channels base * 2**l):

    encoder 0      block(in -> c0), block(c0 -> c0)                 -> skip 0
    encoder l      block(c_{l-1} -> c_l, stride 2), block(c_l -> c_l) -> skip l
    decoder l      upsample(h), concat(skip l-1), block(c_l + c_{l-1} -> c_{l-1}),
                   block(c_{l-1} -> c_{l-1})
    head           1x1 conv(c0 -> out), optional sigmoid

A block is conv -> instance norm -> per-channel gain/offset -> leaky ReLU.
The deepest encoder level is the bottleneck.
"""

from pathlib import Path
from typing import Literal

import itertools
import logging

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from self_diffusion import autodiff as ad
from self_diffusion.autodiff import Tensor
from self_diffusion.rng import Rng
from self_diffusion.tensor_io import read_tensor, write_tensor

logger = logging.getLogger(__name__)


class DenoiserConfigError(ValueError):
    pass


class DenoiserConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    dims: Literal[1, 2] = 1
    in_channels: int = Field(default=1, ge=1)
    out_channels: int = Field(default=1, ge=1)
    depth: int = Field(default=3, ge=1)
    base_channels: int = Field(default=32, ge=1)
    kernel_size: int = Field(default=3, ge=1)
    slope: float = 0.1
    norm: Literal["instance", "none"] = "instance"
    norm_eps: float = Field(default=1e-5, gt=0)
    head: Literal["linear", "sigmoid"] = "linear"
    init_std: float = Field(default=0.02, gt=0)
    seed: int = Field(default=0, ge=0)


class ConvBlock:
    def __init__(
        self,
        name: str,
        in_channels: int,
        out_channels: int,
        config: DenoiserConfig,
        rng: Rng,
        stride: int = 1,
    ):
        k = config.kernel_size
        dims = config.dims
        self.config = config
        self.stride = stride
        self.weight = ad.parameter(
            rng.normal((out_channels, in_channels) + (k,) * dims, config.init_std),
            name=f"{name}.weight",
        )
        self.bias = ad.parameter(np.zeros(out_channels), name=f"{name}.bias")
        channel_shape = (1, out_channels) + (1,) * dims
        self.gain = ad.parameter(np.ones(channel_shape), name=f"{name}.gain")
        self.offset = ad.parameter(np.zeros(channel_shape), name=f"{name}.offset")

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias, self.gain, self.offset]

    def __call__(self, x: Tensor) -> Tensor:
        h = ad.conv(
            x, self.weight, self.bias, stride=self.stride, padding=self.config.kernel_size // 2
        )
        if self.config.norm == "instance":
            h = ad.instance_norm(h, eps=self.config.norm_eps)
        h = ad.add(ad.mul(h, self.gain), self.offset)
        return ad.leaky_relu(h, self.config.slope)


class DenoiserNetwork:
    def __init__(self, config: DenoiserConfig, spatial_shape: tuple[int, ...]):
        self.config = config
        self.spatial_shape = tuple(spatial_shape)
        rng = Rng(config.seed)
        layer_ids = itertools.count()

        def block(name: str, cin: int, cout: int, stride: int = 1) -> ConvBlock:
            return ConvBlock(name, cin, cout, config, rng.child(next(layer_ids)), stride)

        channels = [config.base_channels * 2**level for level in range(config.depth + 1)]
        self.encoder: list[tuple[ConvBlock, ConvBlock]] = [
            (
                block("enc0.a", config.in_channels, channels[0]),
                block("enc0.b", channels[0], channels[0]),
            )
        ]
        for level in range(1, config.depth + 1):
            self.encoder.append(
                (
                    block(f"enc{level}.down", channels[level - 1], channels[level], stride=2),
                    block(f"enc{level}.b", channels[level], channels[level]),
                )
            )
        self.decoder: list[tuple[ConvBlock, ConvBlock]] = []
        for level in range(config.depth, 0, -1):
            self.decoder.append(
                (
                    block(
                        f"dec{level}.a",
                        channels[level] + channels[level - 1],
                        channels[level - 1],
                    ),
                    block(f"dec{level}.b", channels[level - 1], channels[level - 1]),
                )
            )
        head_rng = rng.child(next(layer_ids))
        self.head_weight = ad.parameter(
            head_rng.normal(
                (config.out_channels, channels[0]) + (1,) * config.dims, config.init_std
            ),
            name="head.weight",
        )
        self.head_bias = ad.parameter(np.zeros(config.out_channels), name="head.bias")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (1, self.config.in_channels, *self.spatial_shape)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return (1, self.config.out_channels, *self.spatial_shape)

    def blocks(self) -> list[ConvBlock]:
        return [b for pair in self.encoder + self.decoder for b in pair]

    def parameters(self) -> list[Tensor]:
        params = [p for b in self.blocks() for p in b.parameters()]
        return params + [self.head_weight, self.head_bias]

    def weights(self) -> list[Tensor]:
        """Convolution kernels only (Gaussian-initialized)."""
        return [b.weight for b in self.blocks()] + [self.head_weight]

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, x: Tensor) -> Tensor:
        return denoise(self, x)

    def evaluate(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        with ad.no_grad():
            return denoise(self, Tensor(x)).numpy()

    def flat_parameters(self) -> NDArray[np.float64]:
        return np.concatenate([p.data.reshape(-1) for p in self.parameters()])

    def load_flat_parameters(self, flat: NDArray[np.float64]) -> None:
        if flat.shape != (self.parameter_count,):
            raise DenoiserConfigError(
                f"Checkpoint holds {flat.size} values, network has {self.parameter_count}"
            )
        offset = 0
        for p in self.parameters():
            p.data[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def save(self, path: Path) -> None:
        write_tensor(path, self.flat_parameters())

    def load(self, path: Path) -> None:
        self.load_flat_parameters(read_tensor(path).astype(np.float64))

    def describe(self) -> dict[str, object]:
        return {
            **self.config.model_dump(),
            "spatial_shape": list(self.spatial_shape),
            "parameter_count": self.parameter_count,
        }


def build_unet(config: DenoiserConfig, spatial_shape: tuple[int, ...]) -> DenoiserNetwork:
    if len(spatial_shape) != config.dims:
        raise DenoiserConfigError(
            f"A {config.dims}D denoiser needs {config.dims} spatial axes, got {spatial_shape}"
        )
    if config.kernel_size % 2 == 0:
        raise DenoiserConfigError(f"Kernel size must be odd, got {config.kernel_size}")
    multiple = 2**config.depth
    for size in spatial_shape:
        if size % multiple != 0:
            padding = -size % multiple
            raise DenoiserConfigError(
                f"Spatial size {size} is not divisible by 2**depth = {multiple}; "
                f"pad by {padding} to {size + padding} or reduce depth"
            )
    net = DenoiserNetwork(config, spatial_shape)
    logger.info(
        f"Built {config.dims}D U-Net depth={config.depth} base={config.base_channels} "
        f"for {spatial_shape}: {net.parameter_count} parameters"
    )
    return net


def denoise(net: DenoiserNetwork, x: Tensor) -> Tensor:
    if x.shape != net.input_shape:
        raise ad.ShapeMismatchError(
            f"Denoiser expects input {net.input_shape}, got {x.shape}"
        )
    skips: list[Tensor] = []
    h = x
    for first, second in net.encoder:
        h = second(first(h))
        skips.append(h)
    h = skips.pop()
    for first, second in net.decoder:
        skip = skips.pop()
        h = ad.concat([ad.upsample(h, 2), skip], axis=1)
        h = second(first(h))
    out = ad.conv(h, net.head_weight, net.head_bias)
    if net.config.head == "sigmoid":
        out = ad.sigmoid(out)
    return out
