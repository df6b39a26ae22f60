"""
Task synthesis: ground truth, forward operator and measurements for every
experiment task. Everything random is derived from the experiment seed, so a
task instance regenerates identically from its config.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import logging
import math

import numpy as np
from numpy.typing import NDArray

from self_diffusion import operators
from self_diffusion.config import ExperimentConfig, SignalSpec
from self_diffusion.operators import LinearOperator
from self_diffusion.rng import Rng, derive_seed
from self_diffusion.tensor_io import image_read

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

# Stream ids under the experiment seed.
MATRIX_STREAM = 10
MASK_STREAM = 11
NOISE_STREAM = 12
IMAGE_STREAM = 13


class TaskError(ValueError):
    pass


def generate_signal(spec: SignalSpec) -> Array:
    """x[t] = sum_j a_j sin(2 pi f_j t / N)."""
    t = np.arange(spec.N)
    x = np.zeros(spec.N)
    for amplitude, frequency in spec.components:
        if not math.isfinite(amplitude):
            raise TaskError(f"Amplitude {amplitude} is not finite")
        if not 0 <= frequency < spec.N / 2:
            raise TaskError(
                f"Frequency {frequency} is outside [0, N/2) for N={spec.N} and would alias"
            )
        x += amplitude * np.sin(2 * math.pi * frequency * t / spec.N)
    return x


def synthetic_image(size: int, seed: int) -> Array:
    """A piecewise-smooth test image in [0.05, 0.95]: gradient, bars, a checker patch and a disk."""
    rng = Rng(seed)
    rows, cols = np.mgrid[0:size, 0:size] / (size - 1)
    angle = float(rng.uniform(0, 2 * math.pi))
    image = 0.3 + 0.3 * (np.cos(angle) * cols + np.sin(angle) * rows)

    n_bars = rng.integers(1, 4)
    for _ in range(n_bars):
        start = rng.integers(0, size - 4)
        width = rng.integers(2, max(3, size // 8))
        level = float(rng.uniform(-0.25, 0.25))
        if rng.integers(0, 2) == 0:
            image[:, start : start + width] += level
        else:
            image[start : start + width, :] += level

    cell = max(2, size // 16)
    top = rng.integers(0, size // 2)
    left = rng.integers(0, size // 2)
    extent = size // 4
    checker = ((np.arange(extent)[:, None] // cell + np.arange(extent)[None, :] // cell) % 2) * 0.2
    image[top : top + extent, left : left + extent] += checker - 0.1

    centre_r, centre_c = rng.uniform(0.25, 0.75, size=(2,))
    radius = float(rng.uniform(0.12, 0.3))
    disk = (rows - centre_r) ** 2 + (cols - centre_c) ** 2 <= radius**2
    image[disk] = float(rng.uniform(0.6, 0.95))
    return np.clip(image, 0.05, 0.95)


def synthetic_images(count: int, size: int, seed: int) -> list[Array]:
    base = derive_seed(seed, IMAGE_STREAM)
    return [synthetic_image(size, derive_seed(base, i)) for i in range(count)]


def _centre_crop(image: Array, size: int, path: Path) -> Array:
    height, width = image.shape
    if height < size or width < size:
        raise TaskError(f"{path} is {height}x{width}, smaller than the {size}x{size} task size")
    top = (height - size) // 2
    left = (width - size) // 2
    return image[top : top + size, left : left + size]


def load_images(cfg: ExperimentConfig) -> list[tuple[str, Array]]:
    if cfg.image_dir is not None:
        paths = sorted(cfg.image_dir.glob("*.pgm"))
        if not paths:
            raise TaskError(f"No PGM images in {cfg.image_dir}")
        return [(p.stem, _centre_crop(image_read(p), cfg.image_size, p)) for p in paths]
    if cfg.synthetic_images == 0:
        raise TaskError(
            f"Task {cfg.task} needs input images: set image_dir or synthetic_images"
        )
    images = synthetic_images(cfg.synthetic_images, cfg.image_size, cfg.seed)
    return [(f"synthetic{i:02d}", image) for i, image in enumerate(images)]


def instance_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.task == "cs1d":
        return ["signal"]
    if cfg.image_dir is not None:
        return [name for name, _ in load_images(cfg)]
    return [f"synthetic{i:02d}" for i in range(cfg.synthetic_images)]


@dataclass
class TaskInstance:
    name: str
    task: str
    operator: LinearOperator
    y: Array
    x_true: Array
    # Ground truth as metrics see it (an image, or the 1D signal).
    reference: Array
    record: dict[str, Any] = field(default_factory=dict)

    def view(self, estimate: Array) -> Array:
        """Maps an operator-domain estimate to the space of `reference`."""
        if self.task == "fourier2d":
            return np.sqrt(estimate[0] ** 2 + estimate[1] ** 2)
        return estimate


def _payload(path: Path) -> Array:
    return image_read(path).astype(np.float64)


def synthesize_task(cfg: ExperimentConfig, index: int = 0) -> TaskInstance:
    op_cfg = cfg.operator
    if cfg.task == "cs1d":
        assert index == 0, "The cs1d task has a single instance"
        x = generate_signal(cfg.signal)
        matrix_seed = derive_seed(cfg.seed, MATRIX_STREAM)
        op = operators.gaussian_cs(op_cfg.measurements, cfg.signal.N, matrix_seed)
        return TaskInstance(
            name="signal",
            task=cfg.task,
            operator=op,
            y=op.apply(x),
            x_true=x,
            reference=x,
            record={"matrix_seed": matrix_seed},
        )

    name, image = load_images(cfg)[index]
    shape = (image.shape[0], image.shape[1])
    record: dict[str, Any] = {"image": name}
    x_true = image
    op: LinearOperator
    match cfg.task:
        case "inpaint":
            if op_cfg.mask_path is not None:
                mask = _payload(op_cfg.mask_path)
                record["mask_path"] = str(op_cfg.mask_path)
            else:
                mask_seed = derive_seed(cfg.seed, MASK_STREAM, index)
                mask = operators.random_rectangle_mask(shape, mask_seed, op_cfg.mask_coverage)
                record["mask_seed"] = mask_seed
            op = operators.inpaint_mask(mask)
            y = op.apply(x_true)
        case "deblur":
            if op_cfg.kernel_path is not None:
                kernel = operators.normalized_kernel(_payload(op_cfg.kernel_path))
                record["kernel_path"] = str(op_cfg.kernel_path)
            elif op_cfg.kernel == "box":
                kernel = operators.box_kernel(op_cfg.kernel_size)
            else:
                kernel = operators.motion_kernel(
                    op_cfg.kernel_length, op_cfg.kernel_angle, op_cfg.kernel_size
                )
            op = operators.blur(kernel, shape, circular=op_cfg.circular)
            y = op.apply(x_true)
        case "sr":
            op = operators.avgpool(op_cfg.factor, shape)
            y = op.apply(x_true)
        case "denoise":
            op = operators.identity(shape)
            noise = Rng(cfg.seed).child(NOISE_STREAM, index).normal(shape, op_cfg.noise_sigma)
            y = x_true + noise
            record["noise_sigma"] = op_cfg.noise_sigma
        case "fourier2d":
            if op_cfg.pattern_path is not None:
                pattern = _payload(op_cfg.pattern_path)
            else:
                pattern = operators.equispaced_pattern(
                    shape, op_cfg.acceleration, op_cfg.acs_lines
                )
            op = operators.masked_fourier(pattern)
            x_true = np.stack([image, np.zeros_like(image)])
            y = op.apply(x_true)
        case _:
            raise TaskError(f"Unknown task {cfg.task}")
    logger.debug(f"Synthesized {cfg.task} instance {name}: y {y.shape}")
    return TaskInstance(
        name=name,
        task=cfg.task,
        operator=op,
        y=y,
        x_true=x_true,
        reference=image,
        record=record | op.describe(),
    )
