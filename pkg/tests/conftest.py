import pytest
import logging

import numpy as np

from self_diffusion import autodiff as ad
from self_diffusion import operators
from self_diffusion.config import SignalSpec
from self_diffusion.tasks import generate_signal, synthetic_image

from tests.util import SEED, SMALL_COMPONENTS, SMALL_M, SMALL_N, Array

logger = logging.getLogger(__name__)


@pytest.fixture(autouse=True)
def double_precision() -> None:
    if ad.get_default_dtype() != np.float64:
        ad.set_default_dtype("float64")


@pytest.fixture(scope="session")
def small_signal() -> Array:
    return generate_signal(SignalSpec(N=SMALL_N, components=SMALL_COMPONENTS))


@pytest.fixture(scope="session")
def small_cs(small_signal: Array) -> tuple[operators.MatrixOperator, Array]:
    """(A, y) for the small compressed-sensing instance."""
    op = operators.gaussian_cs(SMALL_M, SMALL_N, SEED)
    logger.info(f"[Fixture] cs instance {op.range_shape} <- {op.domain_shape}")
    return op, op.apply(small_signal)


@pytest.fixture(scope="session")
def test_image() -> Array:
    return synthetic_image(32, SEED)


@pytest.fixture(scope="session")
def all_operators() -> list[operators.LinearOperator]:
    shape = (16, 16)
    rng = np.random.default_rng(SEED)
    return [
        operators.identity(shape),
        operators.gaussian_cs(10, 24, SEED),
        operators.inpaint_mask(operators.random_rectangle_mask(shape, SEED)),
        operators.blur(operators.motion_kernel(5.0, 30.0, 7), shape),
        operators.blur(operators.box_kernel(3), shape, circular=True),
        operators.avgpool(2, shape),
        operators.avgpool(4, shape),
        operators.masked_fourier(operators.equispaced_pattern(shape, 4, 4)),
        operators.masked_fourier((rng.random(shape) < 0.3).astype(np.float64)),
    ]
