"""
Linear forward operators A with matched adjoints.

Every operator maps arrays of `domain_shape` to arrays of `range_shape` and
satisfies <A x, y> = <x, A^H y> under the real inner product. Complex data is
carried as a leading (re, im) pair axis, so the masked Fourier operator maps
(2, H, W) to (2, H, W).
"""

from abc import ABC, abstractmethod
from typing import Any, Optional

import logging
import math

import numpy as np
from numpy.typing import NDArray
from scipy.signal import convolve2d, correlate2d
from scipy.sparse.linalg import LinearOperator as ScipyOperator, cg

from self_diffusion.rng import Rng

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


class OperatorError(ValueError):
    pass


class LinearOperator(ABC):
    kind: str = "abstract"

    def __init__(
        self,
        domain_shape: tuple[int, ...],
        range_shape: tuple[int, ...],
        seed: Optional[int] = None,
    ):
        self._domain_shape = tuple(domain_shape)
        self._range_shape = tuple(range_shape)
        self.seed = seed

    @property
    def domain_shape(self) -> tuple[int, ...]:
        return self._domain_shape

    @property
    def range_shape(self) -> tuple[int, ...]:
        return self._range_shape

    def apply(self, x: Array) -> Array:
        if x.shape != self.domain_shape:
            raise OperatorError(
                f"{self.kind}: apply expects shape {self.domain_shape}, got {x.shape}"
            )
        return self._apply(x)

    def adjoint(self, y: Array) -> Array:
        if y.shape != self.range_shape:
            raise OperatorError(
                f"{self.kind}: adjoint expects shape {self.range_shape}, got {y.shape}"
            )
        return self._adjoint(y)

    @abstractmethod
    def _apply(self, x: Array) -> Array: ...

    @abstractmethod
    def _adjoint(self, y: Array) -> Array: ...

    def describe(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "domain_shape": list(self.domain_shape),
            "range_shape": list(self.range_shape),
            "seed": self.seed,
        }

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.domain_shape} -> {self.range_shape})"


class IdentityOperator(LinearOperator):
    kind = "identity"

    def __init__(self, shape: tuple[int, ...]):
        super().__init__(shape, shape)

    def _apply(self, x: Array) -> Array:
        return x.copy()

    def _adjoint(self, y: Array) -> Array:
        return y.copy()


class MatrixOperator(LinearOperator):
    kind = "matrix"

    def __init__(self, matrix: Array, seed: Optional[int] = None):
        assert matrix.ndim == 2, f"Expected a 2D matrix, got shape {matrix.shape}"
        super().__init__((matrix.shape[1],), (matrix.shape[0],), seed)
        self.matrix = matrix

    def _apply(self, x: Array) -> Array:
        return self.matrix @ x

    def _adjoint(self, y: Array) -> Array:
        return self.matrix.T @ y


class MaskOperator(LinearOperator):
    kind = "mask"

    def __init__(self, mask: Array, seed: Optional[int] = None):
        super().__init__(mask.shape, mask.shape, seed)
        self.mask = mask

    def _apply(self, x: Array) -> Array:
        return x * self.mask

    def _adjoint(self, y: Array) -> Array:
        return y * self.mask


class BlurOperator(LinearOperator):
    """Same-size 2D convolution; the adjoint correlates with the same kernel."""

    kind = "blur"

    def __init__(self, kernel: Array, image_shape: tuple[int, int], circular: bool = False):
        super().__init__(image_shape, image_shape)
        self.kernel = kernel
        self.circular = circular
        self._boundary = "wrap" if circular else "fill"

    def _apply(self, x: Array) -> Array:
        return convolve2d(x, self.kernel, mode="same", boundary=self._boundary)

    def _adjoint(self, y: Array) -> Array:
        return correlate2d(y, self.kernel, mode="same", boundary=self._boundary)

    def describe(self) -> dict[str, Any]:
        return super().describe() | {
            "kernel_shape": list(self.kernel.shape),
            "circular": self.circular,
        }


class AvgPoolOperator(LinearOperator):
    """Block means over factor×factor cells; the adjoint spreads y / factor²."""

    kind = "avgpool"

    def __init__(self, factor: int, image_shape: tuple[int, int]):
        height, width = image_shape
        super().__init__(image_shape, (height // factor, width // factor))
        self.factor = factor

    def _apply(self, x: Array) -> Array:
        f = self.factor
        h, w = self.range_shape
        return x.reshape(h, f, w, f).mean(axis=(1, 3))

    def _adjoint(self, y: Array) -> Array:
        f = self.factor
        return np.repeat(np.repeat(y, f, axis=0), f, axis=1) / (f * f)

    def describe(self) -> dict[str, Any]:
        return super().describe() | {"factor": self.factor}


class MaskedFourierOperator(LinearOperator):
    """Orthonormal 2D FFT followed by a binary sampling pattern."""

    kind = "masked_fourier"

    def __init__(self, pattern: Array, seed: Optional[int] = None):
        shape = (2, *pattern.shape)
        super().__init__(shape, shape, seed)
        self.pattern = pattern

    def _apply(self, x: Array) -> Array:
        spectrum = np.fft.fft2(x[0] + 1j * x[1], norm="ortho") * self.pattern
        return np.stack([spectrum.real, spectrum.imag])

    def _adjoint(self, y: Array) -> Array:
        image = np.fft.ifft2((y[0] + 1j * y[1]) * self.pattern, norm="ortho")
        return np.stack([image.real, image.imag])

    def describe(self) -> dict[str, Any]:
        return super().describe() | {
            "sampled_fraction": float(self.pattern.mean()),
        }


def _require_binary(name: str, values: Array) -> None:
    if not np.all((values == 0) | (values == 1)):
        raise OperatorError(f"{name} must contain only 0 and 1")


def identity(shape: tuple[int, ...]) -> IdentityOperator:
    return IdentityOperator(shape)


def gaussian_cs(m: int, n: int, seed: int) -> MatrixOperator:
    """Dense m×n Gaussian matrix scaled to unit Frobenius norm."""
    if not 0 < m <= n:
        raise OperatorError(f"gaussian_cs needs 0 < m <= n, got m={m}, n={n}")
    matrix = Rng(seed).normal((m, n))
    matrix /= np.linalg.norm(matrix)
    return MatrixOperator(matrix, seed=seed)


def inpaint_mask(mask: Array, seed: Optional[int] = None) -> MaskOperator:
    _require_binary("inpainting mask", mask)
    return MaskOperator(mask.astype(np.float64), seed=seed)


def blur(
    kernel: Array, image_shape: tuple[int, int], circular: bool = False
) -> BlurOperator:
    if kernel.ndim == 1:
        kernel = kernel.reshape(1, -1)
    if kernel.ndim != 2 or any(side % 2 == 0 for side in kernel.shape):
        raise OperatorError(f"Blur kernel sides must be odd, got shape {kernel.shape}")
    if abs(float(kernel.sum()) - 1.0) > 1e-8:
        raise OperatorError(f"Blur kernel must sum to 1, sums to {kernel.sum():.6g}")
    return BlurOperator(kernel.astype(np.float64), image_shape, circular)


def normalized_kernel(kernel: Array) -> Array:
    """Rescales a stored kernel (PGM keeps it peak-normalized) to unit sum."""
    total = float(kernel.sum())
    if not total > 0.0:
        raise OperatorError(f"Blur kernel must have a positive sum, got {total:.6g}")
    return kernel / total


def avgpool(factor: int, image_shape: tuple[int, int]) -> AvgPoolOperator:
    if factor < 1 or any(side % factor != 0 for side in image_shape):
        raise OperatorError(
            f"Image shape {image_shape} is not divisible by pooling factor {factor}"
        )
    return AvgPoolOperator(factor, image_shape)


def masked_fourier(pattern: Array, seed: Optional[int] = None) -> MaskedFourierOperator:
    _require_binary("Fourier sampling pattern", pattern)
    if pattern.ndim != 2:
        raise OperatorError(f"Sampling pattern must be 2D, got shape {pattern.shape}")
    return MaskedFourierOperator(pattern.astype(np.float64), seed)


def adjoint_test(op: LinearOperator, seed: int = 0, probes: int = 16) -> float:
    """
    max over random probes of |<Ax, y> - <x, A^H y>| / (||Ax|| ||y|| + 1e-30).
    """
    assert probes >= 1
    rng = Rng(seed)
    worst = 0.0
    for i in range(probes):
        probe = rng.child(i)
        x = probe.normal(op.domain_shape)
        y = probe.normal(op.range_shape)
        ax = op.apply(x)
        lhs = float(np.vdot(ax, y))
        rhs = float(np.vdot(x, op.adjoint(y)))
        residual = abs(lhs - rhs) / (float(np.linalg.norm(ax) * np.linalg.norm(y)) + 1e-30)
        worst = max(worst, residual)
    logger.debug(f"adjoint test for {op!r}: max residual {worst:.3e}")
    return worst


def minimum_norm_solution(op: LinearOperator, y: Array, rtol: float = 1e-10) -> Array:
    """
    A^+ y = A^H (A A^H)^{-1} y by conjugate gradients on the range side.
    Equal to A^H y when A has orthonormal rows.
    """
    if y.shape != op.range_shape:
        raise OperatorError(f"Measurements have shape {y.shape}, operator range is {op.range_shape}")
    size = int(np.prod(op.range_shape))

    def gram(v: Array) -> Array:
        return op.apply(op.adjoint(v.reshape(op.range_shape))).reshape(-1)

    normal = ScipyOperator((size, size), matvec=gram, dtype=np.float64)
    w, info = cg(normal, y.reshape(-1), rtol=rtol, maxiter=10 * size)
    if info != 0:
        raise OperatorError(f"Conjugate gradients did not converge on A A^H (info={info})")
    return op.adjoint(w.reshape(op.range_shape))


# ---------------------------------------------------------------------------
# Payload generators


def random_rectangle_mask(
    shape: tuple[int, int],
    seed: int,
    coverage: tuple[float, float] = (0.10, 0.25),
) -> Array:
    """One random rectangle of zeros covering a uniform fraction of the area."""
    height, width = shape
    rng = Rng(seed)
    fraction = float(rng.uniform(*coverage))
    aspect = math.exp(float(rng.uniform(math.log(0.5), math.log(2.0))))
    area = fraction * height * width
    rect_h = int(np.clip(round(math.sqrt(area * aspect)), 1, height))
    rect_w = int(np.clip(round(area / rect_h), 1, width))
    top = rng.integers(0, height - rect_h + 1)
    left = rng.integers(0, width - rect_w + 1)
    mask = np.ones(shape)
    mask[top : top + rect_h, left : left + rect_w] = 0.0
    return mask


def box_kernel(size: int) -> Array:
    assert size % 2 == 1
    return np.full((size, size), 1.0 / (size * size))


def motion_kernel(length: float, angle_degrees: float, size: Optional[int] = None) -> Array:
    """
    Normalized linear-motion kernel: a centred segment of `length` pixels at
    `angle_degrees`, splatted bilinearly onto an odd-sized grid.
    """
    assert length > 0
    if size is None:
        size = int(math.ceil(length)) // 2 * 2 + 1
    assert size % 2 == 1, "Motion kernel size must be odd."
    kernel = np.zeros((size, size))
    centre = size // 2
    theta = math.radians(angle_degrees)
    samples = max(2, int(math.ceil(length * 4)))
    for s in np.linspace(-length / 2, length / 2, samples):
        row = centre - s * math.sin(theta)
        col = centre + s * math.cos(theta)
        r0, c0 = int(math.floor(row)), int(math.floor(col))
        dr, dc = row - r0, col - c0
        for rr, cc, weight in (
            (r0, c0, (1 - dr) * (1 - dc)),
            (r0 + 1, c0, dr * (1 - dc)),
            (r0, c0 + 1, (1 - dr) * dc),
            (r0 + 1, c0 + 1, dr * dc),
        ):
            if 0 <= rr < size and 0 <= cc < size:
                kernel[rr, cc] += weight
    return kernel / kernel.sum()


def equispaced_pattern(
    shape: tuple[int, int], acceleration: int, acs_lines: int = 0
) -> Array:
    """
    Cartesian sampling along the phase-encoding axis (columns): every
    `acceleration`-th column plus `acs_lines` central columns. The pattern is
    laid out in unshifted FFT order, low frequencies at index 0.
    """
    height, width = shape
    assert acceleration >= 1 and 0 <= acs_lines <= width
    centred = np.zeros(width)
    centred[::acceleration] = 1.0
    start = width // 2 - acs_lines // 2
    centred[start : start + acs_lines] = 1.0
    columns = np.fft.ifftshift(centred)
    return np.tile(columns, (height, 1))
