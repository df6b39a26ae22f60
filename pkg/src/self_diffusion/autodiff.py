"""
Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a numpy array. Operations are registered by kind and
dispatched through `forward_op`; each call records the producing op and its
inputs on the output tensor, so the output is the root of an acyclic
computation graph. `backward` walks that graph in reverse topological order
and returns gradients for the parameter leaves.

Complex values are carried as a channel pair: the axis immediately before the
transformed spatial axes holds (re, im). `real_fft` inserts that axis,
`real_ifft` removes it, `fft`/`ifft` map pairs to pairs. All transforms use
orthonormal scaling, so they are unitary and their adjoints are their
inverses.
"""

from abc import ABC, abstractmethod
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Any, Callable, ClassVar, Iterator, Optional, Protocol, Sequence

import logging
import threading

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray
from scipy.special import expit

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


class AutodiffError(Exception):
    pass


class ShapeMismatchError(AutodiffError):
    pass


class NonFiniteError(AutodiffError):
    pass


_DEFAULT_DTYPE: list[np.dtype[Any]] = [np.dtype(np.float64)]


def set_default_dtype(dtype: str | type | np.dtype[Any]) -> None:
    resolved = np.dtype(dtype)
    if resolved not in (np.dtype(np.float64), np.dtype(np.float32)):
        raise AutodiffError(f"Unsupported tensor dtype: {resolved}")
    logger.info(f"Default tensor dtype set to {resolved}")
    _DEFAULT_DTYPE[0] = resolved


def get_default_dtype() -> np.dtype[Any]:
    return _DEFAULT_DTYPE[0]


class _GradMode(threading.local):
    enabled: bool = True


_GRAD_MODE = _GradMode()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording a graph (the current thread only)."""
    previous = _GRAD_MODE.enabled
    _GRAD_MODE.enabled = False
    try:
        yield
    finally:
        _GRAD_MODE.enabled = previous


def grad_enabled() -> bool:
    return _GRAD_MODE.enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "op", "parents", "name")

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        array = np.asarray(data, dtype=get_default_dtype())
        # 0-d stays 0-d.
        self.data: Array = array if array.flags.c_contiguous else np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.op: Optional["Op"] = None
        self.parents: tuple["Tensor", ...] = ()
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def numpy(self) -> Array:
        return self.data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError(
                f"item() needs a single-element tensor, got shape {self.shape}"
            )
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        label = f" name={self.name}" if self.name else ""
        kind = self.op.kind if self.op is not None else "leaf"
        return f"Tensor(shape={self.shape}, op={kind}{label})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return add(self, _as_tensor(other))

    def __radd__(self, other: float) -> "Tensor":
        return add(_as_tensor(other), self)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return sub(self, _as_tensor(other))

    def __rsub__(self, other: float) -> "Tensor":
        return sub(_as_tensor(other), self)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __rmul__(self, other: float) -> "Tensor":
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def _as_tensor(value: "Tensor | float") -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value))


def parameter(data: Any, name: Optional[str] = None) -> Tensor:
    return Tensor(np.array(data, copy=True), requires_grad=True, name=name)


class Op(ABC):
    """
    One differentiable operation. An instance is created per call, so it
    may keep whatever forward values its backward needs.
    """

    kind: ClassVar[str]

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        return None

    @abstractmethod
    def forward(self, *xs: Array) -> Array: ...

    @abstractmethod
    def backward(self, grad: Array) -> tuple[Optional[Array], ...]: ...


OP_REGISTRY: dict[str, type[Op]] = {}


def register_op(cls: type[Op]) -> type[Op]:
    assert cls.kind not in OP_REGISTRY, f"Op kind {cls.kind} registered twice."
    OP_REGISTRY[cls.kind] = cls
    return cls


def forward_op(
    kind: str, inputs: Sequence[Tensor], attrs: Optional[dict[str, Any]] = None
) -> Tensor:
    if kind not in OP_REGISTRY:
        raise AutodiffError(f"Unknown op kind: {kind}")
    for i, t in enumerate(inputs):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{kind}: input {i} (shape {t.shape}) is not finite")
    op = OP_REGISTRY[kind](**(attrs or {}))
    op.check_shapes(*[t.shape for t in inputs])
    out_data = op.forward(*[t.data for t in inputs])
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{kind}: produced non-finite output")
    requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires_grad)
    if requires_grad:
        out.op = op
        out.parents = tuple(inputs)
    return out


@dataclass
class CompGraph:
    """Nodes reachable from an output, inputs before the ops that use them."""

    nodes: list[Tensor]

    @classmethod
    def trace(cls, output: Tensor) -> "CompGraph":
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in reversed(node.parents):
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(nodes=order)

    def parameters(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, graph: Optional[CompGraph] = None) -> dict[Tensor, Array]:
    """
    Returns dL/dθ for every parameter leaf reachable from `loss`.
    Gradients are summed at fan-out points.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if graph is None:
        graph = CompGraph.trace(loss)
    pending: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[Tensor, Array] = {}
    for node in reversed(graph.nodes):
        grad = pending.pop(id(node), None)
        if grad is None:
            continue
        if node.op is None:
            if node.requires_grad:
                leaf_grads[node] = grad
            continue
        for parent, parent_grad in zip(node.parents, node.op.backward(grad)):
            if parent_grad is None or not parent.requires_grad:
                continue
            existing = pending.get(id(parent))
            pending[id(parent)] = (
                parent_grad if existing is None else existing + parent_grad
            )
    return leaf_grads


# ---------------------------------------------------------------------------
# Elementwise and reductions


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class _Binary(Op):
    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        a, b = shapes
        try:
            np.broadcast_shapes(a, b)
        except ValueError:
            raise ShapeMismatchError(f"{self.kind}: cannot broadcast {a} with {b}")


@register_op
class Add(_Binary):
    kind = "add"

    def forward(self, *xs: Array) -> Array:
        a, b = xs
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(grad, self.shapes[1])


@register_op
class Sub(_Binary):
    kind = "sub"

    def forward(self, *xs: Array) -> Array:
        a, b = xs
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return _unbroadcast(grad, self.shapes[0]), _unbroadcast(-grad, self.shapes[1])


@register_op
class Mul(_Binary):
    kind = "mul"

    def forward(self, *xs: Array) -> Array:
        self.a, self.b = xs
        return self.a * self.b

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (
            _unbroadcast(grad * self.b, self.a.shape),
            _unbroadcast(grad * self.a, self.b.shape),
        )


@register_op
class Scale(Op):
    kind = "scale"

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, *xs: Array) -> Array:
        return xs[0] * self.factor

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (grad * self.factor,)


@register_op
class Matmul(Op):
    kind = "matmul"

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        w, x = shapes
        if len(w) != 2 or len(x) not in (1, 2) or w[1] != x[0]:
            raise ShapeMismatchError(f"matmul: incompatible shapes {w} and {x}")

    def forward(self, *xs: Array) -> Array:
        self.w, self.x = xs
        return self.w @ self.x

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        if self.x.ndim == 1:
            grad_w = np.outer(grad, self.x)
        else:
            grad_w = grad @ self.x.T
        return grad_w, self.w.T @ grad


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@register_op
class Sum(Op):
    kind = "sum"

    def __init__(self, axis: int | Sequence[int] | None = None, keepdims: bool = False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        self.in_shape = x.shape
        self.axes = _normalize_axes(self.axis, x.ndim)
        out = np.asarray(x.sum(axis=self.axes, keepdims=self.keepdims))
        self.out_shape = out.shape
        return out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        grad = grad.reshape(self.out_shape)
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


@register_op
class Mean(Sum):
    kind = "mean"

    def forward(self, *xs: Array) -> Array:
        total = super().forward(*xs)
        self.count = int(np.prod([self.in_shape[a] for a in self.axes]))
        return total / self.count

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        (expanded,) = super().backward(grad)
        assert expanded is not None
        return (expanded / self.count,)


@register_op
class SquaredNorm(Op):
    kind = "l2sq"

    def forward(self, *xs: Array) -> Array:
        (self.x,) = xs
        return np.asarray(np.sum(self.x * self.x))

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (2.0 * grad * self.x,)


@register_op
class SmoothedAbs(Op):
    """sqrt(x² + eps²) elementwise, or sqrt(Σ_axis x² + eps²) reducing `axis`."""

    kind = "smoothed_abs"

    def __init__(self, axis: Optional[int] = None, eps: float = 1e-8):
        self.axis = axis
        self.eps = eps

    def forward(self, *xs: Array) -> Array:
        (self.x,) = xs
        if self.axis is None:
            self.out = np.sqrt(self.x * self.x + self.eps**2)
        else:
            self.out = np.sqrt(np.sum(self.x * self.x, axis=self.axis) + self.eps**2)
        return self.out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        ratio = grad / self.out
        if self.axis is not None:
            ratio = np.expand_dims(ratio, self.axis)
        return (ratio * self.x,)


@register_op
class LeakyRelu(Op):
    kind = "leaky_relu"

    def __init__(self, slope: float = 0.1):
        self.slope = slope

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        self.positive = x > 0
        return np.where(self.positive, x, self.slope * x)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (np.where(self.positive, grad, self.slope * grad),)


@register_op
class Sigmoid(Op):
    kind = "sigmoid"

    def forward(self, *xs: Array) -> Array:
        self.out = expit(xs[0])
        return self.out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (grad * self.out * (1.0 - self.out),)


# ---------------------------------------------------------------------------
# Shape manipulation


@register_op
class Reshape(Op):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(shape)

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        (shape,) = shapes
        if int(np.prod(shape)) != int(np.prod(self.shape)):
            raise ShapeMismatchError(f"reshape: cannot view {shape} as {self.shape}")

    def forward(self, *xs: Array) -> Array:
        self.in_shape = xs[0].shape
        return xs[0].reshape(self.shape)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (grad.reshape(self.in_shape),)


@register_op
class Concat(Op):
    kind = "concat"

    def __init__(self, axis: int = 1):
        self.axis = axis

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        first = shapes[0]
        for shape in shapes[1:]:
            if len(shape) != len(first) or any(
                a != b for i, (a, b) in enumerate(zip(shape, first)) if i != self.axis % len(first)
            ):
                raise ShapeMismatchError(
                    f"concat: shapes {first} and {shape} differ off axis {self.axis}"
                )

    def forward(self, *xs: Array) -> Array:
        self.sizes = [x.shape[self.axis] for x in xs]
        return np.concatenate(xs, axis=self.axis)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, splits, axis=self.axis))


@register_op
class Stack(Op):
    kind = "stack"

    def __init__(self, axis: int = -1):
        self.axis = axis

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        for shape in shapes[1:]:
            if shape != shapes[0]:
                raise ShapeMismatchError(f"stack: shapes {shapes[0]} and {shape} differ")

    def forward(self, *xs: Array) -> Array:
        self.count = len(xs)
        return np.stack(xs, axis=self.axis)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return tuple(np.take(grad, i, axis=self.axis) for i in range(self.count))


@register_op
class FiniteDiff(Op):
    """Forward difference along `axis`; the last entry along the axis is 0."""

    kind = "finite_diff"

    def __init__(self, axis: int):
        self.axis = axis

    def forward(self, *xs: Array) -> Array:
        x = np.moveaxis(xs[0], self.axis, -1)
        out = np.zeros_like(x)
        out[..., :-1] = x[..., 1:] - x[..., :-1]
        return np.moveaxis(out, -1, self.axis)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        g = np.moveaxis(grad, self.axis, -1)
        out = np.zeros_like(g)
        out[..., 1:] += g[..., :-1]
        out[..., :-1] -= g[..., :-1]
        return (np.moveaxis(out, -1, self.axis),)


# ---------------------------------------------------------------------------
# Convolution and resampling. Layout (batch, channels, *spatial), 1 or 2
# spatial axes.


@register_op
class Conv(Op):
    kind = "conv"

    def __init__(self, stride: int = 1, padding: int = 0):
        assert stride >= 1 and padding >= 0
        self.stride = stride
        self.padding = padding

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        x, w, b = shapes
        dims = len(x) - 2
        if dims not in (1, 2) or len(w) != dims + 2 or w[1] != x[1] or b != (w[0],):
            raise ShapeMismatchError(
                f"conv: input {x}, weight {w} and bias {b} do not conform"
            )
        for size, k in zip(x[2:], w[2:]):
            if size + 2 * self.padding < k:
                raise ShapeMismatchError(
                    f"conv: kernel {w[2:]} larger than padded input {x[2:]}"
                )

    def forward(self, *xs: Array) -> Array:
        x, w, b = xs
        dims = x.ndim - 2
        spatial = tuple(range(2, 2 + dims))
        padded = np.pad(x, [(0, 0), (0, 0)] + [(self.padding, self.padding)] * dims)
        windows = sliding_window_view(padded, w.shape[2:], axis=spatial)
        windows = windows[(slice(None), slice(None)) + (slice(None, None, self.stride),) * dims]
        self.x_shape = x.shape
        self.padded_shape = padded.shape
        self.windows = windows
        self.w = w
        kernel_axes = tuple(range(2 + dims, 2 + 2 * dims))
        out = np.tensordot(windows, w, axes=((1, *kernel_axes), (1, *spatial)))
        out = np.moveaxis(out, -1, 1)
        return np.ascontiguousarray(out + b.reshape((1, -1) + (1,) * dims))

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        dims = grad.ndim - 2
        spatial = tuple(range(2, 2 + dims))
        grad_b = grad.sum(axis=(0, *spatial))
        grad_w = np.tensordot(grad, self.windows, axes=((0, *spatial), (0, *spatial)))
        # (batch, *out_spatial, in_channels, *kernel)
        grad_windows = np.tensordot(grad, self.w, axes=((1,), (0,)))
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        out_spatial = grad.shape[2:]
        s = self.stride
        for offset in np.ndindex(*self.w.shape[2:]):
            target = (slice(None), slice(None)) + tuple(
                slice(o, o + s * (n - 1) + 1, s) for o, n in zip(offset, out_spatial)
            )
            grad_padded[target] += np.moveaxis(grad_windows[(Ellipsis, *offset)], -1, 1)
        p = self.padding
        crop = (slice(None), slice(None)) + tuple(
            slice(p, p + n) for n in self.x_shape[2:]
        )
        return grad_padded[crop], grad_w, grad_b


@register_op
class Upsample(Op):
    """Nearest-neighbour upsampling of every spatial axis by `factor`."""

    kind = "upsample"

    def __init__(self, factor: int = 2):
        self.factor = factor

    def forward(self, *xs: Array) -> Array:
        out = xs[0]
        for axis in range(2, out.ndim):
            out = np.repeat(out, self.factor, axis=axis)
        return out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        f = self.factor
        shape: list[int] = list(grad.shape[:2])
        for n in grad.shape[2:]:
            shape.extend([n // f, f])
        summed_axes = tuple(3 + 2 * i for i in range(grad.ndim - 2))
        return (grad.reshape(shape).sum(axis=summed_axes),)


@register_op
class InstanceNorm(Op):
    """Per-sample, per-channel normalization over the spatial axes."""

    kind = "instance_norm"

    def __init__(self, eps: float = 1e-5):
        self.eps = eps

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        self.axes = tuple(range(2, x.ndim))
        centered = x - x.mean(axis=self.axes, keepdims=True)
        var = np.mean(centered * centered, axis=self.axes, keepdims=True)
        self.inv_std = 1.0 / np.sqrt(var + self.eps)
        self.out = centered * self.inv_std
        return self.out

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        mean_grad = grad.mean(axis=self.axes, keepdims=True)
        mean_proj = np.mean(grad * self.out, axis=self.axes, keepdims=True)
        return (self.inv_std * (grad - mean_grad - self.out * mean_proj),)


# ---------------------------------------------------------------------------
# Orthonormal Fourier transforms over the trailing `ndim` axes.


def _pair_axis(ndim: int) -> int:
    return -(ndim + 1)


def _to_complex(x: Array, ndim: int) -> NDArray[np.complex128]:
    axis = _pair_axis(ndim)
    return np.take(x, 0, axis=axis) + 1j * np.take(x, 1, axis=axis)


def _to_pair(z: NDArray[np.complex128], ndim: int, dtype: np.dtype[Any]) -> Array:
    return np.stack([z.real, z.imag], axis=_pair_axis(ndim)).astype(dtype)


def _fft_axes(ndim: int) -> tuple[int, ...]:
    return tuple(range(-ndim, 0))


class _Fourier(Op):
    def __init__(self, ndim: int = 1):
        assert ndim in (1, 2), "Fourier ops support 1 or 2 transformed axes."
        self.ndim = ndim

    def _check_pair(self, shape: tuple[int, ...]) -> None:
        if len(shape) < self.ndim + 1 or shape[_pair_axis(self.ndim)] != 2:
            raise ShapeMismatchError(
                f"{self.kind}: expected a (re, im) pair axis before the last "
                f"{self.ndim} axes, got shape {shape}"
            )


@register_op
class RealFFT(_Fourier):
    """Full orthonormal spectrum of a real signal, as a (re, im) pair."""

    kind = "real_fft"

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        z = np.fft.fftn(x, axes=_fft_axes(self.ndim), norm="ortho")
        return _to_pair(z, self.ndim, x.dtype)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        z = np.fft.ifftn(_to_complex(grad, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return (z.real.astype(grad.dtype),)


@register_op
class RealIFFT(_Fourier):
    """Real part of the orthonormal inverse transform of a (re, im) pair."""

    kind = "real_ifft"

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        self._check_pair(shapes[0])

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        z = np.fft.ifftn(_to_complex(x, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return z.real.astype(x.dtype)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        z = np.fft.fftn(grad, axes=_fft_axes(self.ndim), norm="ortho")
        return (_to_pair(z, self.ndim, grad.dtype),)


@register_op
class FFT(_Fourier):
    kind = "fft"

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        self._check_pair(shapes[0])

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        z = np.fft.fftn(_to_complex(x, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return _to_pair(z, self.ndim, x.dtype)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        z = np.fft.ifftn(_to_complex(grad, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return (_to_pair(z, self.ndim, grad.dtype),)


@register_op
class IFFT(_Fourier):
    kind = "ifft"

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        self._check_pair(shapes[0])

    def forward(self, *xs: Array) -> Array:
        (x,) = xs
        z = np.fft.ifftn(_to_complex(x, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return _to_pair(z, self.ndim, x.dtype)

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        z = np.fft.fftn(_to_complex(grad, self.ndim), axes=_fft_axes(self.ndim), norm="ortho")
        return (_to_pair(z, self.ndim, grad.dtype),)


# ---------------------------------------------------------------------------
# Linear operators as graph nodes


class SupportsLinearMap(Protocol):
    @property
    def domain_shape(self) -> tuple[int, ...]: ...

    @property
    def range_shape(self) -> tuple[int, ...]: ...

    def apply(self, x: Array) -> Array: ...

    def adjoint(self, y: Array) -> Array: ...


@register_op
class Linear(Op):
    """Applies a linear operator; the backward pass is its adjoint."""

    kind = "linear"

    def __init__(self, operator: SupportsLinearMap):
        self.operator = operator

    def check_shapes(self, *shapes: tuple[int, ...]) -> None:
        if shapes[0] != tuple(self.operator.domain_shape):
            raise ShapeMismatchError(
                f"linear: operator domain {self.operator.domain_shape} "
                f"does not match input {shapes[0]}"
            )

    def forward(self, *xs: Array) -> Array:
        return self.operator.apply(xs[0])

    def backward(self, grad: Array) -> tuple[Optional[Array], ...]:
        return (self.operator.adjoint(grad),)


# ---------------------------------------------------------------------------
# Functional front end


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("add", [a, b])


def sub(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("sub", [a, b])


def mul(a: Tensor, b: Tensor) -> Tensor:
    return forward_op("mul", [a, b])


def scale(x: Tensor, factor: float) -> Tensor:
    return forward_op("scale", [x], {"factor": factor})


def matmul(w: Tensor, x: Tensor) -> Tensor:
    return forward_op("matmul", [w, x])


def reduce_sum(x: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    return forward_op("sum", [x], {"axis": axis})


def reduce_mean(x: Tensor, axis: int | Sequence[int] | None = None) -> Tensor:
    return forward_op("mean", [x], {"axis": axis})


def l2sq(x: Tensor) -> Tensor:
    return forward_op("l2sq", [x])


def smoothed_abs(x: Tensor, axis: Optional[int] = None, eps: float = 1e-8) -> Tensor:
    return forward_op("smoothed_abs", [x], {"axis": axis, "eps": eps})


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    return forward_op("leaky_relu", [x], {"slope": slope})


def sigmoid(x: Tensor) -> Tensor:
    return forward_op("sigmoid", [x])


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return forward_op("reshape", [x], {"shape": tuple(shape)})


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return forward_op("concat", xs, {"axis": axis})


def stack(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return forward_op("stack", xs, {"axis": axis})


def finite_diff(x: Tensor, axis: int) -> Tensor:
    return forward_op("finite_diff", [x], {"axis": axis})


def conv(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return forward_op("conv", [x, w, b], {"stride": stride, "padding": padding})


def upsample(x: Tensor, factor: int = 2) -> Tensor:
    return forward_op("upsample", [x], {"factor": factor})


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    return forward_op("instance_norm", [x], {"eps": eps})


def real_fft(x: Tensor, ndim: int = 1) -> Tensor:
    return forward_op("real_fft", [x], {"ndim": ndim})


def real_ifft(x: Tensor, ndim: int = 1) -> Tensor:
    return forward_op("real_ifft", [x], {"ndim": ndim})


def fft(x: Tensor, ndim: int = 1) -> Tensor:
    return forward_op("fft", [x], {"ndim": ndim})


def ifft(x: Tensor, ndim: int = 1) -> Tensor:
    return forward_op("ifft", [x], {"ndim": ndim})


def linear(x: Tensor, operator: SupportsLinearMap) -> Tensor:
    return forward_op("linear", [x], {"operator": operator})


def grad_check(
    fn: Callable[[Tensor], Tensor],
    input: Tensor,
    params: Sequence[Tensor],
    step: float = 1e-6,
    n_samples: int = 64,
    seed: int = 0,
    min_relative_magnitude: float = 1e-3,
) -> float:
    """
    Compares reverse-mode gradients of the scalar `fn(input)` with central
    finite differences over a sampled subset of parameter entries. Entries
    are drawn from every parameter, including those whose analytic gradient
    is zero or missing.

    Returns max |analytic - numeric| / max(|analytic|, |numeric|, floor), where
    floor is `min_relative_magnitude` times the largest analytic gradient (at
    least 1e-12). Differences below the floor are finite-difference rounding;
    a dropped gradient of any visible size scores close to 1.
    """
    assert 0 < step <= 1e-3, f"Finite-difference step {step} outside (0, 1e-3]"
    loss = fn(input)
    grads = backward(loss)
    candidates = [(pi, idx) for pi, p in enumerate(params) for idx in range(p.size)]
    if not candidates:
        return 0.0
    largest = max(
        (float(np.max(np.abs(grads[p]))) for p in params if p in grads and p.size), default=0.0
    )
    floor = max(min_relative_magnitude * largest, 1e-12)
    rng = np.random.Generator(np.random.Philox(seed))
    picks = rng.choice(len(candidates), size=min(n_samples, len(candidates)), replace=False)
    worst = 0.0
    with no_grad():
        for pick in sorted(int(i) for i in picks):
            pi, idx = candidates[pick]
            g = grads.get(params[pi])
            a = 0.0 if g is None else float(g.reshape(-1)[idx])
            flat = params[pi].data.reshape(-1)
            original = float(flat[idx])
            flat[idx] = original + step
            plus = fn(input).item()
            flat[idx] = original - step
            minus = fn(input).item()
            flat[idx] = original
            numeric = (plus - minus) / (2 * step)
            error = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, error)
    logger.debug(f"grad_check over {len(picks)} entries: max relative error {worst:.3e}")
    return worst
