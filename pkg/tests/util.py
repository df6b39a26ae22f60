from pathlib import Path
from typing import Any, Callable

import numpy as np
from numpy.typing import NDArray

from self_diffusion import autodiff as ad
from self_diffusion.denoiser import DenoiserConfig

Array = NDArray[np.float64]

SEED = 7

# A small 1D compressed-sensing instance that runs in well under a second.
SMALL_N = 32
SMALL_M = 12
SMALL_COMPONENTS: list[tuple[float, int]] = [(1.0, 1), (0.5, 5), (0.3, 9)]

ADJOINT_TOL = 1e-10
GRAD_TOL = 1e-4


def tiny_denoiser(dims: int = 1, channels: int = 1, seed: int = SEED) -> DenoiserConfig:
    return DenoiserConfig(
        dims=1 if dims == 1 else 2,
        in_channels=channels,
        out_channels=channels,
        depth=2,
        base_channels=4,
        seed=seed,
    )


def tiny_cs_config(**overrides: Any) -> dict[str, Any]:
    """Raw config mapping for a fast cs1d experiment."""
    raw: dict[str, Any] = {
        "name": "tiny",
        "task": "cs1d",
        "methods": ["sdi", "dip", "admm-bp"],
        "seed": SEED,
        "signal": {"N": SMALL_N, "components": [list(c) for c in SMALL_COMPONENTS]},
        "operator": {"measurements": SMALL_M},
        "denoiser": {"depth": 2, "base_channels": 4},
        "sdi": {"T": 3, "K": 4, "eta": 1e-3},
        "admm": {"iterations": 500},
    }
    raw.update(overrides)
    return raw


def tiny_inpaint_config(**overrides: Any) -> dict[str, Any]:
    raw: dict[str, Any] = {
        "name": "tiny-inpaint",
        "task": "inpaint",
        "methods": ["sdi"],
        "seed": SEED,
        "synthetic_images": 1,
        "image_size": 16,
        "denoiser": {"depth": 2, "base_channels": 2},
        "sdi": {"T": 2, "K": 2, "eta": 1e-3},
    }
    raw.update(overrides)
    return raw


def toml_text(raw: dict[str, Any]) -> str:
    """Serializes the flat-plus-tables mappings used in these tests."""

    def value(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(value(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {value(v)}" for k, v in raw.items() if not isinstance(v, dict)]
    for k, v in raw.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {value(vv)}" for kk, vv in v.items())
    return "\n".join(lines) + "\n"


def write_config(directory: Path, raw: dict[str, Any], name: str = "config.toml") -> Path:
    path = directory / name
    path.write_text(toml_text(raw))
    return path


def numeric_gradient(
    fn: Callable[[ad.Tensor], ad.Tensor], x: ad.Tensor, step: float = 1e-6
) -> Array:
    """Central differences of the scalar fn(x) with respect to every entry of x."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    with ad.no_grad():
        for i in range(flat.size):
            original = float(flat[i])
            flat[i] = original + step
            plus = fn(x).item()
            flat[i] = original - step
            minus = fn(x).item()
            flat[i] = original
            out[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(a: Array, b: Array) -> float:
    return float(np.max(np.abs(a - b)) / max(float(np.max(np.abs(b))), 1e-12))
