"""
Empirical checks of how the self-diffusion loop behaves.

Snapshot convention (shared with the solvers): `snapshots[T]` is the initial
noise estimate and `snapshots[t]` for t < T is the clean estimate produced by
step t. The estimate entering step t is therefore `snapshots[t + 1]`.
"""

from typing import Callable, Optional

import logging
import math

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, Field

from self_diffusion.metrics import MetricError, relative_change
from self_diffusion.operators import LinearOperator
from self_diffusion.rng import Rng

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]
DenoiseFn = Callable[[Array], Array]

__all__ = [
    "relative_change",
    "SpectralTrace",
    "spectral_trace",
    "HutchinsonEstimate",
    "jacobian_frobenius",
    "TaylorCheckResult",
    "taylor_check",
    "DriftRecord",
    "drift_alignment",
    "fourier_penalty_profile",
]

DEFAULT_BAND = 0.2


def _spectrum(x: Array) -> Array:
    return np.abs(np.fft.fftn(x, norm="ortho")).reshape(-1)


class SpectralTrace(BaseModel):
    """|d_{t,k}| per step in execution order (t descending) and |c_k|."""

    steps: list[int]
    magnitudes: list[list[float]]
    truth: list[float]
    band: float = DEFAULT_BAND
    convergence_steps: list[Optional[int]]

    @property
    def n_bins(self) -> int:
        return len(self.truth)

    def mean_convergence_step(self, bins: list[int]) -> float:
        """Bins that never settle count as -1 (later than every step)."""
        values = [self.convergence_steps[k] for k in bins]
        return float(np.mean([-1 if v is None else v for v in values]))

    def to_csv(self) -> str:
        lines = ["t," + ",".join(f"k{k}" for k in range(self.n_bins))]
        for t, row in zip(self.steps, self.magnitudes):
            lines.append(f"{t}," + ",".join(f"{v:.17g}" for v in row))
        return "\n".join(lines) + "\n"

    def convergence_csv(self) -> str:
        lines = ["k,truth,convergence_step"]
        for k, (c, t_star) in enumerate(zip(self.truth, self.convergence_steps)):
            lines.append(f"{k},{c:.17g},{'' if t_star is None else t_star}")
        return "\n".join(lines) + "\n"


def spectral_trace(
    snapshots: dict[int, Array], x_true: Array, T: int, band: float = DEFAULT_BAND
) -> SpectralTrace:
    """
    t*(k) is the largest step t such that | |d_{t',k}| - |c_k| | <= band |c_k|
    for every t' <= t, or None when the condition fails at t = 0.
    """
    missing = [t for t in range(T) if t not in snapshots]
    if missing:
        raise MetricError(f"Spectral trace needs snapshots for every step; missing {missing[:5]}")
    truth = _spectrum(x_true)
    steps = list(range(T - 1, -1, -1))
    magnitudes = np.stack([_spectrum(snapshots[t]) for t in steps])
    within = np.abs(magnitudes - truth) <= band * truth
    convergence: list[Optional[int]] = []
    for k in range(truth.size):
        t_star: Optional[int] = None
        # Walk from the last step backwards while the band holds.
        for row in range(len(steps) - 1, -1, -1):
            if not within[row, k]:
                break
            t_star = steps[row]
        convergence.append(t_star)
    return SpectralTrace(
        steps=steps,
        magnitudes=magnitudes.tolist(),
        truth=truth.tolist(),
        band=band,
        convergence_steps=convergence,
    )


class HutchinsonEstimate(BaseModel):
    mean: float
    std_error: float
    n_probes: int
    samples: list[float] = Field(default_factory=list, repr=False)


def _jvp_samples(
    op: LinearOperator,
    denoise: DenoiseFn,
    x0: Array,
    probes: list[Array],
    h: float,
) -> Array:
    base = denoise(x0).reshape(op.domain_shape)
    samples: list[float] = []
    for eps in probes:
        jvp = (denoise(x0 + h * eps).reshape(op.domain_shape) - base) / h
        a_jvp = op.apply(jvp)
        samples.append(float(np.sum(a_jvp * a_jvp)))
    return np.asarray(samples)


def _probes(shape: tuple[int, ...], n: int, seed: int) -> list[Array]:
    rng = Rng(seed)
    return [rng.child(i).normal(shape) for i in range(n)]


def _std_error(samples: Array) -> float:
    if samples.size < 2:
        return math.inf
    return float(np.std(samples, ddof=1) / math.sqrt(samples.size))


def jacobian_frobenius(
    op: LinearOperator,
    denoise: DenoiseFn,
    x0: Array,
    n_probes: int = 64,
    seed: int = 0,
    h: float = 1e-5,
) -> HutchinsonEstimate:
    """
    Hutchinson estimate of ||A J_D(x0)||_F² = E ||A J_D eps||² with
    eps ~ N(0, I) and forward-difference Jacobian-vector products.
    """
    assert n_probes >= 8, f"Need at least 8 probes, got {n_probes}"
    samples = _jvp_samples(op, denoise, x0, _probes(x0.shape, n_probes, seed), h)
    estimate = HutchinsonEstimate(
        mean=float(np.mean(samples)),
        std_error=_std_error(samples),
        n_probes=n_probes,
        samples=samples.tolist(),
    )
    logger.debug(
        f"||A J||_F² ~ {estimate.mean:.6e} +/- {estimate.std_error:.2e} ({n_probes} probes)"
    )
    return estimate


class TaylorCheckResult(BaseModel):
    sigma: float
    mc_expected_loss: float
    fidelity_term: float
    jacobian_term: float
    mc_std_error: float
    n_probes: int

    @property
    def predicted_loss(self) -> float:
        return self.fidelity_term + self.jacobian_term

    @property
    def relative_gap(self) -> float:
        return abs(self.mc_expected_loss - self.predicted_loss) / max(
            abs(self.mc_expected_loss), 1e-300
        )

    def agrees(self, tolerance: float = 0.1) -> bool:
        return self.relative_gap <= tolerance


def taylor_check(
    op: LinearOperator,
    denoise: DenoiseFn,
    y: Array,
    x0: Array,
    sigma: float,
    n_mc: int = 256,
    seed: int = 0,
    h: float = 1e-5,
) -> TaylorCheckResult:
    """
    Compares E_eps ||A D(x0 + sigma eps) - y||² (Monte Carlo) with the
    second-order prediction ||A D(x0) - y||² + sigma² ||A J_D(x0)||_F².
    Both estimates use the same probe vectors.
    """
    assert sigma > 0, f"sigma must be positive, got {sigma}"
    assert n_mc >= 32, f"Need at least 32 Monte-Carlo draws, got {n_mc}"
    probes = _probes(x0.shape, n_mc, seed)
    residual0 = op.apply(denoise(x0).reshape(op.domain_shape)) - y
    fidelity = float(np.sum(residual0 * residual0))
    losses: list[float] = []
    for eps in probes:
        r = op.apply(denoise(x0 + sigma * eps).reshape(op.domain_shape)) - y
        losses.append(float(np.sum(r * r)))
    loss_samples = np.asarray(losses)
    jacobian = _jvp_samples(op, denoise, x0, probes, h)
    result = TaylorCheckResult(
        sigma=sigma,
        mc_expected_loss=float(np.mean(loss_samples)),
        fidelity_term=fidelity,
        jacobian_term=sigma * sigma * float(np.mean(jacobian)),
        mc_std_error=_std_error(loss_samples),
        n_probes=n_mc,
    )
    logger.info(
        f"Taylor check sigma={sigma:g}: MC {result.mc_expected_loss:.6e} vs "
        f"predicted {result.predicted_loss:.6e} (gap {result.relative_gap:.2%})"
    )
    return result


class DriftRecord(BaseModel):
    t: int
    cosine: Optional[float]


def drift_alignment(
    snapshots: dict[int, Array], x_true: Array, min_norm: float = 1e-12
) -> list[DriftRecord]:
    """
    Per step t, cos of the angle between the update taken by step t and the
    direction from the entering estimate to the ground truth. Absent when
    either vector is (numerically) zero.
    """
    if not snapshots:
        raise MetricError("Drift alignment needs snapshots")
    top = max(snapshots)
    records: list[DriftRecord] = []
    for t in range(top - 1, -1, -1):
        if t not in snapshots or t + 1 not in snapshots:
            raise MetricError(f"Drift alignment needs consecutive snapshots; missing step {t}")
        entering = snapshots[t + 1]
        update = (snapshots[t] - entering).reshape(-1)
        target = (x_true - entering).reshape(-1)
        update_norm = float(np.linalg.norm(update))
        target_norm = float(np.linalg.norm(target))
        if update_norm < min_norm or target_norm < min_norm:
            records.append(DriftRecord(t=t, cosine=None))
            continue
        cosine = float(np.dot(update, target)) / (update_norm * target_norm)
        records.append(DriftRecord(t=t, cosine=cosine))
    return records


def median_alignment(records: list[DriftRecord]) -> Optional[float]:
    values = [r.cosine for r in records if r.cosine is not None]
    return float(np.median(values)) if values else None


def fourier_penalty_profile(op: LinearOperator, complex_pair: bool = False) -> Array:
    """
    |k|² ||A e_k||² for every orthonormal Fourier atom e_k of the operator
    domain, laid out on the (unshifted) frequency grid. With `complex_pair`
    the domain's leading axis holds (re, im).
    """
    spatial = op.domain_shape[1:] if complex_pair else op.domain_shape
    freq_sq = np.zeros(spatial)
    for axis, n in enumerate(spatial):
        k = np.fft.fftfreq(n) * n
        shape = [1] * len(spatial)
        shape[axis] = n
        freq_sq = freq_sq + (k**2).reshape(shape)
    weights = np.zeros(spatial)
    for index in np.ndindex(*spatial):
        unit = np.zeros(spatial, dtype=np.complex128)
        unit[index] = 1.0
        atom = np.fft.ifftn(unit, norm="ortho")
        if complex_pair:
            energy = float(np.sum(op.apply(np.stack([atom.real, atom.imag])) ** 2))
        else:
            energy = float(np.sum(op.apply(atom.real) ** 2) + np.sum(op.apply(atom.imag) ** 2))
        weights[index] = energy
    return freq_sq * weights
