"""
The self-diffusion solver.

Starting from x_T = eps_0, each step t = T-1, ..., 0 perturbs the current
clean estimate with sigma_t * eps_t, fits the denoiser for K Adam iterations
on the data-fidelity loss of its output, and takes the post-fit denoiser
output on the same perturbed input as the next clean estimate.
"""

from dataclasses import dataclass, field
from typing import Any, Literal, Optional

import logging
import time

import numpy as np
import psutil
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

from self_diffusion import autodiff as ad
from self_diffusion.autodiff import Tensor
from self_diffusion.denoiser import DenoiserNetwork
from self_diffusion.metrics import MetricError, relative_change
from self_diffusion.operators import LinearOperator, minimum_norm_solution
from self_diffusion.rng import Rng
from self_diffusion.schedule import make_schedule

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

NoiseMode = Literal["resample", "fixed", "none"]
BackProjection = Literal["adjoint", "pseudo_inverse"]

# Stream ids under the run seed.
INITIAL_NOISE_STREAM = 0
FIXED_NOISE_STREAM = 1
STEP_NOISE_STREAM = 2


class SolveAborted(RuntimeError):
    def __init__(self, method: str, step: int, message: str):
        super().__init__(f"{method} aborted at step {step}: {message}")
        self.method = method
        self.step = step


class MeasurementError(ValueError):
    pass


class SDIConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    T: int = Field(default=40, ge=1)
    K: int = Field(default=150, ge=1)
    eta: float = Field(default=1e-3, gt=0)
    beta_start: float = Field(default=1e-4, gt=0, lt=1)
    beta_end: float = Field(default=1e-2, gt=0, lt=1)
    reverse_schedule: bool = False
    noise_mode: NoiseMode = "resample"
    tv_weight: float = Field(default=0.0, ge=0)
    freq_l1_weight: float = Field(default=1e-3, ge=0)
    seed: int = Field(default=0, ge=0)
    normalize_measurements: bool = False
    back_projection: BackProjection = "adjoint"
    snapshot_every: int = Field(default=1, ge=0)
    record_inner_losses: bool = False
    log_every: int = Field(default=10, ge=1)


@dataclass
class AdamState:
    first: list[Array]
    second: list[Array]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: list[Tensor]) -> "AdamState":
        return cls(
            first=[np.zeros_like(p.data) for p in params],
            second=[np.zeros_like(p.data) for p in params],
        )


def adam_step(
    state: AdamState, params: list[Tensor], grads: dict[Tensor, Array], eta: float
) -> None:
    """Bias-corrected Adam update, in place. Parameters without a gradient get a zero one."""
    assert len(params) == len(state.first)
    full_grads = [grads.get(p, np.zeros_like(p.data)) for p in params]
    for p, g in zip(params, full_grads):
        if g.shape != p.shape:
            raise ad.ShapeMismatchError(
                f"Gradient shape {g.shape} does not match parameter {p.name} {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ad.NonFiniteError(f"Non-finite gradient for parameter {p.name}")
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for i, (p, g) in enumerate(zip(params, full_grads)):
        m = state.first[i]
        v = state.second[i]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= eta * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def tv_penalty(x: Tensor, ndim: Optional[int] = None) -> Tensor:
    """
    Isotropic total variation over the trailing `ndim` axes (default: all
    axes, at most two), sqrt(sum_i (d_i x)² + 1e-16) summed over positions.
    """
    if ndim is None:
        ndim = min(x.ndim, 2)
    assert ndim in (1, 2), f"TV needs 1 or 2 axes, got {ndim}"
    diffs = [ad.finite_diff(x, axis=x.ndim - 1 - i) for i in range(ndim)]
    magnitude = ad.smoothed_abs(ad.stack(diffs, axis=-1), axis=-1)
    return ad.reduce_sum(magnitude)


def frequency_l1(x: Tensor, dims: int, complex_pair: bool) -> Tensor:
    """Smoothed L1 norm of the orthonormal spectrum over the trailing `dims` axes."""
    spectrum = ad.fft(x, ndim=dims) if complex_pair else ad.real_fft(x, ndim=dims)
    return ad.reduce_sum(ad.smoothed_abs(spectrum, axis=-(dims + 1)))


def reconstruction_loss(
    op: LinearOperator,
    y: Tensor,
    net: DenoiserNetwork,
    x_in: Tensor,
    tv_weight: float,
    freq_l1_weight: float,
) -> Tensor:
    """||A D(x_in) - y||² + tv_weight TV(D(x_in)) + freq_l1_weight ||F D(x_in)||_1."""
    out = net(x_in)
    estimate = ad.reshape(out, op.domain_shape)
    loss = ad.l2sq(ad.sub(ad.linear(estimate, op), y))
    dims = net.config.dims
    complex_pair = net.config.out_channels == 2
    if tv_weight > 0:
        loss = ad.add(loss, ad.scale(tv_penalty(out, dims), tv_weight))
    if freq_l1_weight > 0:
        penalty = frequency_l1(out, dims, complex_pair)
        loss = ad.add(loss, ad.scale(penalty, freq_l1_weight))
    return loss


def check_shapes(op: LinearOperator, y: Array, net: DenoiserNetwork) -> None:
    if y.shape != op.range_shape:
        raise ad.ShapeMismatchError(
            f"Measurements have shape {y.shape}, operator range is {op.range_shape}"
        )
    domain_size = int(np.prod(op.domain_shape))
    if int(np.prod(net.input_shape)) != domain_size or int(np.prod(net.output_shape)) != domain_size:
        raise ad.ShapeMismatchError(
            f"Denoiser maps {net.input_shape} -> {net.output_shape}, "
            f"which does not cover operator domain {op.domain_shape}"
        )


def normalize_measurements(
    op: LinearOperator,
    y: Array,
    net: DenoiserNetwork,
    x_init: Array,
    back_projection: BackProjection = "adjoint",
) -> tuple[Array, float]:
    """
    s = ||D(x_init)|| / ||B y||; returns (s * y, s) so the back-projected
    measurements have the norm of the fresh network's output. B is A^H, or
    the pseudo-inverse A^+ for operators whose rows are far from
    orthonormal, such as a Gaussian matrix with unit Frobenius norm.
    """
    match back_projection:
        case "adjoint":
            projected = op.adjoint(y)
        case "pseudo_inverse":
            projected = minimum_norm_solution(op, y)
    norm = float(np.linalg.norm(projected))
    if norm == 0.0:
        raise MeasurementError("Back-projected measurements are zero: they carry no signal")
    output = float(np.linalg.norm(net.evaluate(x_init.reshape(net.input_shape))))
    scale = output / norm
    logger.info(f"Measurement scale s = {scale:.6g} ({back_projection} back-projection)")
    return scale * y, scale


class StepRecord(BaseModel):
    t: int
    # Loss of the post-fit network on the step input.
    loss: float
    e_t: float
    residual: float
    zeta: Optional[float] = None
    spectrum: Optional[list[float]] = None
    inner_losses: Optional[list[float]] = None


class RunTrace(BaseModel):
    method: str
    records: list[StepRecord] = []
    wall_time: float = 0.0
    scale: float = 1.0
    rss_bytes: int = 0
    # Unscaled clean estimates keyed by step; `T` holds the initial noise.
    snapshots: dict[int, Any] = Field(default_factory=dict, exclude=True)

    def to_csv(self) -> str:
        lines = ["t,loss,e_t,residual,zeta"]
        for r in self.records:
            zeta = "" if r.zeta is None else f"{r.zeta:.17g}"
            lines.append(f"{r.t},{r.loss:.17g},{r.e_t:.17g},{r.residual:.17g},{zeta}")
        return "\n".join(lines) + "\n"

    def spectrum_csv(self) -> Optional[str]:
        rows = [r for r in self.records if r.spectrum is not None]
        if not rows:
            return None
        n_bins = len(rows[0].spectrum or [])
        lines = ["t," + ",".join(f"k{k}" for k in range(n_bins))]
        for r in rows:
            assert r.spectrum is not None
            lines.append(f"{r.t}," + ",".join(f"{v:.17g}" for v in r.spectrum))
        return "\n".join(lines) + "\n"


@dataclass
class FitContext:
    method: str
    op: LinearOperator
    y: Tensor
    net: DenoiserNetwork
    tv_weight: float
    freq_l1_weight: float
    adam: AdamState
    params: list[Tensor] = field(default_factory=list)


def fit_denoiser(ctx: FitContext, x_in: Array, iterations: int, eta: float, step: int) -> list[float]:
    """Runs `iterations` Adam steps on a fixed input; returns the loss before each update."""
    x = Tensor(x_in)
    losses: list[float] = []
    for k in range(iterations):
        try:
            loss = reconstruction_loss(
                ctx.op, ctx.y, ctx.net, x, ctx.tv_weight, ctx.freq_l1_weight
            )
            grads = ad.backward(loss)
            adam_step(ctx.adam, ctx.params, grads, eta)
        except ad.NonFiniteError as e:
            raise SolveAborted(ctx.method, step, f"iteration {k}: {e}") from e
        value = loss.item()
        losses.append(value)
        logger.debug(f"{ctx.method} step {step} iteration {k}: loss {value:.6e}")
    return losses


def evaluate_loss(ctx: FitContext, x_in: Array) -> float:
    """Loss of the current network on `x_in`, without recording a graph."""
    with ad.no_grad():
        loss = reconstruction_loss(
            ctx.op, ctx.y, ctx.net, Tensor(x_in), ctx.tv_weight, ctx.freq_l1_weight
        )
    return loss.item()


def spectrum_of(x: Array) -> Optional[list[float]]:
    """Orthonormal FFT magnitudes for 1D real estimates, otherwise None."""
    if x.ndim != 1:
        return None
    return [float(v) for v in np.abs(np.fft.fft(x, norm="ortho"))]


def resident_memory() -> int:
    return int(psutil.Process().memory_info().rss)


def sdi_solve(
    op: LinearOperator,
    y: Array,
    net: DenoiserNetwork,
    cfg: SDIConfig,
    x_true: Optional[Array] = None,
    method: str = "sdi",
) -> tuple[Array, RunTrace]:
    """
    Returns the final clean estimate in the operator domain (divided by the
    measurement scale when normalization is on) and the per-step trace.
    """
    check_shapes(op, y, net)
    if x_true is not None and x_true.shape != op.domain_shape:
        raise ad.ShapeMismatchError(
            f"Ground truth shape {x_true.shape} is not the operator domain {op.domain_shape}"
        )
    start = time.perf_counter()
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end, cfg.reverse_schedule)
    rng = Rng(cfg.seed)
    shape = net.input_shape
    clean = rng.child(INITIAL_NOISE_STREAM).normal(shape)
    fixed_noise = rng.child(FIXED_NOISE_STREAM).normal(shape) if cfg.noise_mode == "fixed" else None

    scale = 1.0
    if cfg.normalize_measurements:
        y, scale = normalize_measurements(op, y, net, clean, cfg.back_projection)
    params = net.parameters()
    ctx = FitContext(
        method=method,
        op=op,
        y=Tensor(y),
        net=net,
        tv_weight=cfg.tv_weight,
        freq_l1_weight=cfg.freq_l1_weight,
        adam=AdamState.for_params(params),
        params=params,
    )
    trace = RunTrace(method=method, scale=scale)
    previous = clean.reshape(op.domain_shape) / scale
    if cfg.snapshot_every > 0:
        trace.snapshots[cfg.T] = previous.copy()
    y_norm = float(np.linalg.norm(y)) or 1.0

    logger.info(
        f"{method}: T={cfg.T} K={cfg.K} eta={cfg.eta} noise_mode={cfg.noise_mode} "
        f"on {op.kind} {op.domain_shape} -> {op.range_shape}"
    )
    for t in range(cfg.T - 1, -1, -1):
        match cfg.noise_mode:
            case "resample":
                x_t = clean + schedule.sigma[t] * rng.child(STEP_NOISE_STREAM, t).normal(shape)
            case "fixed":
                assert fixed_noise is not None
                x_t = clean + schedule.sigma[t] * fixed_noise
            case "none":
                x_t = clean
        losses = fit_denoiser(ctx, x_t, cfg.K, cfg.eta, t)
        clean = net.evaluate(x_t)
        if not np.all(np.isfinite(clean)):
            raise SolveAborted(method, t, "denoiser produced a non-finite estimate")

        scaled = clean.reshape(op.domain_shape)
        estimate = scaled / scale
        residual = float(np.linalg.norm(op.apply(scaled) - y)) / y_norm
        try:
            e_t = relative_change(estimate, previous)
        except MetricError as e:
            raise SolveAborted(method, t, str(e)) from e
        record = StepRecord(
            t=t,
            loss=evaluate_loss(ctx, x_t),
            e_t=e_t,
            residual=residual,
            spectrum=spectrum_of(estimate),
            inner_losses=losses if cfg.record_inner_losses else None,
        )
        if x_true is not None:
            diff = estimate - x_true
            record.zeta = float(np.sum(diff * diff))
        trace.records.append(record)
        if cfg.snapshot_every > 0 and (t % cfg.snapshot_every == 0):
            trace.snapshots[t] = estimate.copy()
        if t % cfg.log_every == 0 or t == cfg.T - 1:
            logger.info(
                f"{method} t={t}: loss {record.loss:.4e}, e_t {record.e_t:.4e}, "
                f"residual {residual:.4e}"
            )
        previous = estimate

    trace.wall_time = time.perf_counter() - start
    trace.rss_bytes = resident_memory()
    logger.info(f"{method} finished in {trace.wall_time:.1f}s")
    return previous.copy(), trace
