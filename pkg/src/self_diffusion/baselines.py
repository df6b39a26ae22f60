"""
Reference solvers: Deep Image Prior and ADMM basis pursuit.
"""

from dataclasses import dataclass
from typing import Literal, Optional

import logging
import math
import time

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from self_diffusion.autodiff import Tensor
from self_diffusion.denoiser import DenoiserNetwork
from self_diffusion.engine import (
    INITIAL_NOISE_STREAM,
    AdamState,
    BackProjection,
    FitContext,
    RunTrace,
    SolveAborted,
    StepRecord,
    check_shapes,
    evaluate_loss,
    fit_denoiser,
    normalize_measurements,
    resident_memory,
    spectrum_of,
)
from self_diffusion.metrics import MetricError, relative_change
from self_diffusion.operators import LinearOperator
from self_diffusion.rng import Rng

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]


class DipConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    iterations: int = Field(default=6000, ge=1)
    eta: float = Field(default=1e-3, gt=0)
    tv_weight: float = Field(default=0.0, ge=0)
    freq_l1_weight: float = Field(default=1e-3, ge=0)
    input_noise_seed: int = Field(default=0, ge=0)
    # Network initialization seed; the caller builds the network with it.
    seed: int = Field(default=0, ge=0)
    normalize_measurements: bool = False
    back_projection: BackProjection = "adjoint"
    record_every: int = Field(default=100, ge=1)


def dip_solve(
    op: LinearOperator,
    y: Array,
    net: DenoiserNetwork,
    cfg: DipConfig,
    x_true: Optional[Array] = None,
    method: str = "dip",
) -> tuple[Array, RunTrace]:
    """
    Fits D_theta(z) to the measurements for a fixed input z ~ N(0, I) drawn
    from the same stream the self-diffusion solver uses for its initial
    noise. Records are taken every `record_every` iterations, keyed by the
    iteration count.
    """
    check_shapes(op, y, net)
    start = time.perf_counter()
    z = Rng(cfg.input_noise_seed).child(INITIAL_NOISE_STREAM).normal(net.input_shape)
    scale = 1.0
    if cfg.normalize_measurements:
        y, scale = normalize_measurements(op, y, net, z, cfg.back_projection)
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
    y_norm = float(np.linalg.norm(y)) or 1.0
    previous = z.reshape(op.domain_shape) / scale
    done = 0
    logger.info(f"{method}: {cfg.iterations} iterations, eta={cfg.eta}")
    while done < cfg.iterations:
        chunk = min(cfg.record_every, cfg.iterations - done)
        losses = fit_denoiser(ctx, z, chunk, cfg.eta, done)
        done += chunk
        scaled = net.evaluate(z).reshape(op.domain_shape)
        estimate = scaled / scale
        try:
            e_t = relative_change(estimate, previous)
        except MetricError as e:
            raise SolveAborted(method, done, str(e)) from e
        record = StepRecord(
            t=done,
            loss=evaluate_loss(ctx, z),
            e_t=e_t,
            residual=float(np.linalg.norm(op.apply(scaled) - y)) / y_norm,
            spectrum=spectrum_of(estimate),
        )
        if x_true is not None:
            diff = estimate - x_true
            record.zeta = float(np.sum(diff * diff))
        trace.records.append(record)
        logger.debug(f"{method} iteration {done}: loss {record.loss:.4e}")
        previous = estimate
    trace.wall_time = time.perf_counter() - start
    trace.rss_bytes = resident_memory()
    logger.info(f"{method} finished in {trace.wall_time:.1f}s")
    return previous.copy(), trace


# ---------------------------------------------------------------------------
# ADMM basis pursuit


class AdmmError(ValueError):
    pass


class AdmmBpConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    rho: float = Field(default=1.0, gt=0)
    iterations: int = Field(default=5000, ge=1)
    abs_tol: float = Field(default=1e-6, gt=0)
    rel_tol: float = Field(default=1e-5, gt=0)
    basis: Literal["identity", "fourier"] = "identity"
    adaptive_rho: bool = False
    mu: float = Field(default=10.0, gt=1)
    tau: float = Field(default=2.0, gt=1)
    # rho is rebalanced every `adapt_every` iterations and frozen after `adapt_until`.
    adapt_every: int = Field(default=10, ge=1)
    adapt_until: int = Field(default=1000, ge=0)


class AdmmIterate(BaseModel):
    iteration: int
    primal_residual: float
    dual_residual: float
    rho: float


@dataclass
class AdmmResult:
    coefficients: Array
    sparse_coefficients: Array
    signal: Array
    converged: bool
    iterations: int
    history: list[AdmmIterate]

    def residuals_csv(self) -> str:
        lines = ["iteration,primal_residual,dual_residual,rho"]
        for h in self.history:
            lines.append(
                f"{h.iteration},{h.primal_residual:.17g},{h.dual_residual:.17g},{h.rho:.17g}"
            )
        return "\n".join(lines) + "\n"


def soft_threshold(v: Array, kappa: float) -> Array:
    """sign(v) max(|v| - kappa, 0)."""
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def real_fourier_basis(n: int) -> Array:
    """
    Rows are orthonormal real Fourier atoms over n samples: the constant,
    then a cosine and a sine per frequency 1 <= k < n/2, then the
    alternating Nyquist atom when n is even. A signal x has coefficients
    B @ x and is recovered as B.T @ z.
    """
    assert n >= 1
    t = np.arange(n)
    rows: list[Array] = [np.full(n, 1.0 / math.sqrt(n))]
    for k in range(1, (n + 1) // 2):
        angle = 2 * math.pi * k * t / n
        rows.append(math.sqrt(2.0 / n) * np.cos(angle))
        rows.append(math.sqrt(2.0 / n) * np.sin(angle))
    if n % 2 == 0:
        rows.append(np.where(t % 2 == 0, 1.0, -1.0) / math.sqrt(n))
    return np.stack(rows)


def admm_bp(A: Array, y: Array, cfg: AdmmBpConfig) -> AdmmResult:
    """
    min ||z||_1 subject to (A B^T) z = y.

    The x-update projects onto the affine constraint set through a cached
    Cholesky factorization of A_t A_t^T, so every x iterate is feasible; the
    z-update soft-thresholds at 1/rho. `coefficients` is the final (feasible)
    x iterate, `sparse_coefficients` the final z.
    """
    assert A.ndim == 2 and y.shape == (A.shape[0],)
    m, n = A.shape
    basis = real_fourier_basis(n) if cfg.basis == "fourier" else np.eye(n)
    A_t = A @ basis.T
    if np.linalg.matrix_rank(A_t) < m:
        raise AdmmError(f"Measurement matrix {A.shape} is not of full row rank")
    try:
        factor = cho_factor(A_t @ A_t.T)
    except LinAlgError as e:
        raise AdmmError(f"Could not factor A A^T: {e}") from e

    def project(v: Array) -> Array:
        return v - A_t.T @ cho_solve(factor, A_t @ v - y)

    rho = cfg.rho
    x = project(np.zeros(n))
    z = x.copy()
    u = np.zeros(n)
    history: list[AdmmIterate] = []
    converged = False
    iteration = 0
    for iteration in range(1, cfg.iterations + 1):
        x = project(z - u)
        z_old = z
        z = soft_threshold(x + u, 1.0 / rho)
        u = u + x - z
        primal = float(np.linalg.norm(x - z))
        dual = float(rho * np.linalg.norm(z - z_old))
        history.append(
            AdmmIterate(iteration=iteration, primal_residual=primal, dual_residual=dual, rho=rho)
        )
        eps_primal = math.sqrt(n) * cfg.abs_tol + cfg.rel_tol * max(
            float(np.linalg.norm(x)), float(np.linalg.norm(z))
        )
        eps_dual = math.sqrt(n) * cfg.abs_tol + cfg.rel_tol * rho * float(np.linalg.norm(u))
        if primal <= eps_primal and dual <= eps_dual:
            converged = True
            break
        if (
            cfg.adaptive_rho
            and iteration <= cfg.adapt_until
            and iteration % cfg.adapt_every == 0
        ):
            # u is the scaled dual variable, so it rescales inversely with rho.
            if primal > cfg.mu * dual:
                rho *= cfg.tau
                u = u / cfg.tau
            elif dual > cfg.mu * primal:
                rho /= cfg.tau
                u = u * cfg.tau

    if converged:
        logger.info(f"ADMM-BP converged after {iteration} iterations")
    else:
        logger.warning(
            f"ADMM-BP did not converge in {cfg.iterations} iterations "
            f"(primal {history[-1].primal_residual:.3e}, dual {history[-1].dual_residual:.3e})"
        )
    return AdmmResult(
        coefficients=x,
        sparse_coefficients=z,
        signal=basis.T @ x,
        converged=converged,
        iterations=iteration,
        history=history,
    )
