"""
Experiment runner.

An experiment is a grid of cells (task instance x method). Each cell
re-synthesizes its task from the config, runs one method and writes into its
own directory; cells run in a process pool. The metrics table is assembled
afterwards in grid order, so it does not depend on completion order.

Run directory layout:

    <output_dir>/<task>-<UTC timestamp>/
        config.resolved.json
        metrics.csv              instance,method,status,psnr,ssim,nrmse
        diagnostics.csv          per-cell summaries of the trace diagnostics
        timings.csv              wall time and resident memory per cell
        penalty_profile.csv      cs1d only
        <method>/<instance>/
            reconstruction.sdt   operator-domain estimate
            reconstruction.pgm   images (magnitude for fourier2d)
            reconstruction.csv   1D signals
            trace.csv
            spectrum.csv         1D only
            spectral_convergence.csv, drift.csv
            snapshots/t<step>.sdt   estimates kept by --snapshot-every
            admm_residuals.csv   admm-bp only
            checkpoint.sdt       when checkpointing is on
"""

from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import logging
import time

import numpy as np
import psutil
from numpy.typing import NDArray
from pydantic import BaseModel

from self_diffusion import autodiff as ad
from self_diffusion.baselines import admm_bp, dip_solve
from self_diffusion.config import ExperimentConfig, Method, resolve
from self_diffusion.denoiser import DenoiserNetwork, build_unet
from self_diffusion.diagnostics import (
    drift_alignment,
    fourier_penalty_profile,
    median_alignment,
    spectral_trace,
)
from self_diffusion.engine import (
    RunTrace,
    SDIConfig,
    SolveAborted,
    resident_memory,
    sdi_solve,
)
from self_diffusion.metrics import MetricsReport, capped, evaluate
from self_diffusion.operators import MatrixOperator
from self_diffusion.tasks import TaskInstance, instance_names, synthesize_task
from self_diffusion.tensor_io import image_write, write_tensor

logger = logging.getLogger(__name__)

Array = NDArray[np.float64]

LOW_FREQUENCIES = [1, 3, 4, 5, 6]
HIGH_FREQUENCIES = [15, 20]


class CellSpec(BaseModel):
    config_json: str
    instance: int
    method: Method
    cell_dir: Path
    sdi_overrides: dict[str, Any] = {}


class MethodSucceeded(BaseModel):
    instance: str
    method: str
    metrics: MetricsReport
    diagnostics: dict[str, Optional[float]] = {}
    wall_time: float
    rss_bytes: int


class MethodFailed(BaseModel):
    instance: str
    method: str
    step: Optional[int]
    message: str


CellResult = MethodSucceeded | MethodFailed


def sdi_config_for(cfg: ExperimentConfig, method: Method, overrides: dict[str, Any]) -> SDIConfig:
    noise_mode = {"sdi": "resample", "sdi-fixed": "fixed", "sdi-none": "none"}[method]
    return cfg.sdi.model_copy(update={"noise_mode": noise_mode, **overrides})


def _write_estimate(cell_dir: Path, task: TaskInstance, estimate: Array) -> None:
    write_tensor(cell_dir / "reconstruction.sdt", estimate)
    view = task.view(estimate)
    if view.ndim == 2:
        image_write(cell_dir / "reconstruction.pgm", view)
    else:
        image_write(cell_dir / "reconstruction.csv", view)


def _trace_diagnostics(
    cell_dir: Path, task: TaskInstance, trace: RunTrace, T: int
) -> dict[str, Optional[float]]:
    summary: dict[str, Optional[float]] = {}
    e = [r.e_t for r in trace.records]
    quarter = max(1, len(e) // 4)
    summary["e_first_quarter"] = float(np.mean(e[:quarter]))
    summary["e_last_quarter"] = float(np.mean(e[-quarter:]))
    if len(trace.snapshots) == T + 1:
        drift = drift_alignment(trace.snapshots, task.x_true)
        (cell_dir / "drift.csv").write_text(
            "t,cosine\n"
            + "".join(f"{d.t},{'' if d.cosine is None else f'{d.cosine:.17g}'}\n" for d in drift)
        )
        summary["median_drift"] = median_alignment(drift)
        if task.x_true.ndim == 1:
            spectral = spectral_trace(trace.snapshots, task.x_true, T)
            (cell_dir / "spectral_convergence.csv").write_text(spectral.convergence_csv())
            n = task.x_true.size
            low = [k for k in LOW_FREQUENCIES if k < n // 2]
            high = [k for k in HIGH_FREQUENCIES if k < n // 2]
            if low and high:
                summary["low_freq_convergence"] = spectral.mean_convergence_step(low)
                summary["high_freq_convergence"] = spectral.mean_convergence_step(high)
    return summary


def run_cell(spec: CellSpec) -> CellResult:
    cfg = ExperimentConfig.model_validate_json(spec.config_json)
    ad.set_default_dtype(cfg.precision)
    task = synthesize_task(cfg, spec.instance)
    method = spec.method
    cell_dir = spec.cell_dir
    cell_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"[{task.name}/{method}] starting")
    diagnostics: dict[str, Optional[float]] = {}
    try:
        if method == "admm-bp":
            assert isinstance(task.operator, MatrixOperator)
            start = time.perf_counter()
            result = admm_bp(task.operator.matrix, task.y, cfg.admm)
            estimate = result.signal
            (cell_dir / "admm_residuals.csv").write_text(result.residuals_csv())
            diagnostics["admm_converged"] = float(result.converged)
            wall_time, rss = time.perf_counter() - start, resident_memory()
        else:
            net = _fresh_network(cfg, task)
            T: Optional[int] = None
            if method == "dip":
                estimate, trace = dip_solve(task.operator, task.y, net, cfg.dip, task.x_true)
            else:
                sdi_cfg = sdi_config_for(cfg, method, spec.sdi_overrides)
                estimate, trace = sdi_solve(
                    task.operator, task.y, net, sdi_cfg, task.x_true, method=method
                )
                T = sdi_cfg.T
            (cell_dir / "trace.csv").write_text(trace.to_csv())
            spectrum = trace.spectrum_csv()
            if spectrum is not None:
                (cell_dir / "spectrum.csv").write_text(spectrum)
            if trace.snapshots:
                (cell_dir / "snapshots").mkdir(exist_ok=True)
            for t, snapshot in sorted(trace.snapshots.items()):
                write_tensor(cell_dir / "snapshots" / f"t{t:04d}.sdt", snapshot)
            if cfg.checkpoint:
                net.save(cell_dir / "checkpoint.sdt")
            if cfg.diagnostics and T is not None:
                diagnostics = _trace_diagnostics(cell_dir, task, trace, T)
            wall_time, rss = trace.wall_time, trace.rss_bytes
    except SolveAborted as e:
        logger.exception(f"[{task.name}/{method}] aborted")
        return MethodFailed(instance=task.name, method=method, step=e.step, message=str(e))
    except Exception as e:
        logger.exception(f"[{task.name}/{method}] failed")
        return MethodFailed(instance=task.name, method=method, step=None, message=str(e))

    _write_estimate(cell_dir, task, estimate)
    peak = 1.0 if cfg.is_image_task else None
    metrics = evaluate(task.view(estimate), task.reference, peak)
    logger.info(
        f"[{task.name}/{method}] PSNR {capped(metrics.psnr):.2f} dB, NRMSE {metrics.nrmse:.4f}"
    )
    return MethodSucceeded(
        instance=task.name,
        method=method,
        metrics=metrics,
        diagnostics=diagnostics,
        wall_time=wall_time,
        rss_bytes=rss,
    )


def _fresh_network(cfg: ExperimentConfig, task: TaskInstance) -> DenoiserNetwork:
    spatial = task.x_true.shape[1:] if cfg.task == "fourier2d" else task.x_true.shape
    return build_unet(cfg.denoiser, tuple(spatial))


def default_workers() -> int:
    return psutil.cpu_count(logical=False) or 1


def run_cells(specs: list[CellSpec], workers: int) -> list[CellResult]:
    """Results in the order of `specs`."""
    workers = min(workers or default_workers(), len(specs))
    if workers <= 1:
        return [run_cell(spec) for spec in specs]
    logger.info(f"Running {len(specs)} cells on {workers} workers")
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_cell, specs))


def metrics_csv(cfg: ExperimentConfig, results: list[CellResult]) -> str:
    columns = [m for m in ("psnr", "ssim", "nrmse") if m in cfg.metrics]
    lines = ["instance,method,status," + ",".join(columns)]
    for r in results:
        if isinstance(r, MethodFailed):
            lines.append(f"{r.instance},{r.method},failed" + "," * len(columns))
            continue
        values = {
            "psnr": f"{capped(r.metrics.psnr):.6f}",
            "ssim": "" if r.metrics.ssim is None else f"{r.metrics.ssim:.6f}",
            "nrmse": f"{r.metrics.nrmse:.6f}",
        }
        lines.append(f"{r.instance},{r.method},ok," + ",".join(values[c] for c in columns))
    return "\n".join(lines) + "\n"


def diagnostics_csv(results: list[CellResult]) -> str:
    keys = sorted({k for r in results if isinstance(r, MethodSucceeded) for k in r.diagnostics})
    lines = ["instance,method," + ",".join(keys)]
    for r in results:
        if not isinstance(r, MethodSucceeded):
            continue
        values = [r.diagnostics.get(k) for k in keys]
        lines.append(
            f"{r.instance},{r.method},"
            + ",".join("" if v is None else f"{v:.10g}" for v in values)
        )
    return "\n".join(lines) + "\n"


def timings_csv(results: list[CellResult]) -> str:
    lines = ["instance,method,wall_time_s,rss_bytes"]
    for r in results:
        if isinstance(r, MethodSucceeded):
            lines.append(f"{r.instance},{r.method},{r.wall_time:.3f},{r.rss_bytes}")
    return "\n".join(lines) + "\n"


def make_run_dir(cfg: ExperimentConfig, out: Optional[Path] = None) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    run_dir = (out or cfg.output_dir) / f"{cfg.task}-{stamp}"
    run_dir.mkdir(parents=True, exist_ok=False)
    return run_dir


class RunOutcome(BaseModel):
    exit_code: int
    run_dir: Optional[Path]
    results: list[CellResult] = []


def _cell_specs(
    cfg: ExperimentConfig, run_dir: Path, methods: list[Method], subdir: str = "",
    sdi_overrides: Optional[dict[str, Any]] = None,
) -> list[CellSpec]:
    names = instance_names(cfg)
    config_json = cfg.model_dump_json()
    return [
        CellSpec(
            config_json=config_json,
            instance=i,
            method=method,
            cell_dir=run_dir / subdir / method / name,
            sdi_overrides=sdi_overrides or {},
        )
        for i, name in enumerate(names)
        for method in methods
    ]


def _report_failures(results: list[CellResult]) -> int:
    failures = [r for r in results if isinstance(r, MethodFailed)]
    for f in failures:
        at = "" if f.step is None else f" at step {f.step}"
        logger.error(f"{f.method} on {f.instance} failed{at}: {f.message}")
    return 1 if failures else 0


def run_experiment(
    cfg: ExperimentConfig,
    out: Optional[Path] = None,
    dry_run: bool = False,
    workers: Optional[int] = None,
) -> RunOutcome:
    """Exit code 0 iff every method finished on every instance."""
    names = instance_names(cfg)
    if dry_run:
        for i in range(len(names)):
            synthesize_task(cfg, i)
        logger.info(f"Dry run: {len(names)} instance(s) x {len(cfg.methods)} method(s) valid")
        return RunOutcome(exit_code=0, run_dir=None)

    run_dir = make_run_dir(cfg, out)
    (run_dir / "config.resolved.json").write_text(cfg.model_dump_json(indent=2))
    logger.info(f"Run directory {run_dir}")
    if cfg.task == "cs1d" and cfg.diagnostics:
        profile = fourier_penalty_profile(synthesize_task(cfg).operator)
        (run_dir / "penalty_profile.csv").write_text(
            "k,weight\n" + "".join(f"{k},{w:.17g}\n" for k, w in enumerate(profile))
        )

    results = run_cells(_cell_specs(cfg, run_dir, cfg.methods), workers or cfg.workers)
    (run_dir / "metrics.csv").write_text(metrics_csv(cfg, results))
    (run_dir / "diagnostics.csv").write_text(diagnostics_csv(results))
    (run_dir / "timings.csv").write_text(timings_csv(results))
    return RunOutcome(exit_code=_report_failures(results), run_dir=run_dir, results=results)


def run_sweep(
    cfg: ExperimentConfig,
    out: Optional[Path] = None,
    dry_run: bool = False,
    workers: Optional[int] = None,
) -> RunOutcome:
    """
    Mean PSNR over instances for every (T, K) in the sweep grid, written as
    sensitivity.csv with one row per T and one column per K.
    """
    if cfg.sweep is None:
        raise ValueError("Config has no [sweep] table")
    sweep = cfg.sweep
    if dry_run:
        for i in range(len(instance_names(cfg))):
            synthesize_task(cfg, i)
        return RunOutcome(exit_code=0, run_dir=None)

    run_dir = make_run_dir(cfg, out)
    (run_dir / "config.resolved.json").write_text(cfg.model_dump_json(indent=2))
    specs: list[CellSpec] = []
    grid: list[tuple[int, int]] = []
    for T in sweep.T_values:
        for K in sweep.K_values:
            grid.append((T, K))
            specs.extend(
                _cell_specs(cfg, run_dir, [sweep.method], f"T{T}-K{K}", {"T": T, "K": K})
            )
    results = run_cells(specs, workers or cfg.workers)
    per_cell = len(specs) // len(grid)
    psnr: dict[tuple[int, int], Optional[float]] = {}
    for index, key in enumerate(grid):
        chunk = results[index * per_cell : (index + 1) * per_cell]
        values = [capped(r.metrics.psnr) for r in chunk if isinstance(r, MethodSucceeded)]
        psnr[key] = float(np.mean(values)) if len(values) == len(chunk) else None

    lines = ["T," + ",".join(f"K{K}" for K in sweep.K_values)]
    for T in sweep.T_values:
        cells = [psnr[(T, K)] for K in sweep.K_values]
        lines.append(f"{T}," + ",".join("" if v is None else f"{v:.6f}" for v in cells))
    (run_dir / "sensitivity.csv").write_text("\n".join(lines) + "\n")
    return RunOutcome(exit_code=_report_failures(results), run_dir=run_dir, results=results)


def with_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    snapshot_every: Optional[int] = None,
) -> ExperimentConfig:
    """Re-resolves a config with command-line overrides applied."""
    if seed is None and snapshot_every is None:
        return cfg
    raw = cfg.model_dump(mode="json")
    if snapshot_every is not None:
        raw["sdi"]["snapshot_every"] = snapshot_every
    if seed is not None:
        # Budgets derived from T x K are kept; only seeds are re-derived.
        return resolve(raw, seed)
    return resolve(raw)
