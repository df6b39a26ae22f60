"""
Command-line entry point.

    self-diffusion run <config|preset> [--seed N] [--dry-run] [--snapshot-every N] [--out DIR] [--workers N]
    self-diffusion sweep <config|preset> ...
    self-diffusion schedule-dump --T 40 --beta-start 1e-4 --beta-end 1e-2 [--reverse] [--out FILE]
    self-diffusion adjoint-check <config|preset> [--probes 16]
    self-diffusion grad-check <config|preset> [--step 1e-6] [--samples 64]
    self-diffusion taylor-check <config|preset> [--sigma 1e-3 --sigma 1e-2] [--n-mc 256]
    self-diffusion make-mask --shape H W --seed N --out FILE [--pattern rectangle|equispaced]
    self-diffusion make-kernel --kind motion|box --size N --out FILE [--length L --angle A]
    self-diffusion presets
"""

from pathlib import Path
from typing import Optional, Sequence

import argparse
import logging
import sys

import numpy as np

from self_diffusion import autodiff as ad
from self_diffusion import operators
from self_diffusion.config import ExperimentConfig, load, preset_names
from self_diffusion.denoiser import build_unet
from self_diffusion.diagnostics import taylor_check
from self_diffusion.engine import INITIAL_NOISE_STREAM, reconstruction_loss
from self_diffusion.rng import Rng
from self_diffusion.runner import run_experiment, run_sweep, with_overrides
from self_diffusion.schedule import make_schedule
from self_diffusion.tasks import instance_names, synthesize_task
from self_diffusion.tensor_io import image_write

logger = logging.getLogger(__name__)

ADJOINT_TOLERANCE = 1e-10
GRAD_TOLERANCE = 1e-4


def _add_experiment_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", help="Path to a TOML config, or a preset name")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--dry-run", action="store_true")
    parser.add_argument("--snapshot-every", type=int, default=None)
    parser.add_argument("--out", type=Path, default=None)
    parser.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="self-diffusion",
        description="Self-diffusion reconstruction of signals and images from linear measurements.",
    )
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    _add_experiment_args(sub.add_parser("run", help="Run every method of an experiment"))
    _add_experiment_args(sub.add_parser("sweep", help="PSNR over a (T, K) grid"))

    schedule = sub.add_parser("schedule-dump", help="Write (t, beta, alpha_bar, sigma) as CSV")
    schedule.add_argument("--T", type=int, default=40)
    schedule.add_argument("--beta-start", type=float, default=1e-4)
    schedule.add_argument("--beta-end", type=float, default=1e-2)
    schedule.add_argument(
        "--reverse",
        action="store_true",
        help="Put beta_start at t=0 (default: beta_end at t=0)",
    )
    schedule.add_argument("--out", type=Path, default=None)

    adjoint = sub.add_parser("adjoint-check", help="Adjoint identity of the task operators")
    adjoint.add_argument("config")
    adjoint.add_argument("--probes", type=int, default=16)
    adjoint.add_argument("--seed", type=int, default=None)

    grad = sub.add_parser("grad-check", help="Denoiser gradients vs finite differences")
    grad.add_argument("config")
    grad.add_argument("--step", type=float, default=1e-6)
    grad.add_argument("--samples", type=int, default=64)
    grad.add_argument("--seed", type=int, default=None)

    taylor = sub.add_parser("taylor-check", help="Expected loss vs its second-order expansion")
    taylor.add_argument("config")
    taylor.add_argument("--sigma", type=float, action="append", default=None)
    taylor.add_argument("--n-mc", type=int, default=256)
    taylor.add_argument("--seed", type=int, default=None)
    taylor.add_argument("--out", type=Path, default=None)

    mask = sub.add_parser("make-mask", help="Write an inpainting mask or a Fourier sampling pattern")
    mask.add_argument("--shape", type=int, nargs=2, required=True, metavar=("H", "W"))
    mask.add_argument("--seed", type=int, default=0)
    mask.add_argument("--pattern", choices=["rectangle", "equispaced"], default="rectangle")
    mask.add_argument("--coverage", type=float, nargs=2, default=(0.10, 0.25))
    mask.add_argument("--acceleration", type=int, default=4)
    mask.add_argument("--acs-lines", type=int, default=8)
    mask.add_argument("--out", type=Path, required=True)

    kernel = sub.add_parser("make-kernel", help="Write a normalized blur kernel")
    kernel.add_argument("--kind", choices=["motion", "box"], default="motion")
    kernel.add_argument("--size", type=int, default=15)
    kernel.add_argument("--length", type=float, default=9.0)
    kernel.add_argument("--angle", type=float, default=30.0)
    kernel.add_argument("--out", type=Path, required=True)

    sub.add_parser("presets", help="List bundled presets")
    return parser


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load(args.config, args.seed)
    return with_overrides(cfg, snapshot_every=getattr(args, "snapshot_every", None))


def _emit(text: str, out: Optional[Path]) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        out.write_text(text)
        logger.info(f"Wrote {out}")


def cmd_run(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    outcome = run_experiment(cfg, out=args.out, dry_run=args.dry_run, workers=args.workers)
    if outcome.run_dir is not None:
        print(outcome.run_dir)
    return outcome.exit_code


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _experiment(args)
    outcome = run_sweep(cfg, out=args.out, dry_run=args.dry_run, workers=args.workers)
    if outcome.run_dir is not None:
        print(outcome.run_dir)
    return outcome.exit_code


def cmd_schedule_dump(args: argparse.Namespace) -> int:
    schedule = make_schedule(args.T, args.beta_start, args.beta_end, args.reverse)
    _emit(schedule.to_csv(), args.out)
    return 0


def cmd_adjoint_check(args: argparse.Namespace) -> int:
    cfg = load(args.config, args.seed)
    worst = 0.0
    print("instance,operator,residual")
    for i, name in enumerate(instance_names(cfg)):
        op = synthesize_task(cfg, i).operator
        residual = operators.adjoint_test(op, seed=cfg.seed, probes=args.probes)
        worst = max(worst, residual)
        print(f"{name},{op.kind},{residual:.3e}")
    return 0 if worst < ADJOINT_TOLERANCE else 1


def cmd_grad_check(args: argparse.Namespace) -> int:
    cfg = load(args.config, args.seed)
    task = synthesize_task(cfg)
    spatial = task.x_true.shape[1:] if cfg.task == "fourier2d" else task.x_true.shape
    net = build_unet(cfg.denoiser, tuple(spatial))
    x = ad.Tensor(Rng(cfg.sdi.seed).child(INITIAL_NOISE_STREAM).normal(net.input_shape))
    y = ad.Tensor(task.y)
    error = ad.grad_check(
        lambda inp: reconstruction_loss(
            task.operator, y, net, inp, cfg.sdi.tv_weight, cfg.sdi.freq_l1_weight
        ),
        x,
        net.parameters(),
        step=args.step,
        n_samples=args.samples,
        seed=cfg.seed,
    )
    print(f"max relative gradient error: {error:.3e}")
    return 0 if error < GRAD_TOLERANCE else 1


def cmd_taylor_check(args: argparse.Namespace) -> int:
    cfg = load(args.config, args.seed)
    task = synthesize_task(cfg)
    spatial = task.x_true.shape[1:] if cfg.task == "fourier2d" else task.x_true.shape
    net = build_unet(cfg.denoiser, tuple(spatial))
    x0 = Rng(cfg.sdi.seed).child(INITIAL_NOISE_STREAM).normal(net.input_shape)
    lines = ["sigma,mc_expected_loss,fidelity_term,jacobian_term,mc_std_error,relative_gap"]
    for sigma in args.sigma or [1e-3, 1e-2]:
        r = taylor_check(task.operator, net.evaluate, task.y, x0, sigma, args.n_mc, cfg.seed)
        lines.append(
            f"{r.sigma:.6g},{r.mc_expected_loss:.17g},{r.fidelity_term:.17g},"
            f"{r.jacobian_term:.17g},{r.mc_std_error:.17g},{r.relative_gap:.6g}"
        )
    _emit("\n".join(lines) + "\n", args.out)
    return 0


def cmd_make_mask(args: argparse.Namespace) -> int:
    shape = (args.shape[0], args.shape[1])
    if args.pattern == "rectangle":
        mask = operators.random_rectangle_mask(shape, args.seed, tuple(args.coverage))
    else:
        mask = operators.equispaced_pattern(shape, args.acceleration, args.acs_lines)
    image_write(args.out, mask)
    logger.info(f"Wrote {args.pattern} mask {shape} (seed {args.seed}) to {args.out}")
    return 0


def cmd_make_kernel(args: argparse.Namespace) -> int:
    if args.kind == "box":
        kernel = operators.box_kernel(args.size)
    else:
        kernel = operators.motion_kernel(args.length, args.angle, args.size)
    if args.out.suffix.lower() == ".pgm":
        # PGM stores [0, 1] levels; rescale so the peak uses the full range.
        image_write(args.out, kernel / np.max(kernel))
    else:
        image_write(args.out, kernel)
    logger.info(f"Wrote {args.kind} kernel {kernel.shape} to {args.out}")
    return 0


def cmd_presets(args: argparse.Namespace) -> int:
    for name in preset_names():
        print(name)
    return 0


COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "schedule-dump": cmd_schedule_dump,
    "adjoint-check": cmd_adjoint_check,
    "grad-check": cmd_grad_check,
    "taylor-check": cmd_taylor_check,
    "make-mask": cmd_make_mask,
    "make-kernel": cmd_make_kernel,
    "presets": cmd_presets,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=args.log_level.upper(),
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
    )
    return COMMANDS[args.command](args)
