"""
Experiment configuration.

Configs are TOML: top-level keys plus optional `[signal]`, `[operator]`,
`[denoiser]`, `[sdi]`, `[dip]`, `[admm]` and `[sweep]` tables. Loading fills
every default that depends on other fields (section seeds, DIP budget,
network channels) so the validated `ExperimentConfig` is fully resolved and
can be echoed and re-run as is.
"""

from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional

import copy
import json
import logging

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import BaseModel, ConfigDict, Field, model_validator

from self_diffusion.baselines import AdmmBpConfig, DipConfig
from self_diffusion.denoiser import DenoiserConfig
from self_diffusion.engine import SDIConfig

logger = logging.getLogger(__name__)

Task = Literal["cs1d", "inpaint", "deblur", "sr", "denoise", "fourier2d"]
Method = Literal["sdi", "sdi-fixed", "sdi-none", "dip", "admm-bp"]
MetricName = Literal["psnr", "ssim", "nrmse"]

IMAGE_TASKS = ("inpaint", "deblur", "sr", "denoise", "fourier2d")

# Amplitude-frequency pairs of the 1D compressed-sensing signal.
DEFAULT_COMPONENTS: list[tuple[float, int]] = [
    (1.0, 1),
    (0.5, 15),
    (0.3, 20),
    (1.0, 6),
    (0.8, 3),
    (0.6, 4),
    (0.7, 5),
]


class SignalSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    N: int = Field(default=128, ge=1)
    components: list[tuple[float, int]] = Field(
        default_factory=lambda: list(DEFAULT_COMPONENTS)
    )


class OperatorConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # cs1d
    measurements: int = Field(default=35, ge=1)
    # inpaint
    mask_path: Optional[Path] = None
    mask_coverage: tuple[float, float] = (0.10, 0.25)
    # deblur
    kernel_path: Optional[Path] = None
    kernel: Literal["motion", "box"] = "motion"
    kernel_size: int = Field(default=15, ge=1)
    kernel_length: float = Field(default=9.0, gt=0)
    kernel_angle: float = 30.0
    circular: bool = False
    # sr
    factor: int = Field(default=2, ge=1)
    # denoise
    noise_sigma: float = Field(default=25.0 / 255.0, ge=0)
    # fourier2d
    pattern_path: Optional[Path] = None
    acceleration: int = Field(default=6, ge=1)
    acs_lines: int = Field(default=8, ge=0)


class SweepConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    method: Literal["sdi", "sdi-fixed", "sdi-none"] = "sdi"
    T_values: list[int] = Field(default_factory=lambda: [10, 20, 40], min_length=1)
    K_values: list[int] = Field(default_factory=lambda: [25, 100, 300, 500], min_length=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = "experiment"
    task: Task
    methods: list[Method] = Field(min_length=1)
    seed: int = Field(ge=0)
    precision: Literal["float64", "float32"] = "float64"
    output_dir: Path = Path("runs")
    image_dir: Optional[Path] = None
    synthetic_images: int = Field(default=0, ge=0)
    image_size: int = Field(default=64, ge=16)
    metrics: list[MetricName] = Field(default_factory=lambda: ["psnr", "ssim", "nrmse"])
    diagnostics: bool = True
    checkpoint: bool = False
    workers: int = Field(default=0, ge=0)

    signal: SignalSpec = SignalSpec()
    operator: OperatorConfig = OperatorConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    sdi: SDIConfig = SDIConfig()
    dip: DipConfig = DipConfig()
    admm: AdmmBpConfig = AdmmBpConfig()
    sweep: Optional[SweepConfig] = None

    @model_validator(mode="after")
    def check_task(self) -> "ExperimentConfig":
        if "admm-bp" in self.methods and self.task != "cs1d":
            raise ValueError("admm-bp needs an explicit matrix and only runs on the cs1d task")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError(f"Duplicate methods in {self.methods}")
        return self

    @property
    def is_image_task(self) -> bool:
        return self.task in IMAGE_TASKS


def _section(raw: dict[str, Any], name: str) -> dict[str, Any]:
    section: Any = raw.setdefault(name, {})
    if not isinstance(section, dict):
        raise ValueError(f"[{name}] must be a table")
    return section


def resolve(raw: dict[str, Any], seed: Optional[int] = None) -> ExperimentConfig:
    """
    Fills derived defaults into a raw config mapping and validates it.
    A `seed` override replaces the top-level seed and every section seed.
    """
    raw = copy.deepcopy(raw)
    sdi = _section(raw, "sdi")
    dip = _section(raw, "dip")
    denoiser = _section(raw, "denoiser")
    if seed is not None:
        raw["seed"] = seed
        for section, key in (
            (sdi, "seed"),
            (denoiser, "seed"),
            (dip, "seed"),
            (dip, "input_noise_seed"),
        ):
            section.pop(key, None)
    if "seed" not in raw:
        raise ValueError("Config needs a top-level seed")
    base_seed = raw["seed"]
    sdi.setdefault("seed", base_seed)
    denoiser.setdefault("seed", base_seed)
    dip.setdefault("seed", denoiser["seed"])
    dip.setdefault("input_noise_seed", sdi["seed"])

    # Compute-matched DIP: same learning rate and penalties, T x K iterations.
    sdi_defaults = SDIConfig.model_validate(sdi)
    dip.setdefault("iterations", sdi_defaults.T * sdi_defaults.K)
    dip.setdefault("eta", sdi_defaults.eta)
    dip.setdefault("tv_weight", sdi_defaults.tv_weight)
    dip.setdefault("freq_l1_weight", sdi_defaults.freq_l1_weight)
    dip.setdefault("normalize_measurements", sdi_defaults.normalize_measurements)
    dip.setdefault("back_projection", sdi_defaults.back_projection)

    task = raw.get("task")
    denoiser["dims"] = 1 if task == "cs1d" else 2
    channels = 2 if task == "fourier2d" else 1
    denoiser["in_channels"] = channels
    denoiser["out_channels"] = channels
    if task != "cs1d":
        raw.setdefault("metrics", ["psnr", "ssim", "nrmse"])
    else:
        raw.setdefault("metrics", ["psnr", "nrmse"])

    config = ExperimentConfig.model_validate(raw)
    logger.debug(f"Resolved config: {config.model_dump_json()}")
    return config


def load_config(path: Path, seed: Optional[int] = None) -> ExperimentConfig:
    if path.suffix == ".json":
        raw = json.loads(path.read_text())
    else:
        with path.open("rb") as f:
            raw = tomllib.load(f)
    logger.info(f"Loaded config {path}")
    return resolve(raw, seed)


def preset_names() -> list[str]:
    files = resources.files("self_diffusion.presets").iterdir()
    return sorted(f.name.removesuffix(".toml") for f in files if f.name.endswith(".toml"))


def load_preset(name: str, seed: Optional[int] = None) -> ExperimentConfig:
    if name not in preset_names():
        raise ValueError(f"Unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = resources.files("self_diffusion.presets").joinpath(f"{name}.toml").read_text()
    logger.info(f"Loaded preset {name}")
    return resolve(tomllib.loads(text), seed)


def load(config: str, seed: Optional[int] = None) -> ExperimentConfig:
    """A config file path, or the name of a bundled preset."""
    path = Path(config)
    if path.exists():
        return load_config(path, seed)
    return load_preset(config, seed)
