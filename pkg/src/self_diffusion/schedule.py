"""
Noise schedule for the self-diffusion loop.

beta_t interpolates linearly from beta_end at t = 0 to beta_start at
t = T - 1, alpha_bar_t = prod_{i <= t} (1 - beta_i) and
sigma_t = sqrt(1 - alpha_bar_t). With `reverse=True` the interpolation runs
the other way (beta_start at t = 0).
"""

from pathlib import Path

import logging
import math

import numpy as np
from pydantic import BaseModel, ConfigDict

logger = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


class NoiseSchedule(BaseModel):
    model_config = ConfigDict(frozen=True)

    T: int
    beta_start: float
    beta_end: float
    reverse: bool = False
    beta: tuple[float, ...]
    alpha_bar: tuple[float, ...]
    sigma: tuple[float, ...]

    def sigma_at(self, t: int) -> float:
        assert 0 <= t < self.T, f"Step {t} outside schedule of length {self.T}"
        return self.sigma[t]

    def to_csv(self) -> str:
        lines = ["t,beta,alpha_bar,sigma"]
        for t in range(self.T):
            lines.append(
                f"{t},{self.beta[t]:.17g},{self.alpha_bar[t]:.17g},{self.sigma[t]:.17g}"
            )
        return "\n".join(lines) + "\n"

    def write_csv(self, path: Path) -> None:
        path.write_text(self.to_csv())


def make_schedule(
    T: int, beta_start: float, beta_end: float, reverse: bool = False
) -> NoiseSchedule:
    if T < 1:
        raise ScheduleError(f"Schedule needs at least one step, got T={T}")
    for name, value in (("beta_start", beta_start), ("beta_end", beta_end)):
        if not 0.0 < value < 1.0:
            raise ScheduleError(f"{name}={value} is outside (0, 1)")

    first, last = (beta_start, beta_end) if reverse else (beta_end, beta_start)
    if T == 1:
        beta = np.array([beta_start])
    else:
        beta = first + np.arange(T) / (T - 1) * (last - first)
    alpha_bar = np.cumprod(1.0 - beta)
    sigma = np.sqrt(1.0 - alpha_bar)
    logger.debug(
        f"Schedule T={T}: sigma_0={sigma[0]:.4g}, sigma_(T-1)={sigma[-1]:.4g}"
    )
    assert all(math.isfinite(s) for s in sigma)
    return NoiseSchedule(
        T=T,
        beta_start=beta_start,
        beta_end=beta_end,
        reverse=reverse,
        beta=tuple(float(b) for b in beta),
        alpha_bar=tuple(float(a) for a in alpha_bar),
        sigma=tuple(float(s) for s in sigma),
    )
