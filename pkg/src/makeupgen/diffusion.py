"""Noise schedule and the forward / reverse diffusion primitives.

The schedule is the usual discrete variance-preserving construction:

    alpha_t     = 1 - beta_t
    alpha_bar_t = prod_{s<=t} alpha_s

Forward corruption of a clean latent z0 with noise eps at step t:

    z_t = sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps

The reverse update is deterministic (no injected noise): it inverts the
forward map to a clean estimate and re-projects it onto the previous
noise level, so running it with the true eps exactly retraces the
forward trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import LatentGrid


class ScheduleError(ValueError):
    """Invalid schedule parameters or timestep."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients, immutable once built."""

    num_train_steps: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal fraction at step t; t=-1 is the clean limit."""
        if t < -1 or t >= self.num_train_steps:
            raise ScheduleError(
                f"timestep {t} outside [-1, {self.num_train_steps})"
            )
        return 1.0 if t == -1 else float(self.alpha_bars[t])


def make_schedule(
    num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02
) -> NoiseSchedule:
    """Linear beta ramp with running-product alpha_bars."""
    if num_steps < 1:
        raise ScheduleError(f"num_steps must be >= 1, got {num_steps}")
    if not (np.isfinite(beta_start) and np.isfinite(beta_end)):
        raise ScheduleError("betas must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got "
            f"({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.flags.writeable = False
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars)


def _check_pair(a: LatentGrid, b: LatentGrid, what: str) -> None:
    if a.shape != b.shape:
        raise ScheduleError(
            f"{what}: shape mismatch {a.shape} vs {b.shape}"
        )


def forward_diffuse(
    z0: LatentGrid, t: int, eps: LatentGrid, schedule: NoiseSchedule
) -> LatentGrid:
    """Corrupt z0 to noise level t using the given noise field."""
    _check_pair(z0, eps, "forward_diffuse")
    if not 0 <= t < schedule.num_train_steps:
        raise ScheduleError(
            f"timestep {t} outside [0, {schedule.num_train_steps})"
        )
    ab = schedule.alpha_bar(t)
    data = np.sqrt(ab) * z0.data + np.sqrt(1.0 - ab) * eps.data
    return z0.like(data)


def invert_forward(
    z_t: LatentGrid, t: int, eps: LatentGrid, schedule: NoiseSchedule
) -> LatentGrid:
    """Algebraic inverse of :func:`forward_diffuse` with the true noise."""
    _check_pair(z_t, eps, "invert_forward")
    ab = schedule.alpha_bar(t)
    data = (z_t.data - np.sqrt(1.0 - ab) * eps.data) / np.sqrt(ab)
    return z_t.like(data)


def reverse_step(
    z_t: LatentGrid,
    eps_hat: LatentGrid,
    t: int,
    schedule: NoiseSchedule,
    prev_t: int | None = None,
) -> LatentGrid:
    """One deterministic denoising step from level t to ``prev_t``.

    ``prev_t`` defaults to ``t - 1``; samplers running a strided subset
    of the training steps pass the next subset member instead (``-1``
    denotes the fully clean level).  The update predicts the clean
    latent and re-noises it at the target level with the same predicted
    noise, so no fresh randomness enters.
    """
    _check_pair(z_t, eps_hat, "reverse_step")
    if t < 1:
        raise ScheduleError(f"reverse_step needs t >= 1, got {t}")
    if not np.all(np.isfinite(eps_hat.data)):
        raise ScheduleError("eps_hat contains non-finite values")
    if prev_t is None:
        prev_t = t - 1
    if not -1 <= prev_t < t:
        raise ScheduleError(f"prev_t {prev_t} must lie in [-1, {t})")
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(prev_t)
    z0_hat = (z_t.data - np.sqrt(1.0 - ab_t) * eps_hat.data) / np.sqrt(ab_t)
    data = np.sqrt(ab_prev) * z0_hat + np.sqrt(1.0 - ab_prev) * eps_hat.data
    return z_t.like(data)


def inference_timesteps(schedule: NoiseSchedule, num_steps: int) -> list[int]:
    """Evenly strided descending subset of the training steps.

    The subset runs from the highest training step down to 1; samplers
    take the final update to the clean level (-1) themselves.
    """
    if num_steps < 1:
        raise ScheduleError("num_steps must be >= 1")
    top = schedule.num_train_steps - 1
    if num_steps > top:
        raise ScheduleError(
            f"cannot take {num_steps} inference steps from a "
            f"{schedule.num_train_steps}-step schedule"
        )
    if num_steps == 1:
        return [top]
    grid = np.linspace(top, 1, num_steps)
    steps = sorted({int(round(v)) for v in grid}, reverse=True)
    return steps
