"""Noise schedules, deterministic DDIM stepping/inversion, and guidance algebra."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep diffusion coefficients.

    betas[t] in (0, 1); alphas = 1 - betas; alpha_bars is the running product
    and is strictly decreasing. Index t = -1 is treated as alpha_bar = 1
    (the clean-data endpoint) by the stepping functions.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        if t < -1 or t >= self.T:
            raise ScheduleError(f"timestep {t} outside [-1, {self.T})")
        return 1.0 if t == -1 else float(self.alpha_bars[t])


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if T < 2:
        raise ScheduleError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ScheduleError(f"require 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    elif kind == "cosine":
        # Squared-cosine alpha_bar profile, betas clipped into the valid range.
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64)
        f = np.cos((steps / T + s) / (1 + s) * math.pi / 2.0) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], beta_min, beta_max)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sched = NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=alpha_bars)
    if not np.all((betas > 0) & (betas < 1)):
        raise ScheduleError("betas out of (0, 1)")
    if not np.all(np.diff(alpha_bars) < 0):
        raise ScheduleError("alpha_bars not strictly decreasing")
    return sched


Timestep = "int | torch.Tensor"


def _abar(schedule: NoiseSchedule, t) -> "float | torch.Tensor":
    """alpha_bar at integer or batched timesteps; t = -1 yields 1.0 exactly."""
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if int(t.min()) < -1 or int(t.max()) >= schedule.T:
            raise ScheduleError(f"timesteps outside [-1, {schedule.T})")
        table = torch.from_numpy(np.concatenate([[1.0], schedule.alpha_bars])).to(torch.float64)
        return table[t.long() + 1][:, None, None, None]
    return schedule.alpha_bar(int(t))


def _sqrt(x):
    return torch.sqrt(x) if isinstance(x, torch.Tensor) else math.sqrt(x)


def add_noise(z0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Forward noising: z_t = sqrt(abar_t) * z0 + sqrt(1 - abar_t) * eps.

    t may be a single int or a per-sample 1-D tensor in [0, T).
    """
    if z0.shape != eps.shape:
        raise ScheduleError(f"shape mismatch {tuple(z0.shape)} vs {tuple(eps.shape)}")
    if isinstance(t, int) and not 0 <= t < schedule.T:
        raise ScheduleError(f"timestep {t} outside [0, {schedule.T})")
    abar = _abar(schedule, t)
    out = _sqrt(abar) * z0 + _sqrt(1.0 - abar) * eps
    return out.to(z0.dtype)


def _check_order(t, t_prev) -> None:
    if isinstance(t, torch.Tensor) or isinstance(t_prev, torch.Tensor):
        tt = t if isinstance(t, torch.Tensor) else torch.as_tensor(t)
        pp = t_prev if isinstance(t_prev, torch.Tensor) else torch.as_tensor(t_prev)
        if not bool((pp < tt).all()):
            raise ScheduleError("t_prev must be < t elementwise")
    elif t_prev >= t:
        raise ScheduleError(f"t_prev {t_prev} must be < t {t}")


def ddim_step(z_t: torch.Tensor, eps_hat: torch.Tensor, t, t_prev, schedule: NoiseSchedule) -> torch.Tensor:
    """Deterministic DDIM update from t to t_prev (< t); t_prev = -1 returns z0_hat."""
    _check_order(t, t_prev)
    abar_t = _abar(schedule, t)
    abar_p = _abar(schedule, t_prev)
    z0_hat = (z_t - _sqrt(1.0 - abar_t) * eps_hat) / _sqrt(abar_t)
    return (_sqrt(abar_p) * z0_hat + _sqrt(1.0 - abar_p) * eps_hat).to(z_t.dtype)


def ddim_invert_step(z_prev: torch.Tensor, eps_hat: torch.Tensor, t_prev, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Algebraic inverse of ddim_step for the same eps_hat: maps z_{t_prev} to z_t."""
    _check_order(t, t_prev)
    abar_t = _abar(schedule, t)
    abar_p = _abar(schedule, t_prev)
    z0_hat = (z_prev - _sqrt(1.0 - abar_p) * eps_hat) / _sqrt(abar_p)
    return (_sqrt(abar_t) * z0_hat + _sqrt(1.0 - abar_t) * eps_hat).to(z_prev.dtype)


def inference_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride DDIM grid, descending, ending at the largest timestep T-1."""
    if not 1 <= steps <= T:
        raise ScheduleError(f"steps must be in [1, {T}], got {steps}")
    stride = T // steps
    return [stride * (i + 1) - 1 for i in range(steps)][::-1]


@dataclass
class GuidanceConfig:
    """Guidance scales and the effect-activation threshold.

    w1 scales prompt guidance, w2 the stylistic effect guidance, and w is the
    plain CfG scale used when no effect guidance is composed. Effect guidance
    stays off while t_norm < act_t (t_norm runs 0 at the start of denoising
    to 1 at the end); act_t defaults to 0.1.
    """

    w1: float = 7.5
    w2: float = 3.0
    act_t: float = 0.1
    w: float = 7.5

    def __post_init__(self):
        if not (0.0 <= self.act_t <= 1.0):
            raise ValueError(f"act_t must be in [0, 1], got {self.act_t}")
        for name in ("w1", "w2", "w"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    def effect_scale(self, t_norm: float) -> float:
        if not (0.0 <= t_norm <= 1.0):
            raise ValueError(f"t_norm must be in [0, 1], got {t_norm}")
        return 0.0 if t_norm < self.act_t else self.w2


def compose_cfg(eps_uncond: torch.Tensor, eps_cond: torch.Tensor, w: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond)."""
    return eps_uncond + w * (eps_cond - eps_uncond)


def effect_guidance(eps_at_strength: torch.Tensor, eps_at_zero: torch.Tensor) -> torch.Tensor:
    """Stylistic editing direction: prediction at strength k minus the zero baseline."""
    return eps_at_strength - eps_at_zero


def compose_full(
    eps_base_uncond: torch.Tensor,
    g_p: torch.Tensor,
    g_a: torch.Tensor | None,
    cfg: GuidanceConfig,
    t_norm: float,
) -> torch.Tensor:
    """Composed prediction: eps_uncond + w1 * g_p + gated w2 * g_a.

    With w2 = 0 (or while gated) this is bitwise-identical to compose_cfg at
    w = w1. g_a may be None when the effect branch was skipped entirely.
    """
    w2_eff = cfg.effect_scale(t_norm)
    if w2_eff == 0.0 or g_a is None:
        return eps_base_uncond + cfg.w1 * g_p
    return eps_base_uncond + cfg.w1 * g_p + w2_eff * g_a
