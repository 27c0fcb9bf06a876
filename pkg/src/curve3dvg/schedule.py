"""Guidance-scale interpolation, timestep annealing and x0 reconstruction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def scaled_linear_alpha_bar(n: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> np.ndarray:
    """Cumulative alpha products for the scaled-linear beta schedule, indexed t = 1..n."""
    betas = np.linspace(beta_start**0.5, beta_end**0.5, n, dtype=np.float64) ** 2
    return np.cumprod(1.0 - betas)


@dataclass(frozen=True)
class ScheduleConfig:
    lambda0: float = 1.0
    lambda1: float = 7.5
    t_range: tuple[float, float] = (0.1, 0.9)
    N: int = 1000
    total_steps: int = 2000
    window: float = 0.1
    alpha_bar: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (self.lambda1 >= self.lambda0 > 0):
            raise ValueError("need lambda1 >= lambda0 > 0")
        lo, hi = self.t_range
        if not (0.0 <= lo < hi <= 1.0):
            raise ValueError("need 0 <= t_lo < t_hi <= 1")
        if self.total_steps < 1 or self.N < 1:
            raise ValueError("N and total_steps must be positive")
        ab = scaled_linear_alpha_bar(self.N) if self.alpha_bar is None else np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.N,):
            raise ValueError(f"alpha_bar must have {self.N} entries")
        if not (np.all(np.diff(ab) < 0) and ab[0] <= 1.0 and ab[-1] > 0.0):
            raise ValueError("alpha_bar must be strictly decreasing in (0, 1]")
        object.__setattr__(self, "t_range", (float(lo), float(hi)))
        object.__setattr__(self, "alpha_bar", ab)

    def alpha_bar_at(self, t: int) -> float:
        """Table lookup with t = 0 as the noise-free limit."""
        if not 0 <= t <= self.N:
            raise ValueError(f"timestep {t} outside [0, {self.N}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])

    def to_dict(self) -> dict:
        return {"lambda0": self.lambda0, "lambda1": self.lambda1, "t_range": list(self.t_range),
                "N": self.N, "total_steps": self.total_steps, "window": self.window}

    @classmethod
    def from_dict(cls, data: dict) -> ScheduleConfig:
        known = {k: data[k] for k in ("lambda0", "lambda1", "N", "total_steps", "window") if k in data}
        if "t_range" in data:
            known["t_range"] = tuple(data["t_range"])
        return cls(**known)


def cfg_scale(t: int, cfg: ScheduleConfig) -> float:
    """Guidance scale interpolated from lambda1 (t = 0, the noise-free limit) down to lambda0 (t = N)."""
    if not 0 <= t <= cfg.N:
        raise ValueError(f"timestep {t} outside [0, {cfg.N}]")
    return cfg.lambda0 + (cfg.lambda1 - cfg.lambda0) * (1.0 - t / cfg.N)


def t_bounds(step: int, cfg: ScheduleConfig) -> tuple[int, int]:
    """Integer sampling range at a step; the upper end shrinks linearly toward t_lo + window."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    lo = cfg.t_range[0] * cfg.N
    hi0 = cfg.t_range[1] * cfg.N
    hi1 = lo + cfg.window * cfg.N
    frac = step / (cfg.total_steps - 1) if cfg.total_steps > 1 else 1.0
    hi = hi0 + (hi1 - hi0) * frac
    return max(1, int(round(lo))), int(round(hi))


def anneal_timestep(step: int, cfg: ScheduleConfig, rng: np.random.Generator) -> int:
    lo, hi = t_bounds(step, cfg)
    return int(rng.integers(lo, hi + 1))


def reconstruct_x0(x_t: np.ndarray, delta_star: np.ndarray, t: int, cfg: ScheduleConfig) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=np.float64)
    delta_star = np.asarray(delta_star, dtype=np.float64)
    if x_t.shape != delta_star.shape:
        raise ValueError(f"shape mismatch: {x_t.shape} vs {delta_star.shape}")
    ab = cfg.alpha_bar_at(t)
    return (x_t - np.sqrt(1.0 - ab) * delta_star) / np.sqrt(ab)


def forward_noise(x0: np.ndarray, eps: np.ndarray, t: int, cfg: ScheduleConfig) -> np.ndarray:
    ab = cfg.alpha_bar_at(t)
    return np.sqrt(ab) * np.asarray(x0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def guided_direction(eps_uncond: np.ndarray, delta: np.ndarray, t: int, cfg: ScheduleConfig) -> np.ndarray:
    """Unconditional prediction plus the interpolated-scale update direction."""
    return np.asarray(eps_uncond) + cfg_scale(t, cfg) * np.asarray(delta)


def blur_sigma(scale: float, cfg: ScheduleConfig, sigma_max: float = 4.0) -> float:
    """Coarse-to-fine proxy: blur falls linearly from sigma_max to 0 across the scales the
    sampled timesteps can reach, scale(t_hi) to scale(t_lo), and is clamped outside them."""
    lo = cfg_scale(int(round(cfg.t_range[1] * cfg.N)), cfg)
    hi = cfg_scale(int(round(cfg.t_range[0] * cfg.N)), cfg)
    if hi <= lo:
        return 0.0
    frac = (hi - scale) / (hi - lo)
    return float(sigma_max * min(max(frac, 0.0), 1.0))


def schedule_table(cfg: ScheduleConfig, seed: int) -> list[tuple[int, int, float]]:
    """(step, t, cfg_scale) for every step of a run with the given seed."""
    rng = np.random.default_rng(seed)
    rows = []
    for step in range(cfg.total_steps):
        t = anneal_timestep(step, cfg, rng)
        rows.append((step, t, cfg_scale(t, cfg)))
    return rows
