"""Noise schedule with zero drift and g(t) = sqrt(2t), so sigma(t) = t."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..core import as_generator

SIGMA_DATA = 0.5


@dataclass
class DiffusionConfig:
    t_min: float = 0.002
    t_max: float = 80.0
    rho: float = 3.0
    P_mean: float = -1.2
    P_std: float = 1.2
    c_noise_scale: float = 1000.0

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max:
            raise ValueError(f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        if self.rho < 1.0:
            raise ValueError("rho must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def timesteps(n: int, cfg: DiffusionConfig) -> np.ndarray:
    """``n + 1`` decreasing times: t_0 = t_max, t_{n-1} = t_min, t_n = 0."""
    if n < 2:
        raise ValueError("need at least 2 time steps")
    inv = 1.0 / cfg.rho
    lo, hi = cfg.t_min**inv, cfg.t_max**inv
    ts = (hi + np.arange(n) / (n - 1) * (lo - hi)) ** cfg.rho
    # Pin the endpoints; the power round trip is not exact in floating point.
    ts[0], ts[-1] = cfg.t_max, cfg.t_min
    return np.append(ts, 0.0)


def perturb(x0, t: float, rng) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    if t < 0:
        raise ValueError("t must be nonnegative")
    if t == 0:
        return x0.copy()
    return x0 + t * as_generator(rng).standard_normal(x0.shape)


def sample_train_time(rng, cfg: DiffusionConfig, size: int | None = None):
    """Log-normal training times truncated to ``t <= t_max`` by rejection."""
    gen = as_generator(rng)
    n = 1 if size is None else size
    out = np.empty(n)
    filled = 0
    while filled < n:
        t = np.exp(gen.normal(cfg.P_mean, cfg.P_std, size=n - filled))
        t = t[t <= cfg.t_max]
        out[filled : filled + len(t)] = t
        filled += len(t)
    return float(out[0]) if size is None else out


# Preconditioning with sigma_data = 0.5.


def c_skip(t):
    t = np.asarray(t, dtype=np.float64)
    return SIGMA_DATA**2 / (t**2 + SIGMA_DATA**2)


def c_out(t):
    t = np.asarray(t, dtype=np.float64)
    return SIGMA_DATA**2 * t / np.sqrt(t**2 + SIGMA_DATA**2)


def c_in(t):
    t = np.asarray(t, dtype=np.float64)
    return 1.0 / np.sqrt(t**2 + SIGMA_DATA**2)


def loss_weight(t):
    """lambda(t) = 1 / c_out(t)^2."""
    return 1.0 / c_out(t) ** 2
