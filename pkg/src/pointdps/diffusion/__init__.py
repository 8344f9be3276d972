"""Diffusion prior: noise schedule, analytic mixture denoiser, network and training."""

from .gmm import GmmDenoiser, sample_gmm
from .network import NetArch, PointDenoiserNet, load_denoiser, save_denoiser
from .schedule import (
    DiffusionConfig,
    c_in,
    c_out,
    c_skip,
    loss_weight,
    perturb,
    sample_train_time,
    timesteps,
)

__all__ = [
    "DiffusionConfig",
    "GmmDenoiser",
    "NetArch",
    "PointDenoiserNet",
    "c_in",
    "c_out",
    "c_skip",
    "load_denoiser",
    "loss_weight",
    "perturb",
    "sample_gmm",
    "sample_train_time",
    "save_denoiser",
    "timesteps",
]
