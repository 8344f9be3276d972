"""Reconstruction benchmarks: sampler-schedule ablation and DPS vs. ML."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from .core import RandomSource
from .data import ObservationSpec, simulate_observations
from .metrics import chamfer, emd
from .sampler import BetaRule, GuidedScoreContext, Schedule, ml_reconstruct, sample

log = logging.getLogger(__name__)


@dataclass
class ReconTask:
    name: str
    observations: ObservationSpec
    alpha: float
    beta: str = "1/t"


@dataclass
class ScheduleVariant:
    """One row of the sampler ablation, at matched function evaluations."""

    label: str
    method: str
    beta: str
    steps: int


def ablation_variants(steps: int = 40, beta: str = "1/t@0.15") -> list[ScheduleVariant]:
    nfe = 2 * steps - 1
    return [
        ScheduleVariant("A: Euler ODE", "euler", "0", nfe),
        ScheduleVariant("B: + noise", "euler", beta, nfe),
        ScheduleVariant("C: + correction", "heun", beta, steps),
    ]


def _scores(clouds, target):
    return [chamfer(c, target) for c in clouds], [emd(c, target) for c in clouds]


def run_ablation(denoiser, targets, task: ReconTask, n_samples: int = 5, seed: int = 0,
                 steps: int = 40, t_max: float = 1.0, rho: float = 3.0) -> dict:
    """Mean CD/EMD/energy of each schedule variant over ``targets``."""
    variants = ablation_variants(steps, task.beta)
    rows = {v.label: {"cd": [], "emd": [], "energy": [], "nfe": None} for v in variants}
    for k, target in enumerate(targets):
        obs = simulate_observations(target, task.observations, RandomSource(seed, 10_000 + k))
        for v in variants:
            sched = Schedule.edm(v.steps, t_max=t_max, rho=rho, beta=BetaRule.parse(v.beta), alpha=task.alpha)
            res = sample(GuidedScoreContext(denoiser, obs), sched, RandomSource(seed, 100 * k),
                         n_samples, len(target), method=v.method)
            cd, em = _scores(res.clouds, target)
            rows[v.label]["cd"] += cd
            rows[v.label]["emd"] += em
            rows[v.label]["energy"] += list(res.energies)
            rows[v.label]["nfe"] = res.nfe
    return {
        label: {"cd": float(np.mean(r["cd"])), "emd": float(np.mean(r["emd"])),
                "energy": float(np.mean(r["energy"])), "nfe": r["nfe"]}
        for label, r in rows.items()
    }


def compare_dps_ml(denoiser, targets, task: ReconTask, n_samples: int = 5, seed: int = 0,
                   steps: int = 40, t_max: float = 1.0, rho: float = 3.0,
                   ml_steps: int = 100, ml_lr: float = 0.01) -> dict:
    """Mean CD/EMD/energy of guided sampling and of the ML baseline on one task."""
    out = {m: {"cd": [], "emd": [], "energy": []} for m in ("dps", "ml")}
    sched = Schedule.edm(steps, t_max=t_max, rho=rho, beta=task.beta, alpha=task.alpha)
    for k, target in enumerate(targets):
        obs = simulate_observations(target, task.observations, RandomSource(seed, 10_000 + k))
        dps = sample(GuidedScoreContext(denoiser, obs), sched, RandomSource(seed, 100 * k),
                     n_samples, len(target))
        ml = ml_reconstruct(obs, len(target), ml_steps, ml_lr, RandomSource(seed, 100 * k), n_samples)
        for name, clouds, energies in (("dps", dps.clouds, dps.energies), ("ml", ml.clouds, ml.energies)):
            cd, em = _scores(clouds, target)
            out[name]["cd"] += cd
            out[name]["emd"] += em
            out[name]["energy"] += list(energies)
    summary = {name: {key: float(np.mean(vals)) for key, vals in d.items()} for name, d in out.items()}
    summary["task"] = {"name": task.name, **asdict(task.observations), "alpha": task.alpha, "beta": task.beta}
    log.info("%s: %s", task.name, summary)
    return summary
