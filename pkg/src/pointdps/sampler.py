"""Guided reverse-diffusion sampling and the maximum-likelihood baseline.

Chains are batched: states have shape ``(B, N, 3)`` and one denoiser call
on the batch counts as one function evaluation per chain.
"""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import RandomSource
from .diffusion.schedule import DiffusionConfig, timesteps
from .diffusion.training import Adam
from .likelihood import ObservationSet, combined_energy

# Guidance is switched off below this energy (zeta = alpha / sqrt(E) diverges).
ENERGY_FLOOR = 1e-12

CHAIN_CHUNK = 32


@dataclass(frozen=True)
class BetaRule:
    """Noise control ``beta(t) = above(t) if t > threshold else below``.

    ``above`` is either ``1/t`` or a constant.
    """

    inverse_t: bool = True
    value: float = 0.0
    threshold: float = 0.0
    below: float = 0.0

    def __call__(self, t: float) -> float:
        if t > self.threshold:
            return 1.0 / t if self.inverse_t else self.value
        return self.below

    @classmethod
    def parse(cls, text: str) -> "BetaRule":
        """Parse ``EXPR[@THRESHOLD[:BELOW]]`` with EXPR ``1/t`` or a number.

        ``"1/t@0.15"`` is 1/t above 0.15 and 0 below; ``"1/t@1:1"`` is 1/t
        above 1 and 1 below; ``"0"`` is the probability-flow ODE.
        """
        m = re.fullmatch(r"\s*([^@:\s]+)\s*(?:@\s*([^:\s]+)\s*(?::\s*(\S+))?)?\s*", text)
        if not m:
            raise ValueError(f"bad beta rule {text!r}")
        expr, thr, below = m.groups()
        threshold = float(thr) if thr is not None else 0.0
        below_v = float(below) if below is not None else 0.0
        if expr == "1/t":
            return cls(True, 0.0, threshold, below_v)
        value = float(expr)
        if value < 0 or below_v < 0:
            raise ValueError("beta must be nonnegative")
        if thr is None:
            below_v = value
        return cls(False, value, threshold, below_v)

    def __str__(self) -> str:
        expr = "1/t" if self.inverse_t else f"{self.value:g}"
        return f"{expr}@{self.threshold:g}:{self.below:g}"


@dataclass
class Schedule:
    timesteps: np.ndarray
    beta: BetaRule = field(default_factory=BetaRule)
    alpha: float = 0.0

    def __post_init__(self):
        ts = np.asarray(self.timesteps, dtype=np.float64)
        if ts.ndim != 1 or len(ts) < 2 or ts[-1] != 0.0 or np.any(np.diff(ts) >= 0):
            raise ValueError("timesteps must strictly decrease to 0")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        self.timesteps = ts

    @classmethod
    def edm(cls, steps: int, t_max: float = 1.0, t_min: float = 0.002, rho: float = 3.0,
            beta: BetaRule | str = "1/t", alpha: float = 0.0) -> "Schedule":
        if isinstance(beta, str):
            beta = BetaRule.parse(beta)
        cfg = DiffusionConfig(t_min=t_min, t_max=t_max, rho=rho)
        return cls(timesteps(steps, cfg), beta, alpha)

    @property
    def n_steps(self) -> int:
        return len(self.timesteps) - 1


@dataclass
class GuidedScoreContext:
    """Everything needed to evaluate the (approximately) guided score.

    ``normalize=True`` uses ``zeta = alpha / sqrt(E)``; otherwise
    ``zeta = alpha``. When ``alpha`` is None, :func:`sample` takes it from
    the schedule. ``guidance_fn(x, t)`` replaces the denoiser-based
    likelihood score entirely (used for exact-guidance reference runs).
    """

    denoiser: object
    observations: ObservationSet | None = None
    alpha: float | None = None
    normalize: bool = True
    guidance_fn: Callable | None = None
    nfe: int = 0

    @property
    def guided(self) -> bool:
        if self.guidance_fn is not None:
            return True
        return self.observations is not None and len(self.observations) > 0 and bool(self.alpha)


def guided_score(ctx: GuidedScoreContext, x, t) -> np.ndarray:
    """Prior score plus reconstruction guidance at noise level ``t``.

    Accepts a single cloud ``(N, 3)`` or a batch ``(B, N, 3)``.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    if t <= 0:
        raise ValueError("guided score needs t > 0")
    ctx.nfe += 1
    if ctx.guidance_fn is not None:
        d = ctx.denoiser.denoise(xb, t)
        score = (d - xb) / t**2 + ctx.guidance_fn(xb, t)
    elif not ctx.guided:
        d = ctx.denoiser.denoise(xb, t)
        score = (d - xb) / t**2
    else:
        d, vjp = ctx.denoiser.denoise_vjp(xb, t)
        cot = np.zeros_like(xb)
        for b in range(len(xb)):
            e, g = combined_energy(d[b], ctx.observations)
            if e < ENERGY_FLOOR:
                continue
            zeta = ctx.alpha / np.sqrt(e) if ctx.normalize else ctx.alpha
            cot[b] = zeta * g
        score = (d - xb) / t**2 - vjp(cot)
    return score[0] if single else score


@dataclass
class SampleResult:
    clouds: np.ndarray  # (B, N, 3)
    nfe: int  # per chain
    energies: np.ndarray | None = None


def _chain_noise(gens, shape):
    return np.stack([g.standard_normal(shape) for g in gens])


def _run_chains(ctx, sched: Schedule, gens, n_points: int, method: str) -> np.ndarray:
    ts = sched.timesteps
    x = ts[0] * _chain_noise(gens, (n_points, 3))
    for i in range(sched.n_steps):
        t_cur, t_next = ts[i], ts[i + 1]
        dt = t_cur - t_next
        beta = sched.beta(t_cur)
        s_cur = guided_score(ctx, x, t_cur)
        if method == "euler":
            x_new = x + (t_cur + beta * t_cur**2) * s_cur * dt
            if t_next != 0 and beta > 0:
                x_new = x_new + np.sqrt(2.0 * beta * t_cur**2 * dt) * _chain_noise(gens, (n_points, 3))
            x = x_new
            continue
        x_next = x + t_cur * s_cur * dt
        if t_next != 0:
            s_next = guided_score(ctx, x_next, t_next)
            d = (t_cur + beta * t_cur**2) * (s_cur + s_next) * dt / 2.0
            x_next = x + d
            if beta > 0:
                x_next = x_next + np.sqrt(2.0 * beta * t_cur**2 * dt) * _chain_noise(gens, (n_points, 3))
        x = x_next
    return x


def sample(
    ctx: GuidedScoreContext,
    sched: Schedule,
    rng: RandomSource,
    n_samples: int = 1,
    n_points: int = 1024,
    method: str = "heun",
    threads: int = 1,
) -> SampleResult:
    """Approximate posterior sampling with second-order correction.

    ``method="heun"`` is the predictor/corrector scheme with noise
    injection (2N - 1 evaluations for N steps); ``method="euler"`` is the
    plain Euler(-Maruyama) scheme (N evaluations). Chain ``b`` draws all its
    noise from ``RandomSource(rng.seed, rng.stream + b)``, and chains are
    processed in fixed-size chunks, so results do not depend on ``threads``.
    """
    if method not in ("heun", "euler"):
        raise ValueError(f"unknown sampling method {method!r}")
    if ctx.observations is not None:
        ctx.observations.check_compatible(n_points)
        for obs in ctx.observations:
            obs.upsampler(n_points)  # freeze before any worker thread starts
    alpha = sched.alpha if ctx.alpha is None else ctx.alpha
    gens = [RandomSource(rng.seed, rng.stream + b).generator() for b in range(n_samples)]
    chunks = [range(s, min(s + CHAIN_CHUNK, n_samples)) for s in range(0, n_samples, CHAIN_CHUNK)]

    def run(chunk):
        local = GuidedScoreContext(ctx.denoiser, ctx.observations, alpha, ctx.normalize, ctx.guidance_fn)
        out = _run_chains(local, sched, [gens[b] for b in chunk], n_points, method)
        return out, local.nfe

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    clouds = np.concatenate([r[0] for r in results])
    nfe = results[0][1] if results else 0
    ctx.nfe += nfe
    energies = None
    if ctx.observations is not None and len(ctx.observations):
        energies = np.array([combined_energy(c, ctx.observations)[0] for c in clouds])
    return SampleResult(clouds, nfe, energies)


def gaussian_exact_guidance(y, weight: float, prior_var: float = 1.0) -> Callable:
    """Exact likelihood score for a Gaussian prior and a matched observation.

    Prior ``x0 ~ N(0, prior_var I)``, likelihood ``exp(-weight ||y - x0||^2)``
    with known point correspondence. Then ``p_t(y | x_t)`` is Gaussian in
    ``y`` and its gradient in ``x_t`` is returned by the closure.
    """
    y = np.asarray(y, dtype=np.float64)

    def fn(x, t):
        shrink = prior_var / (prior_var + t**2)
        var = 1.0 / (2.0 * weight) + prior_var * t**2 / (prior_var + t**2)
        return (y - shrink * x) / var * shrink

    return fn


@dataclass
class MLResult:
    clouds: np.ndarray
    energies: np.ndarray
    initial_energies: np.ndarray


def ml_reconstruct(
    observations: ObservationSet,
    n_points: int,
    steps: int = 100,
    lr: float = 0.01,
    rng: RandomSource | None = None,
    n_samples: int = 1,
) -> MLResult:
    """Adam on the combined energy from clouds uniform in [-1, 1]^3.

    Returns the lowest-energy iterate of each run.
    """
    if len(observations) == 0:
        raise ValueError("maximum-likelihood reconstruction needs observations")
    observations.check_compatible(n_points)
    rng = rng or RandomSource(0)
    clouds, energies, initial = [], [], []
    for b in range(n_samples):
        gen = RandomSource(rng.seed, rng.stream + b).generator()
        x = gen.uniform(-1.0, 1.0, size=(n_points, 3))
        opt = Adam(lr=lr)
        best_x, best_e = x, None
        for k in range(steps + 1):
            e, g = combined_energy(x, observations)
            if k == 0:
                initial.append(e)
            if best_e is None or e < best_e:
                best_x, best_e = x, e
            if k < steps:
                x = opt.step(x, g)
        clouds.append(best_x)
        energies.append(best_e)
    return MLResult(np.stack(clouds), np.array(energies), np.array(initial))


def unconditional_sample(denoiser, sched: Schedule, rng: RandomSource, n_samples: int, n_points: int,
                         threads: int = 1) -> SampleResult:
    return sample(GuidedScoreContext(denoiser), sched, rng, n_samples, n_points, threads=threads)

