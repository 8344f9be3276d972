"""Denoising score matching with preconditioning, and the Adam optimizer."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, replace

import numpy as np

from ..core import RandomSource, as_generator, random_orthogonal
from .network import NetArch, PointDenoiserNet
from .schedule import DiffusionConfig, loss_weight, sample_train_time

log = logging.getLogger(__name__)

# lambda(t) = 1/c_out(t)^2 blows up at t = 0.
T_FLOOR = 1e-5


@dataclass
class TrainBatch:
    x0: np.ndarray  # (B, N, 3)
    t: np.ndarray  # (B,)
    noise: np.ndarray  # (B, N, 3)

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        self.noise = np.asarray(self.noise, dtype=np.float64)
        if len(self.t) != len(self.x0) or self.noise.shape != self.x0.shape:
            raise ValueError("batch arrays disagree in size")
        if len(self.t) == 0:
            raise ValueError("empty batch")


def dsm_step(net: PointDenoiserNet, batch: TrainBatch) -> tuple[float, np.ndarray]:
    """Batch-mean of ``lambda(t) ||x0 - D(x0 + t n, t)||^2`` and its parameter gradient."""
    t = np.maximum(batch.t, T_FLOOR)
    xt = batch.x0 + t[:, None, None] * batch.noise
    lam = loss_weight(t)[:, None, None]
    bsz = len(t)
    box = {}

    def loss_grad(d):
        resid = d - batch.x0
        box["loss"] = float(np.sum(lam * resid**2) / bsz)
        return 2.0 * lam * resid / bsz

    _, _, g_params = net.forward_backward(xt, t, loss_grad)
    return box["loss"], g_params


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.step_count += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.step_count)
        v_hat = self.v / (1.0 - self.beta2**self.step_count)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainPhase:
    epochs: int
    batch_size: int = 32
    lr: float = 1e-3
    P_mean: float = -1.2
    P_std: float = 1.2
    t_max: float = 80.0


def default_phases(epochs: int, batch_size: int = 32, lr: float = 1e-3) -> list[TrainPhase]:
    """About 90% of epochs on small noise levels, the rest up to t_max = 80."""
    first = int(round(0.9 * epochs))
    phases = [TrainPhase(first, batch_size, lr, P_mean=-2.8, P_std=0.9, t_max=1.0)]
    if epochs - first > 0:
        phases.append(TrainPhase(epochs - first, batch_size, lr, P_mean=-1.2, P_std=1.2, t_max=80.0))
    return phases


def augment(clouds: np.ndarray, mode: str, gen: np.random.Generator) -> np.ndarray:
    if mode == "none":
        return clouds
    if mode not in ("orthogonal", "proper"):
        raise ValueError(f"unknown augmentation {mode!r}")
    rots = np.stack([random_orthogonal(gen, proper=mode == "proper") for _ in clouds])
    return np.einsum("bnk,bkj->bnj", clouds, rots)


def train(
    dataset,
    cfg: DiffusionConfig,
    phases,
    rng=0,
    arch: NetArch | None = None,
    net: PointDenoiserNet | None = None,
    augmentation: str = "proper",
    history: list | None = None,
) -> PointDenoiserNet:
    """Train a point denoiser on equally sized clouds.

    Each phase overrides ``P_mean``, ``P_std`` and ``t_max`` of ``cfg``; the
    Adam state carries over between phases. Mean training loss per epoch is
    appended to ``history`` when given.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 3 or len(data) == 0:
        raise ValueError("dataset must be a nonempty stack of equally sized clouds")
    src = rng if isinstance(rng, RandomSource) else RandomSource(int(rng))
    if net is None:
        net = PointDenoiserNet(arch or NetArch(), c_noise_scale=cfg.c_noise_scale, rng=src.child(0))
    gen = as_generator(src.child(1))
    opt = Adam()
    for phase in phases:
        pcfg = replace(cfg, P_mean=phase.P_mean, P_std=phase.P_std, t_max=phase.t_max)
        opt.lr = phase.lr
        for epoch in range(phase.epochs):
            order = gen.permutation(len(data))
            losses = []
            for start in range(0, len(data), phase.batch_size):
                x0 = augment(data[order[start : start + phase.batch_size]], augmentation, gen)
                t = sample_train_time(gen, pcfg, size=len(x0))
                batch = TrainBatch(x0, t, gen.standard_normal(x0.shape))
                loss, grad = dsm_step(net, batch)
                net.params = opt.step(net.params, grad)
                losses.append(loss)
            mean_loss = float(np.mean(losses))
            if history is not None:
                history.append(mean_loss)
            log.debug("phase t_max=%g epoch %d loss %.5g", phase.t_max, epoch, mean_loss)
    return net


def phases_to_json(phases) -> list[dict]:
    return [asdict(p) for p in phases]


def phases_from_json(items) -> list[TrainPhase]:
    return [TrainPhase(**item) for item in items]
