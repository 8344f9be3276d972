"""Closed-form denoiser for an isotropic Gaussian-mixture prior.

The prior treats every ``d``-dimensional block of the input (one point for
``d = 3``) as an independent draw from ``sum_i w_i N(mu_i, s^2 I)``. Under the
perturbation kernel ``N(x0, t^2 I)`` the posterior mean is available in
closed form, which makes this the exact reference for trained networks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from ..core import as_generator


@dataclass
class GmmDenoiser:
    means: np.ndarray
    scale: float
    weights: np.ndarray

    def __post_init__(self):
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.scale <= 0:
            raise ValueError("mixture scale must be positive")
        if len(self.weights) != len(self.means):
            raise ValueError("one weight per mixture component required")
        if np.any(self.weights < 0) or not np.isclose(self.weights.sum(), 1.0, atol=1e-9):
            raise ValueError("mixture weights must be nonnegative and sum to 1")

    @property
    def block_dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def standard_normal(cls, dim: int = 3) -> "GmmDenoiser":
        return cls(np.zeros((1, dim)), 1.0, np.ones(1))

    def _posterior(self, x, t):
        """Responsibilities and per-block posterior mean of the mixture mean."""
        x = np.asarray(x, dtype=np.float64)
        shape = x.shape
        blocks = x.reshape(-1, self.block_dim)
        t = np.asarray(t, dtype=np.float64)
        if t.ndim == 0:
            t_blk = np.full(len(blocks), float(t))
        else:
            # One time per leading batch entry.
            t_blk = np.repeat(t, len(blocks) // len(t))
        var = self.scale**2 + t_blk**2
        sq = ((blocks[:, None, :] - self.means[None, :, :]) ** 2).sum(-1)
        with np.errstate(divide="ignore"):
            logits = np.log(self.weights)[None, :] - 0.5 * sq / var[:, None]
        gamma = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        mu_bar = gamma @ self.means
        return shape, blocks, t_blk, var, gamma, mu_bar

    def denoise(self, x, t) -> np.ndarray:
        shape, blocks, t_blk, var, _, mu_bar = self._posterior(x, t)
        s2 = self.scale**2
        out = (s2 * blocks + (t_blk**2)[:, None] * mu_bar) / var[:, None]
        return out.reshape(shape)

    def denoise_vjp(self, x, t):
        """Return ``D(x, t)`` and a function computing ``J_D^T g``.

        The Jacobian of each block is ``a I + c Cov_gamma(mu) / v`` with
        ``a = s^2 / v``, ``c = t^2 / v``, ``v = s^2 + t^2``; it is symmetric.
        """
        shape, blocks, t_blk, var, gamma, mu_bar = self._posterior(x, t)
        s2 = self.scale**2
        a = s2 / var
        c = t_blk**2 / var
        out = ((s2 * blocks + (t_blk**2)[:, None] * mu_bar) / var[:, None]).reshape(shape)
        means = self.means

        def vjp(g):
            g = np.asarray(g, dtype=np.float64).reshape(-1, self.block_dim)
            proj = g @ means.T  # (blocks, K): mu_i . g
            proj_bar = (gamma * proj).sum(1, keepdims=True)
            cov_g = (gamma * (proj - proj_bar)) @ means
            return (a[:, None] * g + (c / var)[:, None] * cov_g).reshape(shape)

        return out, vjp

    def score(self, x, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        t_b = t.reshape(t.shape + (1,) * (x.ndim - t.ndim))
        return (self.denoise(x, t) - x) / t_b**2

    def to_json(self) -> dict:
        return {
            "kind": "gmm",
            "means": self.means.tolist(),
            "scale": self.scale,
            "weights": self.weights.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "GmmDenoiser":
        return cls(np.asarray(data["means"]), float(data["scale"]), np.asarray(data["weights"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))


def sample_gmm(gmm: GmmDenoiser, n_clouds: int, n_points: int, rng) -> np.ndarray:
    """Draw ``(n_clouds, n_points, d)`` i.i.d. points from the mixture prior."""
    gen = as_generator(rng)
    comp = gen.choice(len(gmm.weights), size=(n_clouds, n_points), p=gmm.weights)
    noise = gen.standard_normal((n_clouds, n_points, gmm.block_dim))
    return gmm.means[comp] + gmm.scale * noise
