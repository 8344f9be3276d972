"""Small permutation-equivariant denoiser with hand-written reverse mode.

Architecture of the raw network ``F``, applied to ``(B, N, 3)`` inputs:

* per-point encoder MLP on ``[c_in x, emb]``
* mean-pooled global feature, broadcast back to every point
* per-point decoder MLP on ``[h_point, h_global, emb]``
* linear head to 3 outputs, zero-initialized

``emb`` is a sinusoidal embedding of ``c_noise(t)``. The preconditioned
denoiser is ``D = c_skip x + c_out F(c_in x, c_noise)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..core import as_generator
from .gmm import GmmDenoiser
from .schedule import c_in, c_out, c_skip


@dataclass(frozen=True)
class NetArch:
    point_dim: int = 3
    hidden: int = 64
    layers: int = 2
    embed_dim: int = 16

    def layer_shapes(self) -> list[tuple[int, int]]:
        d, h, e = self.point_dim, self.hidden, self.embed_dim
        enc = [(d + e, h)] + [(h, h)] * (self.layers - 1)
        dec = [(2 * h + e, h)] + [(h, h)] * (self.layers - 1)
        return enc + dec + [(h, d)]

    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_shapes())


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def time_embedding(c_noise, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / half)
    ang = np.asarray(c_noise, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


class PointDenoiserNet:
    def __init__(self, arch: NetArch, params=None, c_noise_scale: float = 1000.0, rng=0):
        if arch.embed_dim % 2:
            raise ValueError("embed_dim must be even")
        self.arch = arch
        self.c_noise_scale = float(c_noise_scale)
        self.params = self.init_params(arch, rng) if params is None else np.array(params, dtype=np.float64)
        if self.params.shape != (arch.n_params(),):
            raise ValueError(f"expected {arch.n_params()} parameters, got {self.params.shape}")
        if not np.all(np.isfinite(self.params)):
            raise ValueError("network parameters must be finite")

    @staticmethod
    def init_params(arch: NetArch, rng) -> np.ndarray:
        gen = as_generator(rng)
        chunks = []
        shapes = arch.layer_shapes()
        for k, (fan_in, fan_out) in enumerate(shapes):
            if k == len(shapes) - 1:
                w = np.zeros((fan_in, fan_out))
            else:
                w = gen.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
            chunks += [w.ravel(), np.zeros(fan_out)]
        return np.concatenate(chunks)

    def layers(self, params=None) -> list[tuple[np.ndarray, np.ndarray]]:
        p = self.params if params is None else params
        out, pos = [], 0
        for fan_in, fan_out in self.arch.layer_shapes():
            w = p[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            out.append((w, p[pos : pos + fan_out]))
            pos += fan_out
        return out

    # -- forward / backward -------------------------------------------------

    def _forward(self, x, t):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        b, n, _ = x.shape
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (b,))
        layers = self.layers()
        n_enc = self.arch.layers

        cs, co, ci = c_skip(t)[:, None, None], c_out(t)[:, None, None], c_in(t)[:, None, None]
        emb = time_embedding(self.c_noise_scale * t, self.arch.embed_dim)
        emb_b = np.broadcast_to(emb[:, None, :], (b, n, emb.shape[1]))

        acts = []  # (input, pre-activation) per hidden layer
        h = np.concatenate([ci * x, emb_b], axis=-1)
        for w, bias in layers[:n_enc]:
            z = h @ w + bias
            acts.append((h, z))
            h = z * _sigmoid(z)
        pooled = h.mean(axis=1, keepdims=True)
        h = np.concatenate([h, np.broadcast_to(pooled, h.shape), emb_b], axis=-1)
        for w, bias in layers[n_enc:-1]:
            z = h @ w + bias
            acts.append((h, z))
            h = z * _sigmoid(z)
        w_out, b_out = layers[-1]
        f = h @ w_out + b_out
        d = cs * x + co * f
        cache = dict(x=x, cs=cs, co=co, ci=ci, acts=acts, h_last=h, layers=layers, squeeze=squeeze)
        return (d[0] if squeeze else d), cache

    def _backward(self, cache, g_d, want_params: bool):
        g_d = np.asarray(g_d, dtype=np.float64)
        if cache["squeeze"]:
            g_d = g_d[None]
        layers, acts = cache["layers"], cache["acts"]
        n_enc, hid, dim = self.arch.layers, self.arch.hidden, self.arch.point_dim
        grads = [None] * len(layers)

        def dense_back(h_in, g_z, k):
            if want_params:
                w = layers[k][0]
                grads[k] = (
                    h_in.reshape(-1, w.shape[0]).T @ g_z.reshape(-1, w.shape[1]),
                    g_z.sum(axis=(0, 1)),
                )
            return g_z @ layers[k][0].T

        g_f = cache["co"] * g_d
        g_h = dense_back(cache["h_last"], g_f, len(layers) - 1)
        for k in range(len(layers) - 2, n_enc - 1, -1):
            h_in, z = acts[k]
            s = _sigmoid(z)
            g_h = dense_back(h_in, g_h * s * (1.0 + z * (1.0 - s)), k)
        n = g_h.shape[1]
        g_h = g_h[..., :hid] + g_h[..., hid : 2 * hid].sum(axis=1, keepdims=True) / n
        for k in range(n_enc - 1, -1, -1):
            h_in, z = acts[k]
            s = _sigmoid(z)
            g_h = dense_back(h_in, g_h * s * (1.0 + z * (1.0 - s)), k)
        g_x = cache["cs"] * g_d + cache["ci"] * g_h[..., :dim]
        if cache["squeeze"]:
            g_x = g_x[0]
        if not want_params:
            return g_x, None
        flat = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
        return g_x, flat

    # -- public API ---------------------------------------------------------

    def denoise(self, x, t) -> np.ndarray:
        return self._forward(x, t)[0]

    def denoise_vjp(self, x, t):
        d, cache = self._forward(x, t)
        return d, lambda g: self._backward(cache, g, want_params=False)[0]

    def forward_backward(self, x, t, loss_grad_fn):
        """Run ``D`` then back-propagate ``loss_grad_fn(D)``; returns (D, g_x, g_params)."""
        d, cache = self._forward(x, t)
        g_x, g_p = self._backward(cache, loss_grad_fn(d), want_params=True)
        return d, g_x, g_p

    def to_json(self, train_meta: dict | None = None) -> dict:
        return {
            "kind": "network",
            "arch": asdict(self.arch),
            "c_noise_scale": self.c_noise_scale,
            "params": self.params.tolist(),
            "train_meta": train_meta or {},
        }

    @classmethod
    def from_json(cls, data: dict) -> "PointDenoiserNet":
        return cls(NetArch(**data["arch"]), np.asarray(data["params"]), data["c_noise_scale"])


def load_denoiser(path):
    """Load a network or analytic-GMM denoiser from its JSON file."""
    data = json.loads(Path(path).read_text())
    if data.get("kind", "network") == "gmm":
        return GmmDenoiser.from_json(data)
    return PointDenoiserNet.from_json(data)


def save_denoiser(path, model, train_meta: dict | None = None) -> None:
    data = model.to_json(train_meta) if isinstance(model, PointDenoiserNet) else model.to_json()
    Path(path).write_text(json.dumps(data))
