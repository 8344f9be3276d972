"""Reconstruction and generation metrics, gyration scaling and rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .assignment import solve_lap
from .core import as_cloud


# Grid rotations refined in full by kc_align.
KC_CANDIDATES = 4


class MetricError(ValueError):
    pass


def _pairwise_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def _same_size(x, xp):
    x, xp = as_cloud(x), as_cloud(xp)
    if x.shape != xp.shape:
        raise MetricError(f"clouds differ in shape: {x.shape} vs {xp.shape}")
    return x, xp


def chamfer(x, xp) -> float:
    """Symmetric Chamfer distance: unsquared L2, one 1/N factor for both directions."""
    x, xp = _same_size(x, xp)
    d = _pairwise_dist(x, xp)
    return float((d.min(axis=1).sum() + d.min(axis=0).sum()) / len(x))


def emd(x, xp) -> float:
    """Mean L2 distance under the optimal bijection."""
    x, xp = _same_size(x, xp)
    return solve_lap(_pairwise_dist(x, xp)).cost / len(x)


def radius_of_gyration(cloud) -> float:
    x = as_cloud(cloud)
    return float(np.sqrt(np.mean(np.sum((x - x.mean(axis=0)) ** 2, axis=1))))


def gyration_scale(model, target_rg: float) -> np.ndarray:
    """Center ``model`` and rescale it to radius of gyration ``target_rg``."""
    x = as_cloud(model, 3)
    x = x - x.mean(axis=0)
    rg = radius_of_gyration(x)
    if rg == 0.0:
        raise MetricError("model has zero radius of gyration")
    return x * (target_rg / rg)


def rmsd_atomic(target_atoms, model) -> float:
    """RMSD of every target atom to its nearest model point."""
    t = as_cloud(target_atoms, 3)
    m = as_cloud(model, 3)
    if len(t) == 0:
        raise MetricError("empty target")
    dist, _ = cKDTree(m).query(t)
    return float(np.sqrt(np.mean(dist**2)))


def rmsd_subsampled(target, model) -> float:
    """RMSD under the squared-distance optimal bijection."""
    t, m = _same_size(target, model)
    diff = t[:, None, :] - m[None, :, :]
    cost = np.einsum("ijk,ijk->ij", diff, diff)
    return float(np.sqrt(solve_lap(cost).cost / len(t)))


# -- rigid alignment ----------------------------------------------------------


@dataclass
class RigidTransform:
    """``y = scale * x @ rotation + translation`` (row vectors)."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise MetricError("scale must be positive")

    def apply(self, cloud) -> np.ndarray:
        return self.scale * np.asarray(cloud) @ self.rotation + self.translation

    def to_json(self) -> dict:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale,
        }


def quat_to_matrix(q) -> np.ndarray:
    """Row-vector rotation matrices for unit quaternions ``(w, x, y, z)``."""
    q = np.atleast_2d(q)
    w, x, y, z = q.T
    col = np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )
    return np.transpose(col, (0, 2, 1))


def rotation_grid(n: int = 576) -> np.ndarray:
    """At least ``n`` near-uniform rotations from a super-Fibonacci spiral on S^3.

    The spiral covers the full sphere; since ``q`` and ``-q`` are the same
    rotation, samples are folded onto ``w >= 0`` and the count doubled.
    """
    m = 2 * n
    phi = np.sqrt(2.0)
    psi = 1.533751168755204288118041
    s = np.arange(m) + 0.5
    r = np.sqrt(s / m)
    big_r = np.sqrt(1.0 - s / m)
    alpha = 2.0 * np.pi * s / phi
    beta = 2.0 * np.pi * s / psi
    q = np.stack([r * np.sin(alpha), r * np.cos(alpha), big_r * np.sin(beta), big_r * np.cos(beta)], 1)
    q = q[q[:, 0] >= 0]
    if len(q) < n:
        q = np.concatenate([q, -q[: n - len(q)]])
    return quat_to_matrix(q)


def _skew(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def _expm_so3(w) -> np.ndarray:
    th = np.linalg.norm(w)
    k = _skew(w)
    if th < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(th) / th * k + (1 - np.cos(th)) / th**2 * (k @ k)


def kernel_correlation(model, target, rotation, translation, bandwidth: float) -> float:
    moved = model @ rotation + translation
    diff = moved[:, None, :] - target[None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    return float(np.exp(-sq / (2.0 * bandwidth**2)).sum())


def _sq_dists(a, b):
    sq = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    return np.maximum(sq, 0.0)


def _kc_value_grad(model_c, target, rot, trans, bw):
    """KC value with gradients in a model-side rotation vector and the translation."""
    moved = model_c @ rot + trans
    k = np.exp(-_sq_dists(moved, target) / (2.0 * bw**2))
    # d/d moved_i of sum_j k_ij = -sum_j k_ij (moved_i - target_j) / bw^2
    g_moved = -(k.sum(1)[:, None] * moved - k @ target) / bw**2
    g_trans = g_moved.sum(axis=0)
    # moved_i = model_i @ (exp(skew(w)) rot); d/dw = sum_i (g_i rot^T) x model_i
    g_rot = np.cross(g_moved @ rot.T, model_c).sum(axis=0)
    return float(k.sum()), g_rot, g_trans


def _refine(model_c, target, rot, trans, bw, iters, history=None, tol=1e-10):
    """Gradient ascent with backtracking; never accepts a decrease.

    Stops once a step gains less than ``tol`` relative to the objective.
    """
    val, g_r, g_t = _kc_value_grad(model_c, target, rot, trans, bw)
    if history is not None:
        history.append(val)
    step = 1.0
    scale_r = 1.0 / max(np.linalg.norm(model_c, axis=1).max(), 1e-12)
    for _ in range(iters):
        gnorm = np.sqrt(np.sum((g_r * scale_r) ** 2) + np.sum(g_t**2))
        if gnorm < 1e-12:
            break
        accepted = False
        while step > 1e-10:
            dr = step * bw * scale_r * (g_r * scale_r) / gnorm
            dt = step * bw * g_t / gnorm
            new_rot = _expm_so3(dr) @ rot
            new_trans = trans + dt
            new_val, ng_r, ng_t = _kc_value_grad(model_c, target, new_rot, new_trans, bw)
            if new_val > val:
                converged = new_val - val <= tol * val
                rot, trans, val, g_r, g_t = new_rot, new_trans, new_val, ng_r, ng_t
                step = min(step * 1.5, 4.0)
                accepted = True
                break
            step *= 0.5
        if history is not None:
            history.append(val)
        if not accepted or converged:
            break
    # Re-orthonormalize accumulated round-off.
    u, _, vt = np.linalg.svd(rot)
    return u @ vt, trans, val


def kc_align(model, target, bandwidth: float | None = None, n_grid: int = 576,
             refine_iters: int = 200, history: list | None = None):
    """Proper rigid transform of ``model`` maximizing kernel correlation with ``target``.

    A grid of rotations (centroids matched) is scored at a wide bandwidth,
    the best few are refined while the bandwidth is annealed down, and the
    winner gets a final ascent at ``bandwidth`` (default 0.1 x Rg of target).
    Objective values of that final ascent are appended to ``history``.
    """
    m = as_cloud(model, 3)
    t = as_cloud(target, 3)
    rg = radius_of_gyration(t)
    if rg == 0.0 or radius_of_gyration(m) == 0.0:
        raise MetricError("cannot align degenerate clouds")
    bw = 0.1 * rg if bandwidth is None else float(bandwidth)
    mc = m - m.mean(axis=0)
    t_cent = t.mean(axis=0)

    wide = max(bw, 0.5 * rg)
    grid = rotation_grid(n_grid)
    moved = np.einsum("nk,gkj->gnj", mc, grid) + t_cent
    scores = np.empty(len(grid))
    for g in range(len(grid)):
        scores[g] = np.exp(-_sq_dists(moved[g], t) / (2 * wide**2)).sum()

    candidates = []
    for g in np.argsort(-scores, kind="stable")[:KC_CANDIDATES]:
        rot, trans = grid[g], t_cent.copy()
        b = wide
        while b > bw * 1.0001:
            rot, trans, _ = _refine(mc, t, rot, trans, b, 50, tol=1e-6)
            b = max(b * 0.5, bw)
        rot, trans, val = _refine(mc, t, rot, trans, bw, 50, tol=1e-6)
        candidates.append((val, rot, trans))
    best = max(candidates, key=lambda c: c[0])
    rot, trans, _ = _refine(mc, t, best[1], best[2], bw, refine_iters, history)
    # Fold the model centering into the translation.
    transform = RigidTransform(rot, trans - m.mean(axis=0) @ rot)
    return transform.apply(m), transform


def rotation_angle_deg(r1, r2) -> float:
    """Geodesic distance between two rotations in degrees."""
    c = (np.trace(np.asarray(r1).T @ np.asarray(r2)) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


def evaluate_model(model, pdb_atoms=None, subsampled_target=None, bandwidth=None) -> dict:
    """Scale to the target's Rg, align by kernel correlation, then report RMSDs."""
    ref = subsampled_target if subsampled_target is not None else pdb_atoms
    if ref is None:
        raise MetricError("need atoms or a subsampled target")
    ref = as_cloud(ref, 3)
    scaled = gyration_scale(model, radius_of_gyration(ref))
    aligned, transform = kc_align(scaled, ref, bandwidth)
    out = {"transform": transform.to_json(), "aligned": aligned}
    if pdb_atoms is not None:
        out["rmsd_atomic"] = rmsd_atomic(pdb_atoms, aligned)
    if subsampled_target is not None and len(subsampled_target) == len(aligned):
        out["rmsd_subsampled"] = rmsd_subsampled(subsampled_target, aligned)
    return out


# -- generation metrics --------------------------------------------------------


@dataclass
class GenerationReport:
    one_nna: float
    cov: float
    mmd: float

    def to_json(self) -> dict:
        return {"one_nna": self.one_nna, "cov": self.cov, "mmd": self.mmd}


def chamfer_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    out = np.empty((len(a), len(b)))
    for i, x in enumerate(a):
        diff = x[None, :, None, :] - b[:, None, :, :]
        d = np.sqrt(np.einsum("bijk,bijk->bij", diff, diff))
        out[i] = (d.min(axis=2).sum(axis=1) + d.min(axis=1).sum(axis=1)) / x.shape[0]
    return out


def generation_metrics(samples, refs) -> GenerationReport:
    """1-NNA, coverage (both in percent) and MMD under Chamfer distance."""
    s = np.asarray(samples, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if len(s) == 0 or len(r) == 0:
        raise MetricError("need at least one sample and one reference")
    if s.shape[1:] != r.shape[1:]:
        raise MetricError("samples and references differ in cloud size")
    d_sr = chamfer_matrix(s, r)
    d_ss = chamfer_matrix(s, s)
    d_rr = chamfer_matrix(r, r)

    full = np.block([[d_ss, d_sr], [d_sr.T, d_rr]])
    np.fill_diagonal(full, np.inf)
    labels = np.r_[np.zeros(len(s)), np.ones(len(r))]
    nn = np.argmin(full, axis=1)
    one_nna = 100.0 * float(np.mean(labels[nn] == labels))

    covered = np.unique(np.argmin(d_sr, axis=1))
    cov = 100.0 * len(covered) / len(r)
    mmd = float(d_sr.min(axis=0).mean())
    return GenerationReport(one_nna, cov, mmd)
