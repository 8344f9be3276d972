"""Geometry primitives shared by every other module.

Point clouds are plain ``(N, D)`` float64 arrays with ``D`` in ``{2, 3}``.
Points are row vectors and a rotation ``R`` acts as ``x @ R``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class RandomSource:
    """Splittable random stream identified by ``(seed, stream)``.

    Backed by the counter-based Philox generator, so two sources with the
    same pair always produce the same sequence and distinct streams are
    statistically independent.
    """

    seed: int
    stream: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, index: int) -> "RandomSource":
        # Children live in a disjoint region of the stream-id space.
        return RandomSource(self.seed, (self.stream + 1) * 1_000_003 + index)


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RandomSource):
        return rng.generator()
    if rng is None or isinstance(rng, (int, np.integer)):
        return RandomSource(int(rng or 0)).generator()
    raise TypeError(f"cannot build a generator from {type(rng).__name__}")


def as_cloud(points, dim: int | None = None) -> np.ndarray:
    """Validate and return ``points`` as a float64 ``(N, D)`` array."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise GeometryError(f"expected an (N, 2) or (N, 3) array, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise GeometryError(f"expected {dim}D points, got {arr.shape[1]}D")
    if not np.all(np.isfinite(arr)):
        raise GeometryError("point cloud contains non-finite coordinates")
    return arr


def random_orthogonal(rng, proper: bool = True) -> np.ndarray:
    """Haar-distributed 3x3 orthogonal matrix.

    QR of a standard-normal matrix with the diagonal of ``R`` forced
    positive. With ``proper=True`` one column is flipped whenever the
    determinant comes out negative.
    """
    gen = as_generator(rng)
    q, r = np.linalg.qr(gen.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if proper and np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def is_rotation(mat, atol: float = 1e-9) -> bool:
    mat = np.asarray(mat, dtype=np.float64)
    return mat.shape == (3, 3) and np.allclose(mat.T @ mat, np.eye(3), atol=atol, rtol=0)


def center_and_scale(cloud) -> np.ndarray:
    """Center at the origin and scale isotropically so max |coord| is 1."""
    x = as_cloud(cloud, 3)
    if len(x) == 0:
        raise GeometryError("empty point cloud")
    x = x - x.mean(axis=0)
    extent = np.abs(x).max()
    if extent == 0.0:
        raise GeometryError("zero extent")
    x = x / extent
    # Re-center once more so the centroid is zero to round-off after scaling.
    return x - x.mean(axis=0)


def project(cloud, rotation) -> np.ndarray:
    """Rotate ``cloud`` by ``rotation`` (row-vector convention) and keep x, y."""
    x = as_cloud(cloud, 3)
    return (x @ np.asarray(rotation, dtype=np.float64))[:, :2]


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Row-vector rotation matrix for ``angle`` radians about ``axis``.

    ``v @ rotation_about_axis(a, th)`` rotates ``v`` counter-clockwise
    about ``a`` (right-hand rule).
    """
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0.0, -a[2], a[1]], [a[2], 0.0, -a[0]], [-a[1], a[0], 0.0]])
    col = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    return col.T


def read_xyz(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        rows.append([float(v) for v in line.split()])
    if not rows:
        raise GeometryError(f"{path}: no points")
    if len({len(r) for r in rows}) != 1:
        raise GeometryError(f"{path}: inconsistent column count")
    return as_cloud(rows)


def format_xyz(cloud, header: str | None = None) -> str:
    x = as_cloud(cloud)
    lines = [f"# {header}"] if header else []
    lines += [" ".join(f"{v:.10f}" for v in row) for row in x]
    return "\n".join(lines) + "\n"


def write_xyz(path, cloud, header: str | None = None) -> None:
    Path(path).write_text(format_xyz(cloud, header))
