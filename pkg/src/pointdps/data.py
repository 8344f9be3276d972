"""PDB parsing, coarse-graining, synthetic datasets and observation simulation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import RandomSource, as_cloud, as_generator, center_and_scale, project, random_orthogonal
from .likelihood import Observation, ObservationSet

WATER = {"HOH", "WAT", "H2O", "DOD", "SOL", "TIP", "TIP3"}


class PdbError(ValueError):
    pass


@dataclass(frozen=True)
class AtomRecord:
    element: str
    position: tuple[float, float, float]
    record: str  # "ATOM" or "HETATM"


def parse_pdb(text) -> list[AtomRecord]:
    """Heavy atoms of the first model in fixed-column PDB text.

    Keeps ATOM and non-water HETATM records with blank or 'A' altloc and
    drops hydrogens (element H or D).
    """
    if isinstance(text, bytes):
        text = text.decode("ascii", errors="replace")
    atoms = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        record = line[:6].strip()
        if record == "ENDMDL":
            break
        if record not in ("ATOM", "HETATM"):
            continue
        if line[16:17] not in ("", " ", "A"):
            continue
        if record == "HETATM" and line[17:20].strip() in WATER:
            continue
        element = line[76:78].strip() if len(line) >= 77 else ""
        if not element:
            name = line[12:16]
            letters = [c for c in name if c.isalpha()]
            element = letters[0] if letters else ""
        element = element.upper()
        if element in ("H", "D") or not element:
            continue
        try:
            pos = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError:
            raise PdbError(f"line {lineno}: malformed coordinates") from None
        if not all(np.isfinite(pos)):
            raise PdbError(f"line {lineno}: non-finite coordinates")
        atoms.append(AtomRecord(element, pos, record))
    if not atoms:
        raise PdbError("no heavy atoms")
    return atoms


def atom_positions(atoms) -> np.ndarray:
    return np.array([a.position for a in atoms], dtype=np.float64)


# -- clustering ----------------------------------------------------------------


def kmeans_plusplus(points: np.ndarray, k: int, gen: np.random.Generator) -> np.ndarray:
    centers = [points[gen.integers(len(points))]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            idx = gen.integers(len(points))
        else:
            idx = gen.choice(len(points), p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, k: int, rng, iters: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's algorithm from a k-means++ start; returns (centers, labels)."""
    x = as_cloud(points, 3)
    if k > len(x) or k < 1:
        raise ValueError(f"cannot form {k} clusters from {len(x)} points")
    gen = as_generator(rng)
    centers = kmeans_plusplus(x, k, gen)
    labels = None
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
    return centers, labels


@dataclass
class GmmModel:
    means: np.ndarray
    covariance: np.ndarray
    weights: np.ndarray
    log_likelihoods: list


def _tied_log_resp(x, means, cov, weights):
    chol = np.linalg.cholesky(cov)
    diff = x[:, None, :] - means[None, :, :]
    sol = np.linalg.solve(chol, diff.reshape(-1, 3).T).T.reshape(diff.shape)
    maha = np.sum(sol**2, axis=-1)
    log_det = 2.0 * np.sum(np.log(np.diag(chol)))
    with np.errstate(divide="ignore"):
        log_w = np.log(weights)
    log_p = log_w[None, :] - 0.5 * (maha + log_det + 3 * np.log(2 * np.pi))
    norm = logsumexp(log_p, axis=1, keepdims=True)
    return log_p - norm, float(norm.sum())


def fit_gmm(points, k: int, rng, max_iter: int = 200, tol: float = 1e-6) -> GmmModel:
    """EM for a K-component Gaussian mixture with one shared full covariance.

    Each M-step adds ``1e-6 * trace / 3`` to the covariance diagonal. Stops
    when the log-likelihood gain drops below ``tol``.
    """
    x = as_cloud(points, 3)
    if k > len(x):
        raise ValueError(f"K={k} exceeds the number of points ({len(x)})")
    gen = as_generator(rng)
    means = kmeans_plusplus(x, k, gen)
    cov = np.cov(x.T, bias=True) + 1e-6 * np.eye(3)
    cov += 1e-6 * np.trace(cov) / 3 * np.eye(3)
    weights = np.full(k, 1.0 / k)
    history = []
    for _ in range(max_iter):
        log_r, ll = _tied_log_resp(x, means, cov, weights)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] < tol:
            break
        r = np.exp(log_r)
        nk = r.sum(axis=0) + 10 * np.finfo(float).eps
        means = (r.T @ x) / nk[:, None]
        weights = nk / nk.sum()
        cov = (x.T @ x - (means.T * nk) @ means) / len(x)
        cov = 0.5 * (cov + cov.T)
        cov += 1e-6 * np.trace(cov) / 3 * np.eye(3)
    return GmmModel(means, cov, weights, history)


# -- synthetic datasets --------------------------------------------------------


def _sample_box(gen, n, lo, hi):
    return gen.uniform(lo, hi, size=(n, 3))


def _chair(gen, n):
    seat_h = gen.uniform(-0.1, 0.2)
    w, d = gen.uniform(0.6, 1.0), gen.uniform(0.6, 1.0)
    back_h = gen.uniform(0.6, 1.0)
    leg = 0.06
    parts = [
        ((-w / 2, seat_h - 0.06, -d / 2), (w / 2, seat_h, d / 2)),
        ((-w / 2, seat_h, d / 2 - 0.08), (w / 2, seat_h + back_h, d / 2)),
    ]
    for sx in (-1, 1):
        for sz in (-1, 1):
            cx, cz = sx * (w / 2 - leg), sz * (d / 2 - leg)
            parts.append(((cx - leg / 2, -0.8, cz - leg / 2), (cx + leg / 2, seat_h - 0.06, cz + leg / 2)))
    vols = np.array([np.prod(np.subtract(hi, lo)) for lo, hi in parts])
    counts = gen.multinomial(n, vols / vols.sum())
    return np.concatenate([_sample_box(gen, c, lo, hi) for c, (lo, hi) in zip(counts, parts)])


def _blobs(gen, n):
    k = gen.integers(2, 6)
    centers = gen.uniform(-1, 1, size=(k, 3))
    scales = gen.uniform(0.08, 0.3, size=(k, 3))
    weights = gen.dirichlet(np.full(k, 2.0))
    comp = gen.choice(k, size=n, p=weights)
    return centers[comp] + scales[comp] * gen.standard_normal((n, 3))


def _helix(gen, n):
    turns = gen.uniform(1.5, 4.0)
    radius = gen.uniform(0.3, 0.6)
    s = gen.uniform(0, 1, size=n)
    ang = 2 * np.pi * turns * s
    pts = np.stack([radius * np.cos(ang), radius * np.sin(ang), 2 * s - 1], axis=1)
    return pts + 0.03 * gen.standard_normal((n, 3))


def _lshape(gen, n):
    a, b = gen.uniform(0.5, 1.0), gen.uniform(0.5, 1.0)
    th = 0.15
    parts = [((0, 0, 0), (a, th, th)), ((0, 0, 0), (th, b, th))]
    if gen.uniform() < 0.5:
        parts.append(((0, 0, 0), (th, th, gen.uniform(0.5, 1.0))))
    vols = np.array([np.prod(np.subtract(hi, lo)) for lo, hi in parts])
    counts = gen.multinomial(n, vols / vols.sum())
    return np.concatenate([_sample_box(gen, c, lo, hi) for c, (lo, hi) in zip(counts, parts)])


GENERATORS = {"chairs": _chair, "blobs": _blobs, "helices": _helix, "lshapes": _lshape}


def synth_dataset(kind: str, count: int, n_points: int, rng) -> np.ndarray:
    """``(count, n_points, 3)`` synthetic clouds, each centered and scaled to [-1, 1]^3."""
    if kind not in GENERATORS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {sorted(GENERATORS)}")
    gen = as_generator(rng)
    make = GENERATORS[kind]
    return np.stack([center_and_scale(make(gen, n_points)) for _ in range(count)])


# -- observations --------------------------------------------------------------


@dataclass
class ObservationSpec:
    n_projections: int = 0
    points_per_projection: int = 0
    coarse_points: int | None = None
    subunit: int | None = None
    proper_rotations: bool = False


def simulate_observations(cloud, spec: ObservationSpec, rng) -> ObservationSet:
    """Sparse observations of ``cloud``: projections, a coarse cloud and a subunit.

    Projections are random subsamples under a random orthogonal transform
    with z dropped; the coarse cloud is the means of a tied-covariance GMM;
    the subunit is one random k-means cluster with ``k = round(N / subunit)``.
    """
    x = as_cloud(cloud, 3)
    n = len(x)
    src = rng if isinstance(rng, RandomSource) else RandomSource(int(rng))
    gen = src.generator()
    obs = ObservationSet()
    if spec.n_projections:
        if spec.points_per_projection > n or spec.points_per_projection < 1:
            raise ValueError(f"cannot draw {spec.points_per_projection} projection points from {n}")
        for _ in range(spec.n_projections):
            idx = np.sort(gen.choice(n, size=spec.points_per_projection, replace=False))
            rot = random_orthogonal(gen, proper=spec.proper_rotations)
            obs.append(Observation("projection", project(x[idx], rot), rot, upsample_seed=len(obs)))
    if spec.coarse_points:
        if spec.coarse_points > n:
            raise ValueError(f"cannot coarse-grain {n} points into {spec.coarse_points}")
        gmm = fit_gmm(x, spec.coarse_points, gen)
        obs.append(Observation("coarse", gmm.means, upsample_seed=len(obs)))
    if spec.subunit:
        if spec.subunit > n:
            raise ValueError(f"subunit of {spec.subunit} points exceeds cloud of {n}")
        k = max(1, int(round(n / spec.subunit)))
        _, labels = kmeans(x, k, gen)
        sizes = np.bincount(labels, minlength=k)
        choice = gen.choice(np.flatnonzero(sizes > 0))
        obs.append(Observation("subunit", x[labels == choice], upsample_seed=len(obs)))
    return obs
