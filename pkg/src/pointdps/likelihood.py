"""Forward-model energies for projections, coarse-grained and subunit data.

Each energy is a minimum over (partial) permutations of a squared Frobenius
residual. The minimizing assignment is found exactly with
:func:`~pointdps.assignment.solve_lap` and gradients are taken with that
assignment held fixed, which is the true gradient wherever the optimum is
unique.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assignment import Assignment, Upsampler, apply_upsampler, make_upsampler, solve_lap
from .core import RandomSource, as_cloud, is_rotation

KINDS = ("projection", "coarse", "subunit")


class ObservationError(ValueError):
    pass


@dataclass
class Observation:
    kind: str
    points: np.ndarray
    rotation: np.ndarray | None = None
    weight: float | None = None
    upsample_seed: int = 0
    _upsamplers: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObservationError(f"unknown observation kind {self.kind!r}")
        if self.kind == "projection":
            self.points = as_cloud(self.points, 2)
            if self.rotation is None:
                raise ObservationError("projection observation needs a rotation")
            self.rotation = np.asarray(self.rotation, dtype=np.float64)
            if not is_rotation(self.rotation, atol=1e-6):
                raise ObservationError("projection rotation is not orthogonal")
        else:
            self.points = as_cloud(self.points, 3)
            if self.rotation is not None:
                raise ObservationError(f"{self.kind} observation takes no rotation")
        if self.weight is not None and self.weight < 0:
            raise ObservationError("observation weight must be nonnegative")

    def __len__(self) -> int:
        return len(self.points)

    def upsampler(self, n: int) -> Upsampler:
        """The frozen ``U`` for a reconstruction with ``n`` points."""
        if n not in self._upsamplers:
            src = RandomSource(self.upsample_seed, stream=n)
            self._upsamplers[n] = make_upsampler(len(self.points), n, src)
        return self._upsamplers[n]

    def set_upsampler(self, upsampler: Upsampler) -> None:
        if upsampler.n_source != len(self.points):
            raise ObservationError("upsampler source size does not match the observation")
        self._upsamplers[len(upsampler)] = upsampler


@dataclass
class EnergyResult:
    energy: float
    assignment: Assignment
    gradient: np.ndarray


def _sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def _match_energy(target: np.ndarray, model: np.ndarray) -> tuple[float, Assignment, np.ndarray]:
    """min_P ||P target - model||^2 with rows of ``target`` matched to ``model``.

    Returns the energy, the assignment and ``dE/dmodel``.
    """
    asg = solve_lap(_sq_dist(target, model))
    grad = np.zeros_like(model)
    resid = model[asg.mapping] - target
    grad[asg.mapping] = 2.0 * resid
    return float(np.sum(resid * resid)), asg, grad


def projection_energy(x, obs: Observation) -> EnergyResult:
    x = as_cloud(x, 3)
    if obs.kind != "projection":
        raise ObservationError(f"expected a projection observation, got {obs.kind}")
    rot2 = obs.rotation[:, :2]
    y_up = apply_upsampler(obs.upsampler(len(x)), obs.points)
    energy, asg, grad_proj = _match_energy(y_up, x @ rot2)
    return EnergyResult(energy, asg, grad_proj @ rot2.T)


def coarse_energy(x, obs: Observation) -> EnergyResult:
    x = as_cloud(x, 3)
    if obs.kind != "coarse":
        raise ObservationError(f"expected a coarse observation, got {obs.kind}")
    y_up = apply_upsampler(obs.upsampler(len(x)), obs.points)
    return EnergyResult(*_match_energy(y_up, x))


def subunit_energy(x, obs: Observation) -> EnergyResult:
    x = as_cloud(x, 3)
    if obs.kind != "subunit":
        raise ObservationError(f"expected a subunit observation, got {obs.kind}")
    if len(obs) > len(x):
        raise ObservationError(f"subunit has {len(obs)} points but the cloud only {len(x)}")
    return EnergyResult(*_match_energy(obs.points, x))


ENERGIES = {
    "projection": projection_energy,
    "coarse": coarse_energy,
    "subunit": subunit_energy,
}


def energy(x, obs: Observation) -> EnergyResult:
    return ENERGIES[obs.kind](x, obs)


class ObservationSet:
    """Heterogeneous observations of one object with their energy weights.

    Observations without an explicit weight get ``1 / len(self)``.
    """

    def __init__(self, observations=()):
        self.observations: list[Observation] = list(observations)

    def __len__(self) -> int:
        return len(self.observations)

    def __iter__(self):
        return iter(self.observations)

    def __getitem__(self, i) -> Observation:
        return self.observations[i]

    def append(self, obs: Observation) -> None:
        self.observations.append(obs)

    def weights(self) -> np.ndarray:
        n = len(self.observations)
        return np.array([1.0 / n if o.weight is None else o.weight for o in self.observations])

    def check_compatible(self, n_points: int) -> None:
        for i, obs in enumerate(self.observations):
            if obs.kind == "subunit" and len(obs) > n_points:
                raise ObservationError(
                    f"observation {i}: subunit of {len(obs)} points does not fit "
                    f"a {n_points}-point reconstruction"
                )

    def to_json(self) -> dict:
        out = []
        for obs in self.observations:
            entry = {"kind": obs.kind, "points": obs.points.tolist()}
            if obs.rotation is not None:
                entry["rotation"] = obs.rotation.tolist()
            entry["weight"] = obs.weight
            entry["upsample_seed"] = obs.upsample_seed
            out.append(entry)
        return {"observations": out}

    @classmethod
    def from_json(cls, data: dict) -> "ObservationSet":
        if "observations" not in data:
            raise ObservationError("observation file has no 'observations' list")
        obs = []
        for i, entry in enumerate(data["observations"]):
            seed = entry.get("upsample_seed")
            obs.append(
                Observation(
                    kind=entry["kind"],
                    points=np.asarray(entry["points"], dtype=np.float64),
                    rotation=entry.get("rotation"),
                    weight=entry.get("weight"),
                    upsample_seed=i if seed is None else int(seed),
                )
            )
        return cls(obs)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ObservationSet":
        return cls.from_json(json.loads(Path(path).read_text()))


def combined_energy(x, obs_set: ObservationSet) -> tuple[float, np.ndarray]:
    """Weighted sum of energies and its gradient with respect to ``x``."""
    x = as_cloud(x, 3)
    total = 0.0
    grad = np.zeros_like(x)
    for w, obs in zip(obs_set.weights(), obs_set):
        res = energy(x, obs)
        total += w * res.energy
        grad += w * res.gradient
    return total, grad
