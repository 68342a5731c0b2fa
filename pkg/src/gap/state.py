"""State, trajectory, and ensemble containers plus climatological statistics.

All downstream modules exchange data through these types.  Arrays inside the
containers are float64 and frozen (read-only views) after construction.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

STD_FLOOR = 1e-8  # smallest allowed per-coordinate std (constant coordinates)


def _frozen_array(values, shape_hint=None) -> np.ndarray:
    a = np.array(values, dtype=np.float64, copy=True)
    if shape_hint is not None and a.ndim != shape_hint:
        raise ValueError(f"expected {shape_hint}-d array, got {a.ndim}-d")
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class StateVector:
    """A single system state x in R^d (system units unless noted otherwise)."""

    values: np.ndarray

    def __post_init__(self):
        v = _frozen_array(self.values, 1)
        if v.size == 0:
            raise ValueError("empty state vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("state vector contains non-finite entries")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __len__(self) -> int:
        return self.dim


@dataclass(frozen=True)
class Trajectory:
    """Uniformly spaced sequence of states; row k is the state at t0 + k*dt."""

    values: np.ndarray  # (n_states, dim)
    dt: float
    t0: float = 0.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 1:
            v = v.reshape(0, 1) if v.size == 0 else v.reshape(1, -1)
        if v.ndim != 2:
            raise ValueError("trajectory values must be (n_states, dim)")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_states(cls, states: list[StateVector], dt: float, t0: float = 0.0) -> "Trajectory":
        if len(states) == 0:
            return cls(np.zeros((0, 1)), dt, t0)
        dims = {s.dim for s in states}
        if len(dims) != 1:
            raise ValueError("states must share dim")
        return cls(np.stack([s.values for s in states]), dt, t0)

    @property
    def states(self) -> list[StateVector]:
        return [StateVector(row) for row in self.values]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, k: int) -> StateVector:
        return StateVector(self.values[k])

    def time(self, k: int) -> float:
        return self.t0 + k * self.dt


@dataclass(frozen=True)
class Ensemble:
    """A collection of M equally weighted members with their RNG stream seeds."""

    members: tuple
    member_seeds: tuple

    def __post_init__(self):
        members = tuple(self.members)
        seeds = tuple(int(s) for s in self.member_seeds)
        if len(members) < 1:
            raise ValueError("ensemble needs at least one member")
        if len(members) != len(seeds):
            raise ValueError("one seed per member required")
        if len(set(seeds)) != len(seeds):
            raise ValueError("member seeds must be unique")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise ValueError("members must share dim")
        object.__setattr__(self, "members", members)
        object.__setattr__(self, "member_seeds", seeds)

    @classmethod
    def from_array(cls, arr: np.ndarray, seeds) -> "Ensemble":
        return cls(tuple(StateVector(row) for row in np.atleast_2d(arr)), tuple(seeds))

    def as_array(self) -> np.ndarray:
        return np.stack([m.values for m in self.members])

    @property
    def size(self) -> int:
        return len(self.members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def mean(self) -> np.ndarray:
        return self.as_array().mean(axis=0)

    def std(self) -> np.ndarray:
        # population convention, consistent with fit_climatology
        return self.as_array().std(axis=0)


@dataclass(frozen=True)
class Climatology:
    """Per-coordinate long-run statistics with an optional phase-of-cycle table.

    std is floored at STD_FLOOR; floored coordinates are flagged in
    floored_mask.  per_phase_mean has shape (cycle_len, dim) when present and
    phase is indexed by step index modulo cycle_len.
    """

    mean: np.ndarray
    std: np.ndarray
    sample_count: int
    per_phase_mean: np.ndarray | None = None
    cycle_len: int | None = None
    floored_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        mean = _frozen_array(self.mean, 1)
        std = np.array(self.std, dtype=np.float64, copy=True)
        if std.shape != mean.shape:
            raise ValueError("mean/std shape mismatch")
        mask = std < STD_FLOOR
        std = np.maximum(std, STD_FLOOR)
        std.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if self.floored_mask is None:
            object.__setattr__(self, "floored_mask", mask)
        else:
            object.__setattr__(self, "floored_mask", np.array(self.floored_mask, dtype=bool))
        if self.per_phase_mean is not None:
            pm = _frozen_array(self.per_phase_mean, 2)
            if self.cycle_len is None or pm.shape != (self.cycle_len, mean.shape[0]):
                raise ValueError("per_phase_mean must be (cycle_len, dim)")
            object.__setattr__(self, "per_phase_mean", pm)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def phase_mean(self, phase: int) -> np.ndarray:
        if self.per_phase_mean is None:
            raise ValueError("climatology has no phase table")
        return self.per_phase_mean[phase % self.cycle_len]


def identity_climatology(dim: int) -> Climatology:
    """Mean-0, std-1 climatology; normalization becomes the identity map."""
    return Climatology(mean=np.zeros(dim), std=np.ones(dim), sample_count=0)


def fit_climatology(data: Trajectory, cycle_len: int | None = None) -> Climatology:
    """Per-coordinate mean/std (population convention) of a trajectory.

    With cycle_len given, a per-phase mean table is fitted as well; the
    trajectory length must then be a whole number of cycles.
    """
    n = len(data)
    if n < 2:
        raise ValueError("need at least 2 states to fit a climatology")
    v = data.values
    mean = v.mean(axis=0)
    std = v.std(axis=0)  # 1/n convention
    per_phase = None
    if cycle_len is not None:
        if cycle_len < 1 or n % cycle_len != 0:
            raise ValueError("cycle_len must divide the trajectory length")
        per_phase = v.reshape(n // cycle_len, cycle_len, v.shape[1]).mean(axis=0)
    return Climatology(mean=mean, std=std, sample_count=n,
                       per_phase_mean=per_phase, cycle_len=cycle_len)


def normalize(x: StateVector, c: Climatology) -> StateVector:
    """(x - mean) / std per coordinate."""
    if x.dim != c.dim:
        raise ValueError("dim mismatch")
    return StateVector((x.values - c.mean) / c.std)


def denormalize(x: StateVector, c: Climatology) -> StateVector:
    if x.dim != c.dim:
        raise ValueError("dim mismatch")
    return StateVector(x.values * c.std + c.mean)


def normalize_array(arr: np.ndarray, c: Climatology) -> np.ndarray:
    return (arr - c.mean) / c.std


def denormalize_array(arr: np.ndarray, c: Climatology) -> np.ndarray:
    return arr * c.std + c.mean


def anomaly(x: StateVector, c: Climatology, phase: int | None = None) -> StateVector:
    """Departure from the global mean, or from the phase mean when given."""
    if x.dim != c.dim:
        raise ValueError("dim mismatch")
    base = c.mean if phase is None else c.phase_mean(phase)
    return StateVector(x.values - base)
