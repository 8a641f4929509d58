"""Deformation fields

Time-varying deformation sources standing in for a deformation network:
analytic rigid fields with known ground truth and fields sampled from
stored trajectories. The canonical frame is t = 0.
"""
from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from ..general.general import (
    LOGGER,
    ConfigurationError,
    DimensionMismatchError,
    FormatError,
    SpeedeError,
    float32_grid,
)
from ..general.rotations import matrix_to_quaternion, quaternion_multiply, so3_exp
from .gaussian import GaussianCloud

TRAJ_MAGIC = b"TRAJ1"

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])

Members = Union[np.ndarray, list, Callable[[np.ndarray], np.ndarray]]


@dataclass
class Offsets:
    """Per Gaussian offsets (Δμ, Δr as composing quaternions, Δs in log space)."""

    means: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> Offsets:
        return cls(np.zeros((n, 3)), np.tile(IDENTITY_QUATERNION, (n, 1)), np.zeros((n, 3)))


class DeformationField:
    """DeformationField"""

    name: str = "field"

    def evaluate(self, cloud: GaussianCloud, t: float) -> Offsets:
        raise NotImplementedError

    def positions(self, cloud: GaussianCloud, t: float) -> np.ndarray:
        """Absolute deformed means at time t."""
        return cloud.means.astype(np.float64) + self.evaluate(cloud, t).means

    def nbytes(self) -> int:
        """Bytes needed to store the field parameters."""
        return 0

    def subset(self, kept: np.ndarray) -> DeformationField:
        """Field restricted to the Gaussians at kept (old indices)."""
        return self


class IdentityField(DeformationField):
    """Static scene."""

    name = "identity"

    def evaluate(self, cloud: GaussianCloud, t: float) -> Offsets:
        return Offsets.zeros(len(cloud))


@dataclass(frozen=True)
class RigidCurve:
    """x(t) = R(t)(x - pivot) + pivot + t·velocity with R(t) = exp(t·rate·axis)."""

    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    axis: tuple[float, float, float] = (0.0, 0.0, 1.0)
    rate: float = 0.0
    pivot: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def rotation(self, t: float) -> np.ndarray:
        axis = np.asarray(self.axis, dtype=np.float64)
        norm = np.linalg.norm(axis)
        if norm == 0.0 or self.rate == 0.0 or t == 0.0:
            return np.eye(3)
        return so3_exp(axis / norm * self.rate * t)

    def translation(self, t: float) -> np.ndarray:
        return t * np.asarray(self.velocity, dtype=np.float64)

    def displacement(self, points: np.ndarray, t: float) -> np.ndarray:
        """x(t) - x for canonical points."""
        rot = self.rotation(t)
        pivot = np.asarray(self.pivot, dtype=np.float64)
        return (points - pivot) @ (rot - np.eye(3)).T + self.translation(t)

    def to_json(self) -> dict:
        return {
            "velocity": list(self.velocity),
            "axis": list(self.axis),
            "rate": self.rate,
            "pivot": list(self.pivot),
        }


@dataclass
class AnalyticField(DeformationField):
    """Rigid curve per group of Gaussians; groups must partition the indices."""

    groups: list[tuple[Members, RigidCurve]] = field(default_factory=list)

    name = "analytic"

    def _masks(self, cloud: GaussianCloud) -> list[np.ndarray]:
        n = len(cloud)
        masks = []
        for members, _ in self.groups:
            if callable(members):
                mask = np.asarray(members(cloud.means), dtype=bool)
            else:
                arr = np.asarray(members)
                if arr.dtype == bool:
                    mask = arr
                else:
                    mask = np.zeros(n, dtype=bool)
                    if arr.size and (arr.min() < 0 or arr.max() >= n):
                        raise ConfigurationError(f"Group members out of range for {n} Gaussians")
                    mask[arr.astype(np.int64)] = True
            if mask.shape != (n,):
                raise ConfigurationError(f"Group mask has shape {mask.shape}, expected ({n},)")
            masks.append(mask)
        coverage = np.sum(masks, axis=0) if masks else np.zeros(n, dtype=np.int64)
        if n and not np.all(coverage == 1):
            bad = np.nonzero(coverage != 1)[0]
            raise ConfigurationError(
                f"Analytic field groups do not partition the Gaussians (index {bad[0]} "
                f"is covered {int(coverage[bad[0]])} times)"
            )
        return masks

    def evaluate(self, cloud: GaussianCloud, t: float) -> Offsets:
        offsets = Offsets.zeros(len(cloud))
        means = cloud.means.astype(np.float64)
        for mask, (_, curve) in zip(self._masks(cloud), self.groups):
            offsets.means[mask] = curve.displacement(means[mask], t)
            offsets.rotations[mask] = matrix_to_quaternion(curve.rotation(t))
        return offsets

    def nbytes(self) -> int:
        return len(self.groups) * 10 * 4

    def subset(self, kept: np.ndarray) -> AnalyticField:
        kept = np.asarray(kept, dtype=np.int64)
        groups = []
        for members, curve in self.groups:
            if callable(members):
                groups.append((members, curve))
                continue
            arr = np.asarray(members)
            mask = arr[kept] if arr.dtype == bool else np.isin(kept, arr)
            groups.append((mask, curve))
        return AnalyticField(groups)


@dataclass
class TrajectorySet:
    """Mean trajectories, positions N×F×3 at F ascending timesteps.

    Positions are held on the float32 grid of the TRAJ1 payload, so a
    saved and reloaded set is identical to the one in memory.
    """

    positions: np.ndarray
    timesteps: np.ndarray

    def __post_init__(self) -> None:
        self.positions = float32_grid(self.positions)
        self.timesteps = np.asarray(self.timesteps, dtype=np.float64).ravel()
        f = self.timesteps.size
        if self.positions.ndim != 3 or self.positions.shape[1:] != (f, 3):
            raise DimensionMismatchError(
                f"Trajectory positions {self.positions.shape} do not match {f} timesteps"
            )
        if f < 2:
            raise ConfigurationError("A trajectory set needs at least 2 timesteps")
        if not np.isfinite(self.timesteps).all() or np.any(np.diff(self.timesteps) <= 0):
            raise ConfigurationError("Trajectory timesteps must be finite and strictly increasing")
        if not np.isfinite(self.positions).all():
            raise ConfigurationError("Trajectory positions must be finite")

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def f(self) -> int:
        return self.timesteps.size

    def canonical(self) -> np.ndarray:
        return self.positions[:, 0, :]

    def subset(self, kept: np.ndarray) -> TrajectorySet:
        return TrajectorySet(self.positions[np.asarray(kept, dtype=np.int64)], self.timesteps)

    def equals(self, other: TrajectorySet) -> bool:
        return (
            self.positions.shape == other.positions.shape
            and self.positions.tobytes() == other.positions.tobytes()
            and self.timesteps.tobytes() == other.timesteps.tobytes()
        )


class SampledField(DeformationField):
    """Linear interpolation of stored trajectories, clamped outside their range."""

    name = "sampled"

    def __init__(self, trajectories: TrajectorySet) -> None:
        self.trajectories = trajectories

    def _check(self, cloud: GaussianCloud) -> None:
        if len(cloud) != self.trajectories.n:
            raise DimensionMismatchError(
                f"Sampled field holds {self.trajectories.n} trajectories, cloud has {len(cloud)} Gaussians"
            )

    def positions(self, cloud: GaussianCloud, t: float) -> np.ndarray:
        self._check(cloud)
        ts = self.trajectories.timesteps
        pos = self.trajectories.positions
        if t <= ts[0]:
            return pos[:, 0, :].copy()
        if t >= ts[-1]:
            return pos[:, -1, :].copy()
        k = int(np.searchsorted(ts, t, side="right")) - 1
        if ts[k] == t:
            return pos[:, k, :].copy()
        u = (t - ts[k]) / (ts[k + 1] - ts[k])
        return (1.0 - u) * pos[:, k, :] + u * pos[:, k + 1, :]

    def evaluate(self, cloud: GaussianCloud, t: float) -> Offsets:
        offsets = Offsets.zeros(len(cloud))
        offsets.means = self.positions(cloud, t) - cloud.means.astype(np.float64)
        return offsets

    def nbytes(self) -> int:
        return len(trajectory_bytes(self.trajectories))

    def subset(self, kept: np.ndarray) -> SampledField:
        return SampledField(self.trajectories.subset(kept))


def analytic_field(spec: list[tuple[Members, RigidCurve]]) -> AnalyticField:
    return AnalyticField(list(spec))


def sampled_field(trajectories: TrajectorySet) -> SampledField:
    return SampledField(trajectories)


def deform(cloud: GaussianCloud, deformation: DeformationField, t: float) -> GaussianCloud:
    """Deformed frame of the canonical cloud at time t."""
    offsets = deformation.evaluate(cloud, t)
    means = deformation.positions(cloud, t)
    rotations = cloud.rotations
    if np.any(offsets.rotations != IDENTITY_QUATERNION):
        rotations = quaternion_multiply(offsets.rotations, rotations.astype(np.float64))
    scales = cloud.scales
    if np.any(offsets.scales != 0.0):
        scales = scales.astype(np.float64) + offsets.scales
    return GaussianCloud(
        means, scales.astype(np.float64), rotations.astype(np.float64),
        cloud.sh_colors.astype(np.float64), cloud.opacities.astype(np.float64),
    )


def sample_trajectories(
    deformation: DeformationField, cloud: GaussianCloud, timesteps: np.ndarray
) -> TrajectorySet:
    timesteps = np.asarray(timesteps, dtype=np.float64).ravel()
    positions = np.empty((len(cloud), timesteps.size, 3))
    for k, t in enumerate(timesteps):
        positions[:, k, :] = deformation.positions(cloud, float(t))
    LOGGER.debug(f"Sampled {len(cloud)} trajectories at {timesteps.size} timesteps")
    return TrajectorySet(positions, timesteps)


def trajectory_bytes(trajectories: TrajectorySet) -> bytes:
    buf = io.BytesIO()
    buf.write(TRAJ_MAGIC)
    buf.write(struct.pack("<QQ", trajectories.n, trajectories.f))
    buf.write(trajectories.timesteps.astype("<f8").tobytes())
    buf.write(trajectories.positions.astype("<f4").tobytes())
    return buf.getvalue()


def save_trajectories(trajectories: TrajectorySet, path: str) -> None:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(trajectory_bytes(trajectories))
    except OSError as e:
        raise SpeedeError(f'Could not write trajectories "{path}": {e}') from e


def parse_trajectories(payload: bytes, source: str = "<bytes>") -> TrajectorySet:
    head = len(TRAJ_MAGIC) + 16
    if payload[: len(TRAJ_MAGIC)] != TRAJ_MAGIC or len(payload) < head:
        raise FormatError(f'"{source}" is not a TRAJ1 file')
    n, f = struct.unpack_from("<QQ", payload, len(TRAJ_MAGIC))
    expected = head + 8 * f + 4 * n * f * 3
    if len(payload) != expected:
        raise FormatError(f'"{source}": expected {expected} bytes, found {len(payload)}')
    timesteps = np.frombuffer(payload, dtype="<f8", count=f, offset=head)
    positions = np.frombuffer(payload, dtype="<f4", count=n * f * 3, offset=head + 8 * f)
    return TrajectorySet(positions.reshape(n, f, 3).astype(np.float64), timesteps.astype(np.float64))


def load_trajectories(path: str) -> TrajectorySet:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise SpeedeError(f'Could not read trajectories "{path}": {e}') from e
    return parse_trajectories(payload, path)
