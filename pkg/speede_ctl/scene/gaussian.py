"""Canonical Gaussian cloud, training views and PLY persistence"""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, fields
from typing import Any

import numpy as np
from plyfile import PlyData, PlyElement, PlyHeaderParseError

from ..general.general import (
    LOGGER,
    CloudValidationError,
    ConfigurationError,
    PlyFormatError,
    SpeedeError,
    TypeJSON,
    read_json,
    write_json,
)
from ..general.rotations import normalize_quaternions

# Zero order spherical harmonic constant.
SH_C0 = 0.28209479177387814

QUATERNION_TOLERANCE = 1e-6

REQUIRED_PROPERTIES = (
    ["x", "y", "z"]
    + [f"f_dc_{i}" for i in range(3)]
    + ["opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def inverse_sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.log(x / (1.0 - x))


def _frozen(a: Any, dtype: Any, shape: tuple[int, ...]) -> np.ndarray:
    arr = np.array(a, dtype=dtype).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GaussianCloud:
    """Structure of arrays holding N Gaussians.

    Scales are log-space and opacities logit-space, as stored by 3DGS
    checkpoints; quaternions are w-first. Arrays are read-only, changes go
    through ``replace`` or ``subset``.
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    sh_colors: np.ndarray
    opacities: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.means)
        n = means.shape[0] if means.ndim else 0
        dtype = means.dtype if means.dtype.kind == "f" else np.float32
        sh = np.asarray(self.sh_colors)
        k = sh.shape[1] if sh.ndim == 3 else 1
        try:
            object.__setattr__(self, "means", _frozen(self.means, dtype, (n, 3)))
            object.__setattr__(self, "scales", _frozen(self.scales, dtype, (n, 3)))
            object.__setattr__(self, "rotations", _frozen(self.rotations, dtype, (n, 4)))
            object.__setattr__(self, "sh_colors", _frozen(self.sh_colors, dtype, (n, k, 3)))
            object.__setattr__(self, "opacities", _frozen(self.opacities, dtype, (n,)))
        except ValueError as e:
            raise CloudValidationError(f"Inconsistent Gaussian array shapes: {e}") from e

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def sh_degree(self) -> int:
        return int(round(math.sqrt(self.sh_colors.shape[1]))) - 1

    @classmethod
    def empty(cls, sh_degree: int = 0) -> GaussianCloud:
        k = (sh_degree + 1) ** 2
        return cls(
            np.zeros((0, 3), np.float32),
            np.zeros((0, 3), np.float32),
            np.zeros((0, 4), np.float32),
            np.zeros((0, k, 3), np.float32),
            np.zeros((0,), np.float32),
        )

    @classmethod
    def from_rgb(
        cls,
        means: np.ndarray,
        scales: np.ndarray,
        rotations: np.ndarray,
        rgb: np.ndarray,
        alpha: np.ndarray,
        dtype: Any = np.float32,
    ) -> GaussianCloud:
        """Build a degree 0 cloud from activated values (linear scales, rgb, alpha)."""
        rgb = np.asarray(rgb, dtype=np.float64)
        alpha = np.clip(np.asarray(alpha, dtype=np.float64), 1e-6, 1 - 1e-6)
        return cls(
            np.asarray(means, dtype=dtype),
            np.log(np.asarray(scales, dtype=np.float64)).astype(dtype),
            normalize_quaternions(rotations).astype(dtype),
            ((rgb - 0.5) / SH_C0).astype(dtype)[:, None, :],
            inverse_sigmoid(alpha).astype(dtype),
        )

    def activated_scales(self) -> np.ndarray:
        return np.exp(self.scales.astype(np.float64))

    def activated_opacities(self) -> np.ndarray:
        return sigmoid(self.opacities)

    def dc_colors(self) -> np.ndarray:
        return np.maximum(SH_C0 * self.sh_colors[:, 0, :].astype(np.float64) + 0.5, 0.0)

    def replace(self, **arrays: np.ndarray) -> GaussianCloud:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(arrays)
        return GaussianCloud(**values)

    def subset(self, indices: np.ndarray) -> GaussianCloud:
        """Copy holding the Gaussians at indices (bit-exact parameters)."""
        idx = np.asarray(indices, dtype=np.int64)
        return GaussianCloud(
            self.means[idx],
            self.scales[idx],
            self.rotations[idx],
            self.sh_colors[idx],
            self.opacities[idx],
        )

    def equals(self, other: GaussianCloud) -> bool:
        """Bit equality of all arrays."""
        return all(
            getattr(self, f.name).shape == getattr(other, f.name).shape
            and getattr(self, f.name).tobytes() == getattr(other, f.name).tobytes()
            for f in fields(self)
        )


@dataclass(frozen=True)
class ValidationIssue:
    index: int
    kind: str
    reason: str


@dataclass
class ValidationReport:
    issues: list[ValidationIssue] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.issues

    def indices(self) -> list[int]:
        return sorted({issue.index for issue in self.issues})

    def raise_if_invalid(self) -> None:
        if self.issues:
            first = self.issues[0]
            raise CloudValidationError(
                f"Gaussian {first.index}: {first.reason} "
                f"({len(self.issues)} issue(s) in total)",
                self.indices(),
            )

    def to_json(self) -> TypeJSON:
        return {
            "ok": self.ok,
            "issues": [
                {"index": i.index, "kind": i.kind, "reason": i.reason}
                for i in self.issues
            ],
        }


def validate(cloud: GaussianCloud) -> ValidationReport:
    """List invariant violations; never raises."""
    report = ValidationReport()
    n = len(cloud)
    with np.errstate(all="ignore"):
        finite = np.ones(n, dtype=bool)
        for name in ("means", "scales", "rotations", "sh_colors", "opacities"):
            arr = np.asarray(getattr(cloud, name), dtype=np.float64).reshape(n, -1)
            bad = ~np.isfinite(arr).all(axis=1)
            for i in np.nonzero(bad)[0]:
                report.issues.append(
                    ValidationIssue(int(i), "non-finite", f"non-finite value in {name}")
                )
            finite &= ~bad
        scales = np.exp(np.asarray(cloud.scales, dtype=np.float64))
        for i in np.nonzero(finite & ~(scales > 0).all(axis=1))[0]:
            report.issues.append(
                ValidationIssue(int(i), "non-positive scale", "exponentiated scale is not positive")
            )
        norms = np.linalg.norm(np.asarray(cloud.rotations, dtype=np.float64), axis=1)
        for i in np.nonzero(finite & (norms == 0))[0]:
            report.issues.append(
                ValidationIssue(int(i), "zero-norm quaternion", "zero-norm quaternion")
            )
    report.issues.sort(key=lambda issue: issue.index)
    return report


def _ply_attribute_names(sh_rest: int) -> list[str]:
    names = ["x", "y", "z", "nx", "ny", "nz"] + [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(sh_rest)]
    names += ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)]
    return names


def _ply_data(cloud: GaussianCloud) -> PlyData:
    n = len(cloud)
    sh = np.asarray(cloud.sh_colors, dtype=np.float32)
    f_dc = sh[:, 0, :]
    # f_rest is stored channel-major, as 3DGS does.
    f_rest = np.ascontiguousarray(sh[:, 1:, :].transpose(0, 2, 1)).reshape(n, -1)
    attributes = np.concatenate(
        (
            np.asarray(cloud.means, dtype=np.float32),
            np.zeros((n, 3), dtype=np.float32),
            f_dc,
            f_rest,
            np.asarray(cloud.opacities, dtype=np.float32)[:, None],
            np.asarray(cloud.scales, dtype=np.float32),
            np.asarray(cloud.rotations, dtype=np.float32),
        ),
        axis=1,
    )
    dtype_full = [(name, "<f4") for name in _ply_attribute_names(f_rest.shape[1])]
    elements = np.empty(n, dtype=dtype_full)
    for col, (name, _) in enumerate(dtype_full):
        elements[name] = attributes[:, col]
    return PlyData([PlyElement.describe(elements, "vertex")], byte_order="<")


def ply_bytes(cloud: GaussianCloud) -> bytes:
    """Serialized binary little-endian PLY payload."""
    buf = io.BytesIO()
    _ply_data(cloud).write(buf)
    return buf.getvalue()


def save_ply(cloud: GaussianCloud, path: str) -> None:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(ply_bytes(cloud))
    except OSError as e:
        raise SpeedeError(f'Could not write PLY "{path}": {e}') from e
    LOGGER.debug(f"Saved {len(cloud)} Gaussians to {path}")


def load_ply(path: str) -> GaussianCloud:
    try:
        with open(path, "rb") as f:
            plydata = PlyData.read(f)
    except PlyHeaderParseError as e:
        raise PlyFormatError(f'"{path}" line {e.line}: {e.message}') from e
    except OSError as e:
        raise SpeedeError(f'Could not read PLY "{path}": {e}') from e
    except (ValueError, IndexError) as e:
        raise PlyFormatError(f'"{path}": {e}') from e

    if "vertex" not in [el.name for el in plydata.elements]:
        raise PlyFormatError(f'"{path}": missing required element "vertex"')
    vertex = plydata["vertex"]
    names = [p.name for p in vertex.properties]
    for name in REQUIRED_PROPERTIES:
        if name not in names:
            raise PlyFormatError(f'"{path}": missing required property "{name}"')

    def column(name: str) -> np.ndarray:
        return np.asarray(vertex[name], dtype=np.float32)

    n = vertex.count
    means = np.stack([column(c) for c in ("x", "y", "z")], axis=1).reshape(n, 3)
    f_dc = np.stack([column(f"f_dc_{i}") for i in range(3)], axis=1).reshape(n, 1, 3)
    rest_names = sorted(
        (p for p in names if p.startswith("f_rest_")), key=lambda p: int(p.split("_")[-1])
    )
    if len(rest_names) % 3:
        raise PlyFormatError(f'"{path}": f_rest_* count {len(rest_names)} is not a multiple of 3')
    bands = len(rest_names) // 3
    if rest_names:
        f_rest = np.stack([column(p) for p in rest_names], axis=1)
        f_rest = f_rest.reshape(n, 3, bands).transpose(0, 2, 1)
        sh = np.concatenate([f_dc, f_rest], axis=1)
    else:
        sh = f_dc
    if round(math.sqrt(bands + 1)) ** 2 != bands + 1:
        raise PlyFormatError(f'"{path}": {len(rest_names)} f_rest_* values do not form an SH degree')
    scales = np.stack([column(f"scale_{i}") for i in range(3)], axis=1).reshape(n, 3)
    rotations = np.stack([column(f"rot_{i}") for i in range(4)], axis=1).reshape(n, 4)
    opacities = column("opacity").reshape(n)

    cloud = GaussianCloud(means, scales, rotations, sh, opacities)
    report = validate(cloud)
    non_finite = [i for i in report.issues if i.kind == "non-finite"]
    if non_finite:
        raise CloudValidationError(
            f'"{path}": Gaussian {non_finite[0].index}: {non_finite[0].reason}',
            [i.index for i in non_finite],
        )

    norms = np.linalg.norm(rotations.astype(np.float64), axis=1)
    off = (norms > 0) & (np.abs(norms - 1.0) > QUATERNION_TOLERANCE)
    if off.any():
        rotations = rotations.copy()
        rotations[off] = normalize_quaternions(rotations[off]).astype(np.float32)
        cloud = cloud.replace(rotations=rotations)
    LOGGER.debug(f"Loaded {n} Gaussians (SH degree {cloud.sh_degree}) from {path}")
    return cloud


@dataclass(frozen=True)
class TrainingView:
    """Camera pose (world to camera), pinhole intrinsics and a timestamp."""

    rotation: np.ndarray
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    timestamp: float
    image_path: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", _frozen(self.rotation, np.float64, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, np.float64, (3,)))
        for name in ("fx", "fy", "cx", "cy", "timestamp"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        problems = self.check()
        if problems:
            raise ConfigurationError("Invalid training view: " + "; ".join(problems))

    def check(self) -> list[str]:
        problems = []
        r = self.rotation
        if not np.isfinite(r).all() or not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            problems.append("rotation is not orthonormal")
        if self.width <= 0 or self.height <= 0:
            problems.append("image size must be positive")
        if not math.isfinite(self.timestamp):
            problems.append("timestamp is not finite")
        return problems

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def with_pose(self, rotation: np.ndarray, translation: np.ndarray) -> TrainingView:
        return TrainingView(
            rotation, translation, self.fx, self.fy, self.cx, self.cy,
            self.width, self.height, self.timestamp, self.image_path,
        )

    def with_timestamp(self, timestamp: float) -> TrainingView:
        return TrainingView(
            self.rotation, self.translation, self.fx, self.fy, self.cx, self.cy,
            self.width, self.height, timestamp, self.image_path,
        )

    def to_json(self) -> TypeJSON:
        return {
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "timestamp": self.timestamp,
            "image_path": self.image_path,
        }

    @classmethod
    def from_json(cls, data: TypeJSON) -> TrainingView:
        try:
            return cls(
                np.asarray(data["rotation"], dtype=np.float64),
                np.asarray(data["translation"], dtype=np.float64),
                data["fx"], data["fy"], data["cx"], data["cy"],
                data["width"], data["height"], data["timestamp"],
                data.get("image_path", ""),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigurationError(f"Invalid camera record: {e}") from e


def look_at(
    eye: np.ndarray,
    target: np.ndarray,
    up: np.ndarray,
    width: int,
    height: int,
    fov_deg: float,
    timestamp: float,
    image_path: str = "",
) -> TrainingView:
    """View at eye looking at target (+z forward, y down in camera space)."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward])
    focal = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return TrainingView(
        rotation, -rotation @ eye, focal, focal, width / 2.0, height / 2.0,
        width, height, timestamp, image_path,
    )


def load_cameras(path: str) -> list[TrainingView]:
    data = read_json(path)
    if not isinstance(data, list):
        raise ConfigurationError(f'"{path}": expected a JSON array of cameras')
    base = os.path.dirname(os.path.abspath(path))
    views = []
    for record in data:
        view = TrainingView.from_json(record)
        if view.image_path and not os.path.isabs(view.image_path):
            view = TrainingView(
                view.rotation, view.translation, view.fx, view.fy, view.cx, view.cy,
                view.width, view.height, view.timestamp,
                os.path.join(base, view.image_path),
            )
        views.append(view)
    return views


def save_cameras(views: list[TrainingView], path: str) -> None:
    write_json(path, [v.to_json() for v in views])
