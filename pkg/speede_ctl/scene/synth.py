"""Synthetic dynamic scenes with known groups, motions and ground truth views"""
from __future__ import annotations

import asyncio
import math
import os
from dataclasses import dataclass, field

import numpy as np

from ..general.config import Config
from ..general.general import (
    LOGGER,
    ConfigurationError,
    SpeedeError,
    TypeJSON,
    async_write_files,
    dump_json,
    read_json,
)
from ..general.images import png_bytes, read_png
from ..general.rotations import random_axes, so3_exp
from .deformation import (
    AnalyticField,
    DeformationField,
    IdentityField,
    RigidCurve,
    SampledField,
    TrajectorySet,
    deform,
    load_trajectories,
    sample_trajectories,
    trajectory_bytes,
)
from .gaussian import GaussianCloud, TrainingView, load_cameras, load_ply, look_at, ply_bytes
from .render import Image, render

JITTER_SEED_OFFSET = 1

BUNDLE_FILES = {
    "cloud": "cloud.ply",
    "cameras": "cameras.json",
    "test_cameras": "test_cameras.json",
    "trajectories": "trajectories.traj",
    "labels": "labels.json",
    "scene": "scene.json",
}


class SceneSpec(Config):
    """Synthetic scene description."""

    def __init__(self, **kwargs) -> None:
        self.n_gaussians: int = 2000
        self.n_clusters: int = 5
        # Optional per cluster {velocity, axis, rate}; random motions when empty.
        self.motion: list[dict] = []
        self.n_frames: int = 40
        self.n_views: int = 40
        self.n_test_views: int = 8
        self.width: int = 64
        self.height: int = 64
        self.noise: float = 0.0
        self.pose_jitter_rot: float = 0.0
        self.pose_jitter_trans: float = 0.0
        self.cluster_radius: float = 0.3
        self.spacing: float = 8.0
        self.splat_scale: float = 0.04
        self.max_speed: float = 0.5
        self.max_rate: float = 1.0
        self.camera_radius: float = 0.0
        self.fov_deg: float = 50.0
        self.background: list[float] = [0.0, 0.0, 0.0]
        self.seed: int = 0
        super().__init__(**kwargs)

    def check(self) -> None:
        counts = ("n_gaussians", "n_clusters", "n_views", "width", "height")
        for name in counts:
            if int(getattr(self, name)) <= 0:
                raise ConfigurationError(f"Scene {name} must be positive, got {getattr(self, name)}")
        if self.n_frames < 2:
            raise ConfigurationError("A scene needs at least 2 frames")
        if self.n_clusters > self.n_gaussians:
            raise ConfigurationError("More clusters than Gaussians")
        if self.n_test_views < 0:
            raise ConfigurationError("n_test_views must be >= 0")
        for name in ("noise", "pose_jitter_rot", "pose_jitter_trans", "max_speed", "max_rate"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"Scene {name} must be >= 0")
        if self.cluster_radius <= 0 or self.splat_scale <= 0:
            raise ConfigurationError("cluster_radius and splat_scale must be positive")
        if self.spacing < 6.0:
            LOGGER.warning(f"Cluster spacing {self.spacing} radii is below 6, groups may overlap")
        if self.motion and len(self.motion) != self.n_clusters:
            raise ConfigurationError(
                f"{len(self.motion)} motion entries for {self.n_clusters} clusters"
            )
        if len(self.background) != 3:
            raise ConfigurationError("background must have 3 components")


@dataclass
class SyntheticScene:
    cloud: GaussianCloud
    deformation: DeformationField
    trajectories: TrajectorySet
    views: list[TrainingView]
    labels: np.ndarray
    images: list[Image]
    test_views: list[TrainingView] = field(default_factory=list)
    test_images: list[Image] = field(default_factory=list)
    nominal_views: list[TrainingView] = field(default_factory=list)
    curves: list[RigidCurve] = field(default_factory=list)
    spec: TypeJSON = field(default_factory=dict)

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.spec.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)


def cluster_centers(n_clusters: int, distance: float) -> np.ndarray:
    """Grid layout centred at the origin with the given neighbour distance."""
    side = math.ceil(n_clusters ** (1.0 / 3.0))
    while side**3 < n_clusters:
        side += 1
    cells = np.array(np.meshgrid(*(np.arange(side),) * 3, indexing="ij")).reshape(3, -1).T
    cells = cells[np.lexsort((cells[:, 0], cells[:, 1], cells[:, 2]))][:n_clusters]
    centers = cells.astype(np.float64) * distance
    return centers - centers.mean(axis=0)


def _blob(rng: np.random.Generator, n: int, radius: float) -> np.ndarray:
    """Isotropic Gaussian blob truncated at radius."""
    points = rng.normal(scale=radius / 2.0, size=(n, 3))
    norm = np.linalg.norm(points, axis=1, keepdims=True)
    return np.where(norm > radius, points / np.maximum(norm, 1e-12) * radius, points)


def _curves(spec: SceneSpec, rng: np.random.Generator, centers: np.ndarray) -> list[RigidCurve]:
    curves = []
    for c in range(spec.n_clusters):
        if spec.motion:
            m = spec.motion[c]
            curves.append(RigidCurve(
                tuple(m.get("velocity", (0.0, 0.0, 0.0))),
                tuple(m.get("axis", (0.0, 0.0, 1.0))),
                float(m.get("rate", 0.0)),
                tuple(centers[c]),
            ))
            continue
        direction = random_axes(rng, 1)[0]
        speed = rng.uniform(0.0, spec.max_speed) * spec.cluster_radius
        axis = random_axes(rng, 1)[0]
        rate = rng.uniform(-spec.max_rate, spec.max_rate)
        curves.append(RigidCurve(
            tuple(direction * speed), tuple(axis), float(rate), tuple(centers[c])
        ))
    return curves


def frame_times(n_frames: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, n_frames)


def ring_views(
    spec: SceneSpec, n: int, extent: float, times: np.ndarray, phase: float = 0.0, prefix: str = "frames"
) -> list[TrainingView]:
    """Cameras on a tilted ring looking at the origin, timestamps on the frame grid."""
    radius = spec.camera_radius
    if radius <= 0:
        radius = 1.3 * extent / math.tan(math.radians(spec.fov_deg) / 2.0) + extent
    views = []
    for k in range(n):
        angle = 2.0 * math.pi * (k + phase) / n
        eye = radius * np.array([math.cos(angle), math.sin(angle), 0.35])
        frame = round(k * (times.size - 1) / max(n - 1, 1)) if phase == 0.0 else (
            round((k + phase) * (times.size - 1) / n) % times.size
        )
        views.append(look_at(
            eye, np.zeros(3), np.array([0.0, 0.0, 1.0]), spec.width, spec.height,
            spec.fov_deg, float(times[frame]), f"{prefix}/{k:04d}.png",
        ))
    return views


def jitter_poses(
    views: list[TrainingView], sigma_rot: float, sigma_trans: float, seed: int
) -> list[TrainingView]:
    """Perturb each pose by a random small rotation and translation.

    Per view the generator draws a uniform axis (3 normals), an angle
    ~ N(0, sigma_rot) and a translation offset ~ N(0, sigma_trans·I), in
    that order. The rotation is composed on the left.
    """
    if sigma_rot == 0.0 and sigma_trans == 0.0:
        return list(views)
    if sigma_rot < 0 or sigma_trans < 0:
        raise ConfigurationError("Pose jitter must be >= 0")
    rng = np.random.default_rng(seed)
    jittered = []
    for view in views:
        axis = random_axes(rng, 1)[0]
        angle = rng.normal(0.0, sigma_rot) if sigma_rot > 0 else 0.0
        offset = rng.normal(0.0, sigma_trans, size=3) if sigma_trans > 0 else np.zeros(3)
        rotation = so3_exp(axis * angle) @ view.rotation
        jittered.append(view.with_pose(rotation, view.translation + offset))
    return jittered


def make_scene(spec: SceneSpec, threads: int = 1) -> SyntheticScene:
    """Clusters of Gaussians moving rigidly, rendered from a camera ring."""
    spec.check()
    rng = np.random.default_rng(spec.seed)
    r = spec.cluster_radius
    centers = cluster_centers(spec.n_clusters, spec.spacing * r)

    sizes = np.full(spec.n_clusters, spec.n_gaussians // spec.n_clusters)
    sizes[: spec.n_gaussians % spec.n_clusters] += 1
    labels = np.repeat(np.arange(spec.n_clusters), sizes)
    means = np.concatenate([centers[c] + _blob(rng, sizes[c], r) for c in range(spec.n_clusters)])
    n = spec.n_gaussians
    base_colors = rng.uniform(0.15, 0.9, size=(spec.n_clusters, 3))
    rgb = np.clip(base_colors[labels] + rng.normal(scale=0.05, size=(n, 3)), 0.02, 0.98)
    scales = spec.splat_scale * rng.uniform(0.5, 1.5, size=(n, 3))
    rotations = rng.normal(size=(n, 4))
    alpha = rng.uniform(0.5, 0.95, size=n)
    cloud = GaussianCloud.from_rgb(means, scales, rotations, rgb, alpha)

    curves = _curves(spec, rng, centers)
    analytic = AnalyticField([(labels == c, curves[c]) for c in range(spec.n_clusters)])
    times = frame_times(spec.n_frames)
    trajectories = sample_trajectories(analytic, cloud, times)
    deformation: DeformationField = analytic
    if spec.noise > 0:
        jitter = rng.normal(scale=spec.noise, size=trajectories.positions.shape)
        jitter[:, 0, :] = 0.0
        trajectories = TrajectorySet(trajectories.positions + jitter, times)
        deformation = SampledField(trajectories)

    extent = float(np.max(np.linalg.norm(centers, axis=1))) + 2.0 * r
    nominal = ring_views(spec, spec.n_views, extent, times)
    test_views = ring_views(spec, spec.n_test_views, extent, times, phase=0.5, prefix="test_frames")
    background = np.asarray(spec.background, dtype=np.float64)

    def gt(views: list[TrainingView]) -> list[Image]:
        images = []
        for view in views:
            frame = deform(cloud, deformation, view.timestamp)
            images.append(render(frame, view, background, threads))
        return images

    images = gt(nominal)
    test_images = gt(test_views)
    views = jitter_poses(
        nominal, spec.pose_jitter_rot, spec.pose_jitter_trans, spec.seed + JITTER_SEED_OFFSET
    )
    LOGGER.info(
        f"Generated {n} Gaussians in {spec.n_clusters} clusters, {spec.n_frames} frames, "
        f"{len(views)} training and {len(test_views)} test views"
    )
    return SyntheticScene(
        cloud, deformation, trajectories, views, labels, images,
        test_views, test_images, nominal, curves, spec.to_json(),
    )


def _camera_json(views: list[TrainingView]) -> str:
    return dump_json([v.to_json() for v in views])


def bundle_files(scene: SyntheticScene) -> dict[str, str | bytes]:
    """Relative file name -> payload of a scene bundle."""
    files: dict[str, str | bytes] = {
        BUNDLE_FILES["cloud"]: ply_bytes(scene.cloud),
        BUNDLE_FILES["cameras"]: _camera_json(scene.views),
        BUNDLE_FILES["test_cameras"]: _camera_json(scene.test_views),
        BUNDLE_FILES["trajectories"]: trajectory_bytes(scene.trajectories),
        BUNDLE_FILES["labels"]: dump_json(scene.labels.tolist()),
        BUNDLE_FILES["scene"]: dump_json({
            "spec": scene.spec,
            "curves": [c.to_json() for c in scene.curves],
        }),
    }
    for view, image in zip(scene.views, scene.images):
        files[view.image_path] = png_bytes(image)
    for view, image in zip(scene.test_views, scene.test_images):
        files[view.image_path] = png_bytes(image)
    return files


def write_bundle(scene: SyntheticScene, out_dir: str) -> list[str]:
    """Write the bundle files concurrently; returns the written paths."""
    files = {os.path.join(out_dir, name): payload for name, payload in bundle_files(scene).items()}
    asyncio.run(async_write_files(files))
    LOGGER.info(f"Wrote scene bundle with {len(files)} files to {out_dir}")
    return sorted(files)


@dataclass
class Bundle:
    """Scene bundle as loaded from disk; the deformation samples its trajectories."""

    path: str
    cloud: GaussianCloud
    deformation: DeformationField
    trajectories: TrajectorySet | None
    views: list[TrainingView]
    images: list[Image]
    test_views: list[TrainingView]
    test_images: list[Image]
    labels: np.ndarray | None
    spec: TypeJSON

    @property
    def background(self) -> np.ndarray:
        return np.asarray(self.spec.get("background", [0.0, 0.0, 0.0]), dtype=np.float64)


def _images(views: list[TrainingView]) -> list[Image]:
    return [read_png(v.image_path) for v in views if v.image_path]


def load_bundle(path: str) -> Bundle:
    if not os.path.isdir(path):
        raise SpeedeError(f'Scene bundle "{path}" does not exist')

    def p(key: str) -> str:
        return os.path.join(path, BUNDLE_FILES[key])

    cloud = load_ply(p("cloud"))
    views = load_cameras(p("cameras"))
    test_views = load_cameras(p("test_cameras")) if os.path.exists(p("test_cameras")) else []
    trajectories = load_trajectories(p("trajectories")) if os.path.exists(p("trajectories")) else None
    labels = np.asarray(read_json(p("labels")), dtype=np.int64) if os.path.exists(p("labels")) else None
    spec = read_json(p("scene")).get("spec", {}) if os.path.exists(p("scene")) else {}
    if trajectories is not None:
        deformation: DeformationField = SampledField(trajectories)
    else:
        deformation = IdentityField()
    images = _images(views)
    if images and len(images) != len(views):
        raise SpeedeError(f'"{path}": some training views have no image')
    return Bundle(
        path, cloud, deformation, trajectories, views, images,
        test_views, _images(test_views), labels, spec,
    )
