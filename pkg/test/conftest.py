"""Shared fixtures: tiny clouds, single cameras and small synthetic scenes"""
from __future__ import annotations

import numpy as np
import pytest

from speede_ctl.scene.gaussian import GaussianCloud, TrainingView
from speede_ctl.scene.synth import SceneSpec, make_scene


def make_view(
    width: int = 16,
    height: int = 16,
    focal: float = 20.0,
    timestamp: float = 0.0,
    rotation: np.ndarray | None = None,
    translation: np.ndarray | None = None,
) -> TrainingView:
    """Camera at the origin looking down +z with the principal point at the image centre."""
    return TrainingView(
        np.eye(3) if rotation is None else rotation,
        np.zeros(3) if translation is None else translation,
        focal, focal, width / 2.0, height / 2.0, width, height, timestamp,
    )


def make_cloud(
    means: list | np.ndarray,
    scale: float = 0.1,
    rgb: list | np.ndarray | None = None,
    alpha: float | list = 0.8,
    dtype: type = np.float64,
) -> GaussianCloud:
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = means.shape[0]
    colors = np.full((n, 3), 0.5) if rgb is None else np.asarray(rgb, dtype=np.float64).reshape(n, 3)
    return GaussianCloud.from_rgb(
        means,
        np.full((n, 3), scale),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        colors,
        np.broadcast_to(np.asarray(alpha, dtype=np.float64), (n,)),
        dtype=dtype,
    )


def random_cloud(rng: np.random.Generator, n: int, depth: float = 3.0) -> GaussianCloud:
    """n Gaussians in front of the default camera with moderate opacity."""
    means = np.column_stack([
        rng.uniform(-0.6, 0.6, n), rng.uniform(-0.6, 0.6, n), rng.uniform(depth - 0.5, depth + 0.5, n)
    ])
    return GaussianCloud.from_rgb(
        means,
        rng.uniform(0.08, 0.2, size=(n, 3)),
        rng.normal(size=(n, 4)),
        rng.uniform(0.1, 0.9, size=(n, 3)),
        rng.uniform(0.2, 0.7, size=n),
        dtype=np.float64,
    )


@pytest.fixture
def view() -> TrainingView:
    return make_view()


@pytest.fixture
def tiny_cloud() -> GaussianCloud:
    return make_cloud([[0.0, 0.0, 2.0], [0.1, -0.1, 2.5], [-0.2, 0.1, 3.0]], rgb=[
        [0.9, 0.1, 0.1], [0.1, 0.9, 0.1], [0.1, 0.1, 0.9],
    ])


def small_spec(**kwargs) -> SceneSpec:
    values = dict(
        n_gaussians=200, n_clusters=3, n_frames=6, n_views=6, n_test_views=2,
        width=24, height=24, seed=0,
    )
    values.update(kwargs)
    return SceneSpec(**values)


@pytest.fixture(scope="session")
def small_scene():
    return make_scene(small_spec())
