"""Group flow motion compression

Gaussians whose mean trajectories move alike are grouped around control
points picked by farthest point sampling at the canonical frame. Each group
then shares one rigid transform per frame,

    μ_i(t) = R_j(t) (μ_i(0) - h_j) + h_j + T_j(t)

fitted by pivoted Kabsch alignment and optionally refined by gradient
descent on the trajectory loss.
"""
from __future__ import annotations

import io
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..general.config import Config
from ..general.general import (
    LOGGER,
    ConfigurationError,
    DimensionMismatchError,
    FormatError,
    SpeedeError,
    TypeJSON,
    float32_grid,
)
from ..general.metrics import grouping_purity
from ..general.rotations import (
    matrix_to_quaternion,
    normalize_quaternions,
    project_to_so3,
    quaternion_multiply,
    slerp_matrices,
    so3_exp,
)
from ..scene.deformation import (
    DeformationField,
    Offsets,
    TrajectorySet,
    sample_trajectories,
)
from ..scene.gaussian import GaussianCloud, TrainingView

GROUPFLOW_MAGIC = b"GFLW1"

VARIANTS = ("base", "rot", "lbs")

# Relative singular value below which the cross-covariance counts as rank deficient.
RANK_TOLERANCE = 1e-9

# Gaussians per assignment work item.
ASSIGN_CHUNK = 4096


class GroupingConfig(Config):
    """Grouping and fitting settings."""

    def __init__(self, **kwargs) -> None:
        self.groups: int = 200
        self.lambda_r: float = 0.5
        self.n_max: int = 100
        self.seed: int = 0
        self.refine_iters: int = 0
        self.refine_step: float = 0.5
        self.variant: str = "base"
        self.k_neighbors: int = 5
        super().__init__(**kwargs)

    def check(self) -> None:
        if self.groups < 1:
            raise ConfigurationError(f"Group count must be >= 1, got {self.groups}")
        if not 0.0 <= self.lambda_r <= 1.0:
            raise ConfigurationError(f"lambda_r must be in [0,1], got {self.lambda_r}")
        if self.n_max < 3:
            raise ConfigurationError(f"n_max must be >= 3, got {self.n_max}")
        if self.refine_iters < 0 or self.refine_step <= 0:
            raise ConfigurationError("Refinement needs refine_iters >= 0 and refine_step > 0")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f'Unknown variant "{self.variant}", expected one of {VARIANTS}')
        if self.k_neighbors < 1:
            raise ConfigurationError("k_neighbors must be >= 1")


@dataclass
class GroupFlowModel:
    """Control points, per frame per group rigid transforms, group assignment.

    Control points, rotations and translations are held on the float32 grid
    of the GFLW1 payload, so a saved and reloaded model is identical.
    """

    control_points: np.ndarray
    rotations: np.ndarray
    translations: np.ndarray
    assignment: np.ndarray
    timesteps: np.ndarray
    lambda_r: float = 0.5
    control_indices: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.control_points = float32_grid(self.control_points).reshape(-1, 3)
        self.timesteps = np.asarray(self.timesteps, dtype=np.float64).ravel()
        j, f = self.control_points.shape[0], self.timesteps.size
        self.rotations = float32_grid(self.rotations).reshape(f, j, 3, 3)
        self.translations = float32_grid(self.translations).reshape(f, j, 3)
        self.assignment = np.asarray(self.assignment, dtype=np.int64).ravel()
        if self.assignment.size and (self.assignment.min() < 0 or self.assignment.max() >= j):
            raise ConfigurationError(f"Group assignment outside [0, {j})")

    @property
    def n_groups(self) -> int:
        return self.control_points.shape[0]

    @property
    def n_frames(self) -> int:
        return self.timesteps.size

    @property
    def n_gaussians(self) -> int:
        return self.assignment.size

    def param_count(self) -> int:
        """6 motion parameters per group and frame, control points, assignment."""
        return self.n_groups * (self.n_frames * 6 + 3) + self.n_gaussians

    def group_sizes(self) -> np.ndarray:
        return np.bincount(self.assignment, minlength=self.n_groups)

    def orthonormality_error(self) -> float:
        r = self.rotations
        gram = np.swapaxes(r, -1, -2) @ r
        return float(np.max(np.abs(gram - np.eye(3)))) if r.size else 0.0

    def check(self) -> list[str]:
        problems = []
        if self.orthonormality_error() >= 1e-6:
            problems.append("rotations are not orthonormal")
        if self.rotations.size and np.any(np.linalg.det(self.rotations) <= 0):
            problems.append("rotations with non-positive determinant")
        return problems

    def subset(self, kept: np.ndarray) -> GroupFlowModel:
        return GroupFlowModel(
            self.control_points, self.rotations, self.translations,
            self.assignment[np.asarray(kept, dtype=np.int64)], self.timesteps,
            self.lambda_r, self.control_indices,
        )

    def equals(self, other: GroupFlowModel) -> bool:
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in (
                (self.control_points, other.control_points),
                (self.rotations, other.rotations),
                (self.translations, other.translations),
                (self.assignment, other.assignment),
                (self.timesteps, other.timesteps),
            )
        )

    def transforms_at(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Per group (R, T) at time t; slerp and lerp between stored frames."""
        ts = self.timesteps
        if t <= ts[0]:
            return self.rotations[0], self.translations[0]
        if t >= ts[-1]:
            return self.rotations[-1], self.translations[-1]
        k = int(np.searchsorted(ts, t, side="right")) - 1
        if ts[k] == t:
            return self.rotations[k], self.translations[k]
        u = (t - ts[k]) / (ts[k + 1] - ts[k])
        rot = slerp_matrices(self.rotations[k], self.rotations[k + 1], np.full(self.n_groups, u))
        trans = (1.0 - u) * self.translations[k] + u * self.translations[k + 1]
        return rot, trans


def farthest_point_sample(
    points: np.ndarray, n_samples: int, seed: int = 0, start: int | None = None
) -> np.ndarray:
    """Indices of n_samples points, each maximising the distance to those picked before.

    The first index is drawn from seed unless start is given; ties go to the
    lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n_samples > n:
        raise ConfigurationError(f"Cannot pick {n_samples} control points from {n} Gaussians")
    if n_samples <= 0:
        return np.zeros(0, dtype=np.int64)
    first = int(np.random.default_rng(seed).integers(n)) if start is None else int(start)
    picked = np.empty(n_samples, dtype=np.int64)
    picked[0] = first
    dists = np.linalg.norm(points - points[first], axis=1)
    dists[first] = -np.inf
    for k in range(1, n_samples):
        idx = int(np.argmax(dists))
        picked[k] = idx
        dists = np.minimum(dists, np.linalg.norm(points - points[idx], axis=1))
        dists[picked[: k + 1]] = -np.inf
    return picked


def trajectory_similarity(traj_i: np.ndarray, traj_h: np.ndarray, lambda_r: float) -> np.ndarray | float:
    """λ·std_t(d_t) + (1-λ)·mean_t(d_t), d_t = |μ_i(t) - h(t)|, population std."""
    traj_i = np.asarray(traj_i, dtype=np.float64)
    traj_h = np.asarray(traj_h, dtype=np.float64)
    if traj_i.shape[-2] != traj_h.shape[-2]:
        raise DimensionMismatchError(
            f"Trajectories have {traj_i.shape[-2]} and {traj_h.shape[-2]} frames"
        )
    d = np.linalg.norm(traj_i - traj_h, axis=-1)
    s = lambda_r * np.std(d, axis=-1) + (1.0 - lambda_r) * np.mean(d, axis=-1)
    return float(s) if np.ndim(s) == 0 else s


def assign_groups(
    trajectories: TrajectorySet,
    control_indices: np.ndarray,
    lambda_r: float,
    threads: int = 1,
) -> np.ndarray:
    """argmin_j S(i, j), ties to the lowest j."""
    control_indices = np.asarray(control_indices, dtype=np.int64)
    positions = trajectories.positions
    n = positions.shape[0]
    if control_indices.size == 0:
        raise ConfigurationError("Need at least one control point")
    if control_indices.min() < 0 or control_indices.max() >= n:
        raise ConfigurationError("Control indices out of range")
    controls = positions[control_indices]

    def run(lo: int) -> np.ndarray:
        chunk = positions[lo : lo + ASSIGN_CHUNK]
        best = np.full(chunk.shape[0], np.inf)
        arg = np.zeros(chunk.shape[0], dtype=np.int64)
        for j in range(controls.shape[0]):
            s = trajectory_similarity(chunk, controls[j], lambda_r)
            better = s < best
            best[better] = s[better]
            arg[better] = j
        return arg

    starts = list(range(0, n, ASSIGN_CHUNK))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(lo) for lo in starts]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


def _kabsch(source: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray, bool]:
    """Rotation and translation minimising |R·source + T - target|², reflection corrected."""
    centroid_s = source.mean(axis=0)
    centroid_t = target.mean(axis=0)
    if source.shape[0] < 3:
        return np.eye(3), centroid_t - centroid_s, True
    h = (source - centroid_s).T @ (target - centroid_t)
    u, s, vt = np.linalg.svd(h)
    if s[0] <= 0.0 or s[1] <= RANK_TOLERANCE * s[0]:
        return np.eye(3), centroid_t - centroid_s, True
    v = vt.T
    d = np.sign(np.linalg.det(v @ u.T))
    d = 1.0 if d == 0 else d
    rot = v @ np.diag([1.0, 1.0, d]) @ u.T
    return rot, centroid_t - rot @ centroid_s, False


def fit_rigid(
    canonical: np.ndarray,
    target: np.ndarray,
    pivot: np.ndarray,
    n_max: int = 100,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """(R, T) with target ≈ R (canonical - pivot) + pivot + T.

    At most n_max members are used, sampled without replacement from rng.
    Fewer than 3 members or collinear sets give a translation-only fit.
    """
    rot, trans, _ = _fit_rigid(canonical, target, pivot, n_max, rng)
    return rot, trans


def _fit_rigid(
    canonical: np.ndarray,
    target: np.ndarray,
    pivot: np.ndarray,
    n_max: int,
    rng: np.random.Generator | None,
) -> tuple[np.ndarray, np.ndarray, bool]:
    canonical = np.asarray(canonical, dtype=np.float64).reshape(-1, 3)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if canonical.shape != target.shape:
        raise DimensionMismatchError(f"Fit sets differ: {canonical.shape} vs {target.shape}")
    if canonical.shape[0] == 0:
        return np.eye(3), np.zeros(3), True
    if canonical.shape[0] > n_max:
        rng = rng if rng is not None else np.random.default_rng(0)
        sample = np.sort(rng.choice(canonical.shape[0], n_max, replace=False))
        canonical, target = canonical[sample], target[sample]
    if np.array_equal(canonical, target):
        return np.eye(3), np.zeros(3), False
    pivot = np.asarray(pivot, dtype=np.float64).reshape(3)
    return _kabsch(canonical - pivot, target - pivot)


def _transform(
    means: np.ndarray, rot: np.ndarray, trans: np.ndarray, pivot: np.ndarray
) -> np.ndarray:
    """μ + (R - I)(μ - h) + T, exact identity for R = I and T = 0."""
    offset = np.einsum("nab,nb->na", rot - np.eye(3), means - pivot)
    return means + offset + trans


def apply_group_flow(canonical_means: np.ndarray, model: GroupFlowModel, t: float) -> np.ndarray:
    means = np.asarray(canonical_means, dtype=np.float64)
    if means.shape[0] != model.n_gaussians:
        raise DimensionMismatchError(
            f"Model assigns {model.n_gaussians} Gaussians, got {means.shape[0]} means"
        )
    rot, trans = model.transforms_at(t)
    a = model.assignment
    return _transform(means, rot[a], trans[a], model.control_points[a])


def rotation_offset(canonical_rots: np.ndarray, model: GroupFlowModel, t: float) -> np.ndarray:
    """Gaussian rotations carried along by their group, quat(R_j(t)) ⊗ r_i."""
    rots = np.asarray(canonical_rots, dtype=np.float64)
    rot, _ = model.transforms_at(t)
    a = model.assignment
    group_q = matrix_to_quaternion(rot)
    composed = normalize_quaternions(quaternion_multiply(group_q[a], rots))
    identity = np.all(rot == np.eye(3), axis=(1, 2))[a]
    composed[identity] = rots[identity]
    return composed


def nearest_controls(canonical_means: np.ndarray, model: GroupFlowModel, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Distances and indices (N×k) of the k nearest control points at t=0."""
    k = min(k, model.n_groups)
    dist, idx = cKDTree(model.control_points).query(np.asarray(canonical_means, dtype=np.float64), k=k)
    return dist.reshape(-1, k), idx.reshape(-1, k).astype(np.int64)


def nearest_control_assignment(canonical_means: np.ndarray, model: GroupFlowModel) -> GroupFlowModel:
    """Same model with every Gaussian assigned to its nearest control point."""
    _, idx = nearest_controls(canonical_means, model, 1)
    return GroupFlowModel(
        model.control_points, model.rotations, model.translations, idx[:, 0],
        model.timesteps, model.lambda_r, model.control_indices,
    )


def blend_weights(dist: np.ndarray, idx: np.ndarray, radii: np.ndarray) -> np.ndarray:
    """Normalised exp(-d²/2σ²) over each row, computed in log space."""
    sigma = np.maximum(np.asarray(radii, dtype=np.float64)[idx], 1e-12)
    logw = -(dist**2) / (2.0 * sigma**2)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    return w / w.sum(axis=1, keepdims=True)


def lbs_apply(
    canonical_means: np.ndarray,
    model: GroupFlowModel,
    radii: np.ndarray,
    k_neighbors: int,
    t: float,
) -> np.ndarray:
    """Blend of the k nearest control transforms with Gaussian kernel weights."""
    means = np.asarray(canonical_means, dtype=np.float64)
    if k_neighbors < 1:
        raise ConfigurationError("k_neighbors must be >= 1")
    dist, idx = nearest_controls(means, model, k_neighbors)
    weights = blend_weights(dist, idx, radii)
    rot, trans = model.transforms_at(t)
    out = np.zeros_like(means)
    for m in range(idx.shape[1]):
        g = idx[:, m]
        moved = _transform(means, rot[g], trans[g], model.control_points[g])
        out += weights[:, m, None] * moved
    return out


def default_radii(model: GroupFlowModel, canonical_means: np.ndarray) -> np.ndarray:
    """RMS distance of each group's members to its control point."""
    means = np.asarray(canonical_means, dtype=np.float64)
    sq = np.sum((means - model.control_points[model.assignment]) ** 2, axis=1)
    total = np.bincount(model.assignment, weights=sq, minlength=model.n_groups)
    count = model.group_sizes()
    radii = np.sqrt(np.divide(total, count, out=np.zeros(model.n_groups), where=count > 0))
    positive = radii[radii > 0]
    fallback = float(np.median(positive)) if positive.size else 1.0
    radii[radii <= 0] = fallback
    return radii


def _residuals(model: GroupFlowModel, trajectories: TrajectorySet) -> np.ndarray:
    """Per Gaussian squared error summed over frames."""
    canonical = trajectories.canonical()
    err = np.zeros(trajectories.n)
    for k, t in enumerate(trajectories.timesteps):
        rot, trans = model.rotations[k], model.translations[k]
        a = model.assignment
        moved = _transform(canonical, rot[a], trans[a], model.control_points[a])
        err += np.sum((moved - trajectories.positions[:, k, :]) ** 2, axis=1)
    return err


def trajectory_loss(model: GroupFlowModel, trajectories: TrajectorySet) -> float:
    """Σ_i Σ_t |μ̂_i(t) - μ_i(t)|²."""
    return float(np.sum(_residuals(model, trajectories)))


def trajectory_rmse(model: GroupFlowModel, trajectories: TrajectorySet) -> float:
    if trajectories.n == 0:
        return 0.0
    return float(np.sqrt(trajectory_loss(model, trajectories) / (trajectories.n * trajectories.f)))


def _group_terms(
    model: GroupFlowModel, trajectories: TrajectorySet, members: np.ndarray, j: int,
    rotations: np.ndarray, translations: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per frame loss, rotated lever arms and residuals of group j."""
    canonical = trajectories.canonical()[members]
    lever = canonical - model.control_points[j]
    rotated = np.einsum("fab,nb->fna", rotations, lever)
    moved = canonical[None] + (rotated - lever[None]) + translations[:, None, :]
    residual = moved - np.swapaxes(trajectories.positions[members], 0, 1)
    return np.sum(residual**2, axis=(1, 2)), rotated, residual


def trajectory_loss_and_grad(
    model: GroupFlowModel, trajectories: TrajectorySet
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its gradient for left increments R <- exp(ω)R and T <- T + δT.

    Returns (loss, ∂L/∂ω as F×J×3, ∂L/∂δT as F×J×3) at ω = δT = 0.
    """
    if trajectories.n != model.n_gaussians:
        raise DimensionMismatchError("Trajectories and model disagree on the Gaussian count")
    f, j = model.n_frames, model.n_groups
    grad_w = np.zeros((f, j, 3))
    grad_t = np.zeros((f, j, 3))
    total = 0.0
    for g in range(j):
        members = np.nonzero(model.assignment == g)[0]
        if members.size == 0:
            continue
        loss, rotated, residual = _group_terms(
            model, trajectories, members, g, model.rotations[:, g], model.translations[:, g]
        )
        total += float(loss.sum())
        grad_w[:, g] = 2.0 * np.sum(np.cross(rotated, residual), axis=1)
        grad_t[:, g] = 2.0 * np.sum(residual, axis=1)
    return total, grad_w, grad_t


def refine_flows(
    model: GroupFlowModel, trajectories: TrajectorySet, iters: int, step: float = 0.5
) -> GroupFlowModel:
    """Gradient descent on the trajectory loss per group and frame.

    A step that raises a frame's loss is rejected and that frame's step
    size halved, so the loss never increases. The canonical frame stays
    the identity.
    """
    if trajectories.n != model.n_gaussians:
        raise DimensionMismatchError("Trajectories and model disagree on the Gaussian count")
    rotations = model.rotations.copy()
    translations = model.translations.copy()
    f = model.n_frames
    for g in range(model.n_groups):
        members = np.nonzero(model.assignment == g)[0]
        if members.size == 0:
            continue
        steps = np.full(f, float(step))
        lever = trajectories.canonical()[members] - model.control_points[g]
        arm = float(np.sum(lever**2)) + 1e-12
        rot_g, trans_g = rotations[:, g].copy(), translations[:, g].copy()
        loss, rotated, residual = _group_terms(model, trajectories, members, g, rot_g, trans_g)
        for _ in range(iters):
            if np.all(loss[1:] == 0.0):
                break
            grad_w = 2.0 * np.sum(np.cross(rotated, residual), axis=1)
            grad_t = 2.0 * np.sum(residual, axis=1)
            cand_rot = project_to_so3(so3_exp(-steps[:, None] * grad_w / arm) @ rot_g)
            cand_trans = trans_g - steps[:, None] * grad_t / members.size
            cand_loss, cand_rotated, cand_residual = _group_terms(
                model, trajectories, members, g, cand_rot, cand_trans
            )
            accept = cand_loss <= loss
            accept[0] = False
            rot_g[accept] = cand_rot[accept]
            trans_g[accept] = cand_trans[accept]
            loss[accept] = cand_loss[accept]
            rotated[accept] = cand_rotated[accept]
            residual[accept] = cand_residual[accept]
            steps[~accept] *= 0.5
        rotations[:, g], translations[:, g] = rot_g, trans_g
    LOGGER.debug(f"Refined {model.n_groups} group flows for up to {iters} iterations")
    return GroupFlowModel(
        model.control_points, rotations, translations, model.assignment,
        model.timesteps, model.lambda_r, model.control_indices,
    )


def evaluation_timesteps(views: list[TrainingView]) -> np.ndarray:
    """Distinct view timestamps in [0,1] with the canonical t=0 first."""
    stamps = np.unique(np.clip([v.timestamp for v in views], 0.0, 1.0))
    if stamps.size == 0 or stamps[0] > 0.0:
        stamps = np.concatenate([[0.0], stamps])
    if stamps.size < 2:
        stamps = np.array([0.0, 1.0])
    return stamps


@dataclass
class GroupFlowReport:
    config: GroupingConfig
    group_sizes: list[int]
    group_rmse: list[float]
    rmse: float
    param_count: int
    n_frames: int
    degenerate_fits: int
    purity: float | None = None
    extra: TypeJSON = field(default_factory=dict)

    def to_json(self) -> TypeJSON:
        rmse = np.asarray(self.group_rmse) if self.group_rmse else np.zeros(1)
        data = {
            "config": self.config.to_json(),
            "group_sizes": self.group_sizes,
            "group_rmse": self.group_rmse,
            "residuals": {
                "rmse": self.rmse,
                "group_rmse_max": float(rmse.max()),
                "group_rmse_mean": float(rmse.mean()),
            },
            "params": {
                "total": self.param_count,
                "groups": len(self.group_sizes),
                "frames": self.n_frames,
                "formula": "J*F*6 + J*3 + N",
            },
            "degenerate_fits": self.degenerate_fits,
            "purity": self.purity,
        }
        data.update(self.extra)
        return data


def fit_groupflow(
    trajectories: TrajectorySet,
    config: GroupingConfig,
    threads: int = 1,
) -> tuple[GroupFlowModel, int]:
    """Control points, assignment and per (group, frame) rigid fits.

    Returns the model and the number of translation-only fallbacks.
    """
    canonical = trajectories.canonical()
    controls = farthest_point_sample(canonical, config.groups, config.seed)
    assignment = assign_groups(trajectories, controls, config.lambda_r, threads)
    pivots = canonical[controls]
    f, j = trajectories.f, controls.size

    def fit_group(g: int) -> tuple[np.ndarray, np.ndarray, int]:
        members = np.nonzero(assignment == g)[0]
        rot = np.tile(np.eye(3), (f, 1, 1))
        trans = np.zeros((f, 3))
        degenerate = 0
        if members.size > config.n_max:
            # One sample per group, shared by all frames.
            rng = np.random.default_rng([config.seed, g])
            members = np.sort(rng.choice(members, config.n_max, replace=False))
        for k in range(1, f):
            rot[k], trans[k], fallback = _fit_rigid(
                canonical[members], trajectories.positions[members, k, :], pivots[g],
                config.n_max, None,
            )
            degenerate += int(fallback)
        return rot, trans, degenerate

    if threads > 1 and j > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(fit_group, range(j)))
    else:
        fits = [fit_group(g) for g in range(j)]

    rotations = np.stack([r for r, _, _ in fits], axis=1) if fits else np.zeros((f, 0, 3, 3))
    translations = np.stack([t for _, t, _ in fits], axis=1) if fits else np.zeros((f, 0, 3))
    model = GroupFlowModel(
        pivots, rotations, translations, assignment, trajectories.timesteps,
        config.lambda_r, controls,
    )
    return model, sum(d for _, _, d in fits)


def groupflow_report(
    model: GroupFlowModel,
    trajectories: TrajectorySet,
    config: GroupingConfig,
    degenerate: int = 0,
    labels: np.ndarray | None = None,
) -> GroupFlowReport:
    err = _residuals(model, trajectories)
    sizes = model.group_sizes()
    per_group = np.bincount(model.assignment, weights=err, minlength=model.n_groups)
    group_rmse = np.sqrt(np.divide(
        per_group, sizes * trajectories.f, out=np.zeros(model.n_groups), where=sizes > 0
    ))
    return GroupFlowReport(
        config=config,
        group_sizes=sizes.tolist(),
        group_rmse=group_rmse.tolist(),
        rmse=float(np.sqrt(err.sum() / max(1, err.size * trajectories.f))),
        param_count=model.param_count(),
        n_frames=model.n_frames,
        degenerate_fits=degenerate,
        purity=None if labels is None else grouping_purity(model.assignment, labels),
    )


def groupflow_compress(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    config: GroupingConfig,
    labels: np.ndarray | None = None,
    threads: int = 1,
    timesteps: np.ndarray | None = None,
) -> tuple[GroupFlowModel, GroupFlowReport]:
    """Sample trajectories, group them and fit one rigid flow per group."""
    timesteps = evaluation_timesteps(views) if timesteps is None else timesteps
    trajectories = sample_trajectories(deformation, cloud, timesteps)
    model, degenerate = fit_groupflow(trajectories, config, threads)
    if degenerate:
        LOGGER.warning(f"{degenerate} group fits fell back to translation only")
    if config.refine_iters > 0:
        model = refine_flows(model, trajectories, config.refine_iters, config.refine_step)
    report = groupflow_report(model, trajectories, config, degenerate, labels)
    LOGGER.info(
        f"Fitted {model.n_groups} groups over {model.n_frames} frames, "
        f"trajectory RMSE {report.rmse:.3e}"
    )
    return model, report


class GroupFlowField(DeformationField):
    """Deformation driven by a group flow model."""

    name = "groupflow"

    def __init__(
        self,
        model: GroupFlowModel,
        variant: str = "base",
        radii: np.ndarray | None = None,
        k_neighbors: int = 5,
    ) -> None:
        if variant not in VARIANTS:
            raise ConfigurationError(f'Unknown variant "{variant}"')
        self.model = model
        self.variant = variant
        self.radii = radii
        self.k_neighbors = k_neighbors

    def _check(self, cloud: GaussianCloud) -> None:
        if len(cloud) != self.model.n_gaussians:
            raise DimensionMismatchError(
                f"Group flow assigns {self.model.n_gaussians} Gaussians, cloud has {len(cloud)}"
            )

    def positions(self, cloud: GaussianCloud, t: float) -> np.ndarray:
        self._check(cloud)
        if self.variant == "lbs":
            radii = self.radii if self.radii is not None else default_radii(self.model, cloud.means)
            return lbs_apply(cloud.means, self.model, radii, self.k_neighbors, t)
        return apply_group_flow(cloud.means, self.model, t)

    def evaluate(self, cloud: GaussianCloud, t: float) -> Offsets:
        offsets = Offsets.zeros(len(cloud))
        offsets.means = self.positions(cloud, t) - cloud.means.astype(np.float64)
        if self.variant == "rot":
            offsets.rotations = rotation_offset(offsets.rotations, self.model, t)
        return offsets

    def nbytes(self) -> int:
        return len(groupflow_bytes(self.model))

    def subset(self, kept: np.ndarray) -> GroupFlowField:
        return GroupFlowField(self.model.subset(kept), self.variant, self.radii, self.k_neighbors)


def groupflow_bytes(model: GroupFlowModel) -> bytes:
    buf = io.BytesIO()
    buf.write(GROUPFLOW_MAGIC)
    buf.write(struct.pack("<QQQ", model.n_groups, model.n_frames, model.n_gaussians))
    buf.write(model.timesteps.astype("<f8").tobytes())
    buf.write(model.control_points.astype("<f4").tobytes())
    buf.write(model.rotations.astype("<f4").tobytes())
    buf.write(model.translations.astype("<f4").tobytes())
    buf.write(model.assignment.astype("<u4").tobytes())
    return buf.getvalue()


def parse_groupflow(payload: bytes, source: str = "<bytes>", lambda_r: float = 0.5) -> GroupFlowModel:
    head = len(GROUPFLOW_MAGIC) + 24
    if payload[: len(GROUPFLOW_MAGIC)] != GROUPFLOW_MAGIC or len(payload) < head:
        raise FormatError(f'"{source}" is not a GFLW1 file')
    j, f, n = struct.unpack_from("<QQQ", payload, len(GROUPFLOW_MAGIC))
    sizes = [8 * f, 4 * j * 3, 4 * f * j * 9, 4 * f * j * 3, 4 * n]
    if len(payload) != head + sum(sizes):
        raise FormatError(f'"{source}": expected {head + sum(sizes)} bytes, found {len(payload)}')
    offset = head
    arrays = []
    for size, dtype in zip(sizes, ("<f8", "<f4", "<f4", "<f4", "<u4")):
        arrays.append(np.frombuffer(payload, dtype=dtype, count=size // np.dtype(dtype).itemsize, offset=offset))
        offset += size
    timesteps, controls, rotations, translations, assignment = arrays
    return GroupFlowModel(
        controls.astype(np.float64), rotations.astype(np.float64),
        translations.astype(np.float64), assignment.astype(np.int64),
        timesteps.astype(np.float64), lambda_r,
    )


def save_groupflow(model: GroupFlowModel, path: str) -> None:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(groupflow_bytes(model))
    except OSError as e:
        raise SpeedeError(f'Could not write group flow "{path}": {e}') from e


def load_groupflow(path: str, lambda_r: float = 0.5) -> GroupFlowModel:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise SpeedeError(f'Could not read group flow "{path}": {e}') from e
    return parse_groupflow(payload, path, lambda_r)
