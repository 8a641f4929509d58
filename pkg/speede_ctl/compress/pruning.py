"""Temporal sensitivity pruning

Scores every Gaussian by the squared image gradient with respect to its
footprint value, summed over training views rendered at their (optionally
noise perturbed) timestamps, and removes the lowest scoring share of the
model at scheduled iterations.
"""
from __future__ import annotations

import io
import logging
import math
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np
from tqdm import tqdm

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
from ..scene.deformation import DeformationField, deform
from ..scene.gaussian import GaussianCloud, TrainingView
from ..scene.render import (
    DEFAULT_SSIM_WEIGHT,
    Image,
    color_opacity_gradients,
    footprint_gradients,
)
from .bench import evaluate_quality

SCORE_MAGIC = b"SCOR1"

DEFAULT_EVENTS: list[tuple[int, float]] = [(15000, 0.8), (25000, 0.3)]

SCORERS = ("sensitivity", "opacity")


class NoiseSchedule(Config):
    """Linearly decaying timestamp noise for score rendering."""

    def __init__(self, **kwargs) -> None:
        self.beta: float = 0.1
        self.delta_t: float = 1.0 / 40.0
        self.tau: int = 20000
        self.enabled: bool = True
        super().__init__(**kwargs)

    def check(self) -> None:
        if self.beta < 0:
            raise ConfigurationError(f"Noise beta must be >= 0, got {self.beta}")
        if self.tau < 0:
            raise ConfigurationError(f"Noise tau must be >= 0, got {self.tau}")
        if self.delta_t <= 0:
            raise ConfigurationError(f"Noise delta_t must be > 0, got {self.delta_t}")

    @property
    def active(self) -> bool:
        # tau = 0 anneals the noise out from the start.
        return self.enabled and self.tau > 0 and self.beta > 0


class PruneSchedule(Config):
    """Pruning events as (iteration, fraction) pairs."""

    def __init__(self, **kwargs) -> None:
        self.events: list[tuple[int, float]] = list(DEFAULT_EVENTS)
        self.densify_end: int = 15000
        super().__init__(**kwargs)

    def check(self) -> None:
        self.events = [(int(i), float(f)) for i, f in self.events]
        iterations = [i for i, _ in self.events]
        if any(b <= a for a, b in zip(iterations, iterations[1:])):
            raise ConfigurationError(f"Prune iterations must be ascending: {iterations}")
        for i, f in self.events:
            if not 0.0 < f < 1.0:
                raise ConfigurationError(f"Prune fraction at iteration {i} must be in (0,1), got {f}")

    @classmethod
    def from_fractions(cls, fractions: list[float], densify_end: int = 15000, spacing: int = 10000) -> PruneSchedule:
        """First event at densify_end, following events every spacing iterations."""
        events = [(densify_end + k * spacing, f) for k, f in enumerate(fractions)]
        return cls(events=events, densify_end=densify_end)


class FinetuneConfig(Config):
    """Gradient descent on DC color and opacity between pruning events."""

    def __init__(self, **kwargs) -> None:
        self.steps: int = 0
        self.lr_color: float = 0.5
        self.lr_opacity: float = 0.5
        self.ssim_weight: float = DEFAULT_SSIM_WEIGHT
        super().__init__(**kwargs)

    def check(self) -> None:
        if self.steps < 0:
            raise ConfigurationError("Fine-tune steps must be >= 0")
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ConfigurationError("Fine-tune ssim_weight must be in [0,1]")


@dataclass
class ScoreVector:
    """Per Gaussian scores on the float32 grid of the SCOR1 payload."""

    scores: np.ndarray
    views_accumulated: int = 0

    def __post_init__(self) -> None:
        self.scores = float32_grid(self.scores).ravel()

    def __len__(self) -> int:
        return self.scores.size


def mean_frame_interval(views: list[TrainingView]) -> float:
    stamps = np.unique([v.timestamp for v in views])
    if stamps.size < 2:
        return 1.0
    return float(np.mean(np.diff(stamps)))


def asp_noise(iteration: int, schedule: NoiseSchedule, rng: np.random.Generator) -> float:
    """Timestamp noise N(0,1)·β·Δt·max(0, 1 - i/τ)."""
    if not schedule.active or iteration >= schedule.tau:
        return 0.0
    decay = max(0.0, 1.0 - iteration / schedule.tau)
    return float(rng.standard_normal() * schedule.beta * schedule.delta_t * decay)


def _progress_disabled() -> bool:
    return LOGGER.getEffectiveLevel() > logging.DEBUG


def accumulate_scores(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    schedule: NoiseSchedule,
    iteration: int,
    rng: np.random.Generator | None = None,
    threads: int = 1,
    background: np.ndarray | None = None,
) -> ScoreVector:
    """Sum of per-view footprint gradients, one noise draw per view."""
    if not views:
        raise ConfigurationError("Score accumulation needs at least one view")
    rng = rng if rng is not None else np.random.default_rng(0)
    stamps = []
    for view in views:
        t = view.timestamp + asp_noise(iteration, schedule, rng)
        clamped = min(1.0, max(0.0, t))
        if clamped != t:
            LOGGER.debug(f"Clamped perturbed timestamp {t:.5f} to {clamped}")
        stamps.append(clamped)

    scores = np.zeros(len(cloud))
    frames: dict[float, GaussianCloud] = {}
    for view, t in tqdm(
        zip(views, stamps), total=len(views), desc="Scoring views", disable=_progress_disabled()
    ):
        if t not in frames:
            frames = {t: deform(cloud, deformation, t)}
        scores += footprint_gradients(frames[t], view, background, threads)
    return ScoreVector(scores, len(views))


def opacity_scores(cloud: GaussianCloud) -> ScoreVector:
    """Opacity ranking, the heuristic baseline."""
    return ScoreVector(cloud.activated_opacities(), 0)


def _as_scores(scores: ScoreVector | np.ndarray) -> np.ndarray:
    if isinstance(scores, ScoreVector):
        return scores.scores
    return np.asarray(scores, dtype=np.float64).ravel()


def prune(
    cloud: GaussianCloud, scores: ScoreVector | np.ndarray, fraction: float
) -> tuple[GaussianCloud, np.ndarray]:
    """Remove floor(fraction·N) lowest scored Gaussians.

    Returns the pruned cloud and the kept index map (new index -> old index,
    ascending). Equal scores are pruned lowest index first.
    """
    values = _as_scores(scores)
    n = len(cloud)
    if values.size != n:
        raise DimensionMismatchError(f"{values.size} scores for {n} Gaussians")
    if not 0.0 <= fraction < 1.0:
        raise ConfigurationError(f"Prune fraction must be in [0,1), got {fraction}")
    n_remove = int(math.floor(fraction * n + 1e-9))
    if n_remove == 0:
        return cloud, np.arange(n, dtype=np.int64)
    order = np.lexsort((np.arange(n), values))
    keep = np.ones(n, dtype=bool)
    keep[order[:n_remove]] = False
    kept = np.nonzero(keep)[0].astype(np.int64)
    return cloud.subset(kept), kept


def old_to_new(kept: np.ndarray, n_before: int) -> np.ndarray:
    """Inverse of a kept index map; removed indices map to -1."""
    table = np.full(n_before, -1, dtype=np.int64)
    table[kept] = np.arange(kept.size, dtype=np.int64)
    return table


def compose_index_maps(first: np.ndarray, second: np.ndarray) -> np.ndarray:
    """Kept map of pruning by first, then by second."""
    return np.asarray(first, dtype=np.int64)[np.asarray(second, dtype=np.int64)]


def finetune(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    images: list[Image],
    config: FinetuneConfig,
    threads: int = 1,
    background: np.ndarray | None = None,
) -> GaussianCloud:
    """Plain gradient descent on DC color and opacity, one view per step."""
    if config.steps == 0 or not views:
        return cloud
    sh = cloud.sh_colors.astype(np.float64)
    opacities = cloud.opacities.astype(np.float64)
    dtype = cloud.means.dtype
    for step in range(config.steps):
        k = step % len(views)
        current = cloud.replace(sh_colors=sh.astype(dtype), opacities=opacities.astype(dtype))
        frame = deform(current, deformation, views[k].timestamp)
        d_f_dc, d_opacity = color_opacity_gradients(
            frame, views[k], images[k], background, config.ssim_weight, threads
        )
        sh[:, 0, :] -= config.lr_color * d_f_dc
        opacities -= config.lr_opacity * d_opacity
    LOGGER.debug(f"Fine-tuned color and opacity for {config.steps} steps")
    return cloud.replace(sh_colors=sh.astype(dtype), opacities=opacities.astype(dtype))


@dataclass
class PruneEvent:
    iteration: int
    fraction: float
    n_before: int
    n_after: int
    psnr_before: float | None
    psnr_after: float | None
    noise_active: bool
    wall_time_s: float

    def to_json(self) -> TypeJSON:
        return dict(vars(self))


@dataclass
class PruneReport:
    seed: int
    schedule: PruneSchedule
    noise: NoiseSchedule
    finetune: FinetuneConfig
    events: list[PruneEvent] = field(default_factory=list)
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    deformation: DeformationField | None = None
    scores: ScoreVector | None = None

    def to_json(self) -> TypeJSON:
        return {
            "events": [e.to_json() for e in self.events],
            "seed": self.seed,
            "schedule": self.schedule.to_json(),
            "noise": self.noise.to_json(),
            "finetune": self.finetune.to_json(),
            "n_kept": int(self.kept.size),
        }


def run_prune_pipeline(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    prune_schedule: PruneSchedule,
    noise_schedule: NoiseSchedule,
    finetune_config: FinetuneConfig,
    images: list[Image] | None = None,
    eval_views: list[TrainingView] | None = None,
    eval_images: list[Image] | None = None,
    seed: int = 0,
    threads: int = 1,
    background: np.ndarray | None = None,
    scorer: str = "sensitivity",
) -> tuple[GaussianCloud, PruneReport]:
    """Walk the schedule: score, prune, fine-tune.

    scorer "opacity" ranks by activated opacity instead of the sensitivity
    score (the heuristic baseline).
    """
    if scorer not in SCORERS:
        raise ConfigurationError(f"Unknown scorer \"{scorer}\", expected one of {SCORERS}")
    rng = np.random.default_rng(seed)
    if eval_views is None:
        eval_views, eval_images = views, images
    report = PruneReport(
        seed, prune_schedule, noise_schedule, finetune_config,
        kept=np.arange(len(cloud), dtype=np.int64), deformation=deformation,
    )

    def quality(c: GaussianCloud, d: DeformationField) -> float | None:
        if not eval_views or eval_images is None:
            return None
        return evaluate_quality(c, d, eval_views, eval_images, background, threads).psnr_mean

    for iteration, fraction in prune_schedule.events:
        started = time.perf_counter()
        n_before = len(cloud)
        psnr_before = quality(cloud, deformation)
        if scorer == "opacity":
            scores = opacity_scores(cloud)
        else:
            scores = accumulate_scores(
                cloud, deformation, views, noise_schedule, iteration, rng, threads, background
            )
        cloud, kept = prune(cloud, scores, fraction)
        deformation = deformation.subset(kept)
        report.kept = compose_index_maps(report.kept, kept)
        report.scores = scores
        if images is not None:
            cloud = finetune(cloud, deformation, views, images, finetune_config, threads, background)
        psnr_after = quality(cloud, deformation)
        event = PruneEvent(
            iteration, fraction, n_before, len(cloud), psnr_before, psnr_after,
            noise_schedule.active and iteration < noise_schedule.tau,
            time.perf_counter() - started,
        )
        report.events.append(event)
        LOGGER.info(
            f"Pruning at iteration {iteration}: {n_before} -> {len(cloud)} Gaussians"
            + (f", PSNR {psnr_before:.2f} -> {psnr_after:.2f} dB" if psnr_after is not None else "")
        )
    report.deformation = deformation
    return cloud, report


def score_bytes(scores: ScoreVector) -> bytes:
    buf = io.BytesIO()
    buf.write(SCORE_MAGIC)
    buf.write(struct.pack("<QQ", len(scores), scores.views_accumulated))
    buf.write(scores.scores.astype("<f4").tobytes())
    return buf.getvalue()


def save_scores(scores: ScoreVector, path: str) -> None:
    parent = os.path.dirname(path)
    try:
        if parent:
            os.makedirs(parent, exist_ok=True)
        with open(path, "wb") as f:
            f.write(score_bytes(scores))
    except OSError as e:
        raise SpeedeError(f'Could not write scores "{path}": {e}') from e


def parse_scores(payload: bytes, source: str = "<bytes>") -> ScoreVector:
    head = len(SCORE_MAGIC) + 16
    if payload[: len(SCORE_MAGIC)] != SCORE_MAGIC or len(payload) < head:
        raise FormatError(f'"{source}" is not a SCOR1 file')
    n, views = struct.unpack_from("<QQ", payload, len(SCORE_MAGIC))
    if len(payload) != head + 4 * n:
        raise FormatError(f'"{source}": expected {head + 4 * n} bytes, found {len(payload)}')
    scores = np.frombuffer(payload, dtype="<f4", count=n, offset=head)
    return ScoreVector(scores.astype(np.float64), int(views))


def load_scores(path: str) -> ScoreVector:
    try:
        with open(path, "rb") as f:
            payload = f.read()
    except OSError as e:
        raise SpeedeError(f'Could not read scores "{path}": {e}') from e
    return parse_scores(payload, path)
