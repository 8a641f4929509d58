"""Rendering throughput, quality and size accounting"""
from __future__ import annotations

import csv
import io
import statistics
import time
from dataclasses import dataclass, field, fields

import numpy as np

from ..general.general import LOGGER, ConfigurationError, DimensionMismatchError, TypeJSON
from ..general.metrics import psnr, ssim
from ..scene.deformation import DeformationField, deform
from ..scene.gaussian import GaussianCloud, TrainingView, ply_bytes
from ..scene.render import Image, render
from .groupflow import GroupFlowModel, groupflow_bytes


@dataclass
class QualityReport:
    psnr: list[float]
    ssim: list[float]

    @property
    def psnr_mean(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else 0.0

    @property
    def ssim_mean(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else 0.0

    def to_json(self) -> TypeJSON:
        return {
            "views": [{"psnr": p, "ssim": s} for p, s in zip(self.psnr, self.ssim)],
            "psnr_mean": self.psnr_mean,
            "ssim_mean": self.ssim_mean,
        }


def render_views(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    background: np.ndarray | None = None,
    threads: int = 1,
) -> list[Image]:
    """Render each view at its own timestamp."""
    frames: dict[float, GaussianCloud] = {}
    images = []
    for view in views:
        if view.timestamp not in frames:
            frames = {view.timestamp: deform(cloud, deformation, view.timestamp)}
        images.append(render(frames[view.timestamp], view, background, threads))
    return images


def evaluate_quality(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    images: list[Image],
    background: np.ndarray | None = None,
    threads: int = 1,
) -> QualityReport:
    if len(views) != len(images):
        raise DimensionMismatchError(f"{len(views)} views but {len(images)} reference images")
    rendered = render_views(cloud, deformation, views, background, threads)
    return QualityReport(
        [psnr(a, b) for a, b in zip(rendered, images)],
        [ssim(a, b) for a, b in zip(rendered, images)],
    )


def model_size(
    cloud: GaussianCloud,
    flow: GroupFlowModel | None = None,
    deformation: DeformationField | None = None,
) -> int:
    """Serialized PLY bytes plus the group flow file or the field parameters."""
    size = len(ply_bytes(cloud))
    if flow is not None:
        size += len(groupflow_bytes(flow))
    elif deformation is not None:
        size += deformation.nbytes()
    return size


CSV_COLUMNS = (
    "label", "fps_mean", "fps_std", "speedup", "n_gaussians", "model_bytes",
    "psnr", "ssim", "n_views", "warmup", "iters", "seed", "threads", "deformation",
)


@dataclass
class BenchReport:
    label: str
    fps_mean: float
    fps_std: float
    n_gaussians: int
    model_bytes: int
    psnr: float | None
    ssim: float | None
    n_views: int
    warmup: int
    iters: int
    seed: int
    threads: int
    deformation: str
    speedup: float | None = None
    # Mean FPS of each measured iteration, views rendered over wall time.
    fps_runs: list[float] = field(default_factory=list)
    images: list[Image] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        if self.iters < 1:
            raise ConfigurationError("Benchmark needs at least one measured iteration")

    def to_json(self) -> TypeJSON:
        return {c: getattr(self, c) for c in CSV_COLUMNS} | {
            "fps_runs": self.fps_runs,
            "io_excluded": True,
        }

    def to_csv_row(self) -> dict[str, str]:
        row = {}
        for c in CSV_COLUMNS:
            value = getattr(self, c)
            row[c] = "" if value is None else repr(value) if isinstance(value, float) else str(value)
        return row

    @classmethod
    def from_csv_row(cls, row: dict[str, str]) -> BenchReport:
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for c in CSV_COLUMNS:
            text = row[c]
            kind = str(types[c])
            if text == "":
                values[c] = None
            elif kind.startswith("int"):
                values[c] = int(text)
            elif kind.startswith("float"):
                values[c] = float(text)
            else:
                values[c] = text
        return cls(**values)


def bench_csv(reports: list[BenchReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for report in reports:
        writer.writerow(report.to_csv_row())
    return buf.getvalue()


def read_bench_csv(text: str) -> list[BenchReport]:
    return [BenchReport.from_csv_row(row) for row in csv.DictReader(io.StringIO(text))]


def bench_render(
    cloud: GaussianCloud,
    deformation: DeformationField,
    views: list[TrainingView],
    warmup: int = 1,
    iters: int = 3,
    seed: int = 0,
    threads: int = 1,
    background: np.ndarray | None = None,
    images: list[Image] | None = None,
    label: str = "model",
    flow: GroupFlowModel | None = None,
) -> BenchReport:
    """Frames per second over all views, deformation included, I/O excluded.

    Each measured iteration renders every view once in a seeded order and
    yields its mean FPS; fps_mean is the median of those means.
    """
    if iters < 1:
        raise ConfigurationError("Benchmark needs at least one measured iteration")
    if not views:
        raise ConfigurationError("Benchmark needs at least one view")
    rng = np.random.default_rng(seed)
    for _ in range(warmup):
        render_views(cloud, deformation, views[:1], background, threads)

    fps_runs = []
    rendered: list[Image] = []
    for _ in range(iters):
        order = rng.permutation(len(views))
        started = time.perf_counter()
        out = [None] * len(views)
        for k in order:
            frame = deform(cloud, deformation, views[k].timestamp)
            out[k] = render(frame, views[k], background, threads)
        elapsed = time.perf_counter() - started
        fps_runs.append(len(views) / max(elapsed, 1e-12))
        rendered = out

    quality_psnr = quality_ssim = None
    if images is not None:
        quality_psnr = float(np.mean([psnr(a, b) for a, b in zip(rendered, images)]))
        quality_ssim = float(np.mean([ssim(a, b) for a, b in zip(rendered, images)]))

    report = BenchReport(
        label=label,
        fps_mean=float(statistics.median(fps_runs)),
        fps_std=float(np.std(fps_runs)),
        n_gaussians=len(cloud),
        model_bytes=model_size(cloud, flow, None if flow is not None else deformation),
        psnr=quality_psnr,
        ssim=quality_ssim,
        n_views=len(views),
        warmup=warmup,
        iters=iters,
        seed=seed,
        threads=threads,
        deformation=deformation.name,
        fps_runs=fps_runs,
        images=rendered,
    )
    LOGGER.info(
        f"Bench {label}: {report.fps_mean:.2f} FPS, {report.n_gaussians} Gaussians, "
        f"{report.model_bytes} bytes"
    )
    return report
