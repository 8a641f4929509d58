"""Command implementations of the speede-ctl client"""
from __future__ import annotations

import argparse
import asyncio
import csv
import io
import os
from dataclasses import dataclass

import numpy as np

from .compress.bench import (
    BenchReport,
    bench_csv,
    bench_render,
    evaluate_quality,
    model_size,
)
from .compress.groupflow import (
    GroupFlowField,
    GroupFlowModel,
    GroupingConfig,
    evaluation_timesteps,
    groupflow_compress,
    load_groupflow,
    save_groupflow,
)
from .compress.pruning import (
    FinetuneConfig,
    NoiseSchedule,
    PruneSchedule,
    mean_frame_interval,
    run_prune_pipeline,
    save_scores,
)
from .general.config import Config, load_toml, table
from .general.general import (
    EXIT_OK,
    LOGGER,
    ConfigurationError,
    SpeedeError,
    TypeJSON,
    async_write_files,
    dump_json,
    format_label,
    read_json,
    resolve_threads,
)
from .general.images import write_pfm, write_png
from .general.metrics import psnr
from .general.report import Report
from .scene.deformation import (
    DeformationField,
    SampledField,
    TrajectorySet,
    deform,
    load_trajectories,
    sample_trajectories,
    save_trajectories,
)
from .scene.gaussian import GaussianCloud, load_ply, save_ply, validate
from .scene.render import render
from .scene.synth import Bundle, SceneSpec, load_bundle, make_scene, write_bundle

PRUNED_CLOUD = "pruned.ply"
MODEL_CLOUD = "cloud.ply"
GROUPFLOW_FILE = "model.gflw"
GROUPFLOW_SIDECAR = "model.json"
TRAJECTORY_FILE = "trajectories.traj"
LABELS_FILE = "labels.json"
KEPT_FILE = "kept.json"
SCORES_FILE = "scores.scor"
REPORT_FILE = "report.json"


class BenchConfig(Config):
    def __init__(self, **kwargs) -> None:
        self.warmup: int = 1
        self.iters: int = 3
        super().__init__(**kwargs)

    def check(self) -> None:
        if self.iters < 1 or self.warmup < 0:
            raise ConfigurationError("Bench needs iters >= 1 and warmup >= 0")


class PipelineConfig(Config):
    """All settings of one command run, resolved from defaults, TOML and flags."""

    def __init__(self, **kwargs) -> None:
        self.source: str = ""
        self.out: str = "out"
        self.seed: int = 0
        self.threads: int = 1
        self.scene = SceneSpec()
        self.prune = PruneSchedule()
        self.noise = NoiseSchedule()
        self.finetune = FinetuneConfig()
        self.grouping = GroupingConfig()
        self.bench = BenchConfig()
        self._toml: TypeJSON = {}
        super().__init__(**kwargs)

    def from_toml(self, key: str) -> bool:
        """Whether the TOML file set [table] key, given as "table.key"."""
        name, _, attr = key.partition(".")
        return attr in self._toml.get(name, {})


def _flags(args: argparse.Namespace, *names: str) -> dict:
    return {name: getattr(args, name, None) for name in names}


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    """Defaults, then the TOML file, then command line flags."""
    cfg = PipelineConfig()
    if args.config:
        data = load_toml(args.config)
        cfg._toml = data
        for name in ("scene", "prune", "noise", "finetune", "grouping", "bench"):
            getattr(cfg, name).update(**table(data, name))
        cfg.update(**{k: data[k] for k in ("seed",) if k in data})
        if "seed" in data and "seed" not in table(data, "scene"):
            cfg.scene.update(seed=data["seed"])
        if "seed" in data and "seed" not in table(data, "grouping"):
            cfg.grouping.update(seed=data["seed"])

    if args.command == "synth":
        if getattr(args, "spec", None):
            data = load_toml(args.spec)
            cfg.scene.update(**(table(data, "scene") if "scene" in data else data))
        cfg.scene.update(**_flags(
            args, "n_gaussians", "n_clusters", "n_frames", "n_views", "n_test_views",
            "width", "height", "noise", "pose_jitter_rot", "pose_jitter_trans",
        ))
        cfg.source = "synth"
    else:
        cfg.source = args.bundle

    if args.command == "prune":
        if args.densify_end is not None:
            cfg.prune.update(densify_end=args.densify_end)
        if args.fractions is not None:
            cfg.prune = PruneSchedule.from_fractions(args.fractions, cfg.prune.densify_end)
        cfg.noise.update(enabled=args.asp, beta=args.beta, tau=args.tau, delta_t=args.delta_t)
        cfg.finetune.update(steps=args.finetune_steps, ssim_weight=args.ssim_weight)
    if args.command in ("group", "sweep"):
        cfg.grouping.update(**_flags(
            args, "lambda_r", "n_max", "refine_iters", "refine_step", "variant", "k_neighbors",
        ))
        if args.command == "group":
            cfg.grouping.update(groups=args.groups)
    if args.command in ("bench", "sweep"):
        cfg.bench.update(**_flags(args, "warmup", "iters"))

    if args.seed is not None:
        cfg.seed = args.seed
        cfg.scene.update(seed=args.seed)
        cfg.grouping.update(seed=args.seed)
    cfg.threads = resolve_threads(args.threads)
    cfg.out = args.out
    return cfg


@dataclass
class Model:
    """Cloud plus the deformation driving it."""

    label: str
    cloud: GaussianCloud
    deformation: DeformationField
    flow: GroupFlowModel | None = None
    labels: np.ndarray | None = None


def load_model(bundle: Bundle, model_dir: str | None) -> Model:
    """The bundle's own model, or one written by prune or group."""
    if model_dir is None:
        return Model("baseline", bundle.cloud, bundle.deformation, None, bundle.labels)
    if not os.path.isdir(model_dir):
        raise SpeedeError(f'Model directory "{model_dir}" does not exist')

    def p(name: str) -> str:
        return os.path.join(model_dir, name)

    cloud = bundle.cloud
    for name in (PRUNED_CLOUD, MODEL_CLOUD):
        if os.path.exists(p(name)):
            cloud = load_ply(p(name))
            break
    flow = None
    deformation = bundle.deformation
    if os.path.exists(p(GROUPFLOW_FILE)):
        sidecar = read_json(p(GROUPFLOW_SIDECAR)) if os.path.exists(p(GROUPFLOW_SIDECAR)) else {}
        grouping = GroupingConfig(**sidecar.get("config", {}))
        flow = load_groupflow(p(GROUPFLOW_FILE), grouping.lambda_r)
        deformation = GroupFlowField(flow, grouping.variant, k_neighbors=grouping.k_neighbors)
    elif os.path.exists(p(TRAJECTORY_FILE)):
        deformation = SampledField(load_trajectories(p(TRAJECTORY_FILE)))
    labels = None
    if os.path.exists(p(LABELS_FILE)):
        labels = np.asarray(read_json(p(LABELS_FILE)), dtype=np.int64)
    elif bundle.labels is not None and bundle.labels.size == len(cloud):
        labels = bundle.labels
    label = format_label(os.path.basename(os.path.normpath(model_dir))) or "model"
    return Model(label, cloud, deformation, flow, labels)


def _write_files(files: dict[str, str | bytes]) -> None:
    asyncio.run(async_write_files(files))


def _report(command: str, cfg: PipelineConfig) -> Report:
    return Report(command, cfg.to_json(), cfg.seed, cfg.threads)


def _split(bundle: Bundle, split: str) -> tuple[list, list]:
    if split == "test" and bundle.test_views:
        return bundle.test_views, bundle.test_images
    return bundle.views, bundle.images


def cmd_synth(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    scene = make_scene(cfg.scene, cfg.threads)
    files = write_bundle(scene, cfg.out)
    report = _report("synth", cfg)
    report.add(
        n_gaussians=len(scene.cloud),
        n_views=len(scene.views),
        n_test_views=len(scene.test_views),
        files=[os.path.relpath(f, cfg.out) for f in files],
    )
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def cmd_prune(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    validate(model.cloud).raise_if_invalid()
    if args.delta_t is None and not cfg.from_toml("noise.delta_t"):
        cfg.noise.update(delta_t=mean_frame_interval(bundle.views))
    eval_views, eval_images = _split(bundle, "test")
    cloud, prune_report = run_prune_pipeline(
        model.cloud, model.deformation, bundle.views, cfg.prune, cfg.noise, cfg.finetune,
        images=bundle.images or None, eval_views=eval_views, eval_images=eval_images or None,
        seed=cfg.seed, threads=cfg.threads, background=bundle.background, scorer=args.scorer,
    )
    os.makedirs(cfg.out, exist_ok=True)
    save_ply(cloud, os.path.join(cfg.out, PRUNED_CLOUD))
    files: dict[str, str | bytes] = {
        os.path.join(cfg.out, KEPT_FILE): dump_json(prune_report.kept.tolist()),
    }
    if model.labels is not None:
        files[os.path.join(cfg.out, LABELS_FILE)] = dump_json(model.labels[prune_report.kept].tolist())
    _write_files(files)
    deformation = prune_report.deformation
    if isinstance(deformation, SampledField):
        save_trajectories(deformation.trajectories, os.path.join(cfg.out, TRAJECTORY_FILE))
    if prune_report.scores is not None:
        save_scores(prune_report.scores, os.path.join(cfg.out, SCORES_FILE))

    report = _report("prune", cfg)
    report.add(
        prune=prune_report.to_json(),
        scorer=args.scorer,
        n_before=len(model.cloud),
        n_after=len(cloud),
        model_bytes_before=model_size(model.cloud, model.flow, model.deformation),
        model_bytes_after=model_size(cloud, None, deformation),
    )
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def _variant_rmse(field: GroupFlowField, cloud: GaussianCloud, trajectories: TrajectorySet) -> float:
    err = 0.0
    for k, t in enumerate(trajectories.timesteps):
        diff = field.positions(cloud, float(t)) - trajectories.positions[:, k, :]
        err += float(np.sum(diff**2))
    return float(np.sqrt(err / max(1, trajectories.n * trajectories.f)))


def cmd_group(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    timesteps = evaluation_timesteps(bundle.views)
    flow, group_report = groupflow_compress(
        model.cloud, model.deformation, bundle.views, cfg.grouping,
        labels=model.labels, threads=cfg.threads, timesteps=timesteps,
    )
    field = GroupFlowField(flow, cfg.grouping.variant, k_neighbors=cfg.grouping.k_neighbors)
    trajectories = sample_trajectories(model.deformation, model.cloud, timesteps)
    group_report.extra["variant"] = cfg.grouping.variant
    group_report.extra["variant_rmse"] = _variant_rmse(field, model.cloud, trajectories)

    os.makedirs(cfg.out, exist_ok=True)
    save_groupflow(flow, os.path.join(cfg.out, GROUPFLOW_FILE))
    save_ply(model.cloud, os.path.join(cfg.out, MODEL_CLOUD))
    files: dict[str, str | bytes] = {
        os.path.join(cfg.out, GROUPFLOW_SIDECAR): dump_json(group_report.to_json()),
    }
    if model.labels is not None:
        files[os.path.join(cfg.out, LABELS_FILE)] = dump_json(model.labels.tolist())
    _write_files(files)

    report = _report("group", cfg)
    report.add(
        groupflow=group_report.to_json(),
        model_bytes_before=model_size(model.cloud, model.flow, model.deformation),
        model_bytes_after=model_size(model.cloud, flow),
    )
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def cmd_deform(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if not 0.0 <= args.time <= 1.0:
        raise ConfigurationError(f"--time must be in [0,1], got {args.time}")
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    frame = deform(model.cloud, model.deformation, args.time)
    os.makedirs(cfg.out, exist_ok=True)
    save_ply(frame, os.path.join(cfg.out, "deformed.ply"))
    trajectories = sample_trajectories(
        model.deformation, model.cloud, evaluation_timesteps(bundle.views)
    )
    save_trajectories(trajectories, os.path.join(cfg.out, TRAJECTORY_FILE))
    report = _report("deform", cfg)
    report.add(time=args.time, n_gaussians=len(frame), deformation=model.deformation.name)
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def cmd_render(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    views, images = _split(bundle, "test" if args.test else "train")
    if not 0 <= args.view < len(views):
        raise ConfigurationError(f"--view {args.view} out of range, {len(views)} views")
    view = views[args.view]
    if args.time is not None:
        view = view.with_timestamp(args.time)
    image = render(
        deform(model.cloud, model.deformation, view.timestamp), view,
        bundle.background, cfg.threads,
    )
    write_png(os.path.join(cfg.out, "render.png"), image)
    if args.pfm:
        write_pfm(os.path.join(cfg.out, "render.pfm"), image)
    report = _report("render", cfg)
    report.add(view=args.view, timestamp=view.timestamp, width=view.width, height=view.height)
    if args.time is None and images:
        report.add(psnr=psnr(image, images[args.view]))
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def cmd_eval(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    if args.runs < 1:
        raise ConfigurationError("--runs must be >= 1")
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    views, images = _split(bundle, args.split)
    if not images:
        raise SpeedeError(f'"{args.bundle}" has no ground truth images for the {args.split} views')
    runs = []
    for run in range(args.runs):
        quality = evaluate_quality(
            model.cloud, model.deformation, views, images, bundle.background, cfg.threads
        )
        runs.append(quality.to_json() | {"run": run})
    quality_json = {
        "runs": runs,
        "mean": {
            "psnr": float(np.mean([r["psnr_mean"] for r in runs])),
            "ssim": float(np.mean([r["ssim_mean"] for r in runs])),
        },
        "split": args.split,
        "model": model.label,
        "n_gaussians": len(model.cloud),
        "lpips": None,
    }
    _write_files({os.path.join(cfg.out, "quality.json"): dump_json(quality_json)})
    report = _report("eval", cfg)
    report.add(quality=quality_json)
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


def _bench(cfg: PipelineConfig, model: Model, views: list, images: list, background: np.ndarray) -> BenchReport:
    return bench_render(
        model.cloud, model.deformation, views, cfg.bench.warmup, cfg.bench.iters,
        cfg.seed, cfg.threads, background, images or None, model.label, model.flow,
    )


def cmd_bench(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    views, images = _split(bundle, args.split)
    rows = [_bench(cfg, load_model(bundle, None), views, images, bundle.background)]
    for model_dir in args.models:
        rows.append(_bench(cfg, load_model(bundle, model_dir), views, images, bundle.background))
    baseline_fps = rows[0].fps_mean
    for row in rows:
        row.speedup = row.fps_mean / baseline_fps if baseline_fps > 0 else None
    _write_files({
        os.path.join(cfg.out, "bench.json"): dump_json([r.to_json() for r in rows]),
        os.path.join(cfg.out, "bench.csv"): bench_csv(rows),
    })
    report = _report("bench", cfg)
    report.add(rows=[r.to_json() for r in rows], split=args.split)
    report.write(os.path.join(cfg.out, REPORT_FILE))
    return EXIT_OK


SWEEP_COLUMNS = (
    "kind", "groups", "densify_fraction", "post_fraction", "n_gaussians", "params",
    "rmse", "psnr", "fps", "model_bytes",
)


def _sweep_csv(rows: list[TypeJSON]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: "" if row.get(c) is None else row.get(c) for c in SWEEP_COLUMNS})
    return buf.getvalue()


def cmd_sweep(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    bundle = load_bundle(args.bundle)
    model = load_model(bundle, args.model)
    views, images = _split(bundle, "test")
    rows: list[TypeJSON] = []
    for groups in args.groups or []:
        grouping = cfg.grouping.copy()
        grouping.update(groups=groups)
        flow, group_report = groupflow_compress(
            model.cloud, model.deformation, bundle.views, grouping,
            labels=model.labels, threads=cfg.threads,
        )
        field = GroupFlowField(flow, grouping.variant, k_neighbors=grouping.k_neighbors)
        row = _bench(cfg, Model(f"groups-{groups}", model.cloud, field, flow), views, images, bundle.background)
        rows.append({
            "kind": "groups", "groups": groups, "n_gaussians": len(model.cloud),
            "params": flow.param_count(), "rmse": group_report.rmse, "psnr": row.psnr,
            "fps": row.fps_mean, "model_bytes": row.model_bytes, "purity": group_report.purity,
        })
    for first in args.densify_fractions or []:
        for second in args.post_fractions or []:
            schedule = PruneSchedule.from_fractions([first, second], cfg.prune.densify_end)
            noise = cfg.noise.copy()
            if not cfg.from_toml("noise.delta_t"):
                noise.update(delta_t=mean_frame_interval(bundle.views))
            cloud, prune_report = run_prune_pipeline(
                model.cloud, model.deformation, bundle.views, schedule, noise, cfg.finetune,
                images=bundle.images or None, eval_views=views, eval_images=images or None,
                seed=cfg.seed, threads=cfg.threads, background=bundle.background,
            )
            pruned = Model(f"prune-{first}-{second}", cloud, prune_report.deformation)
            row = _bench(cfg, pruned, views, images, bundle.background)
            rows.append({
                "kind": "prune", "densify_fraction": first, "post_fraction": second,
                "n_gaussians": len(cloud), "psnr": row.psnr, "fps": row.fps_mean,
                "model_bytes": row.model_bytes,
            })
    if not rows:
        raise ConfigurationError("sweep needs --groups or --densify-fractions with --post-fractions")
    _write_files({
        os.path.join(cfg.out, "sweep.json"): dump_json(rows),
        os.path.join(cfg.out, "sweep.csv"): _sweep_csv(rows),
    })
    report = _report("sweep", cfg)
    report.add(rows=rows)
    report.write(os.path.join(cfg.out, REPORT_FILE))
    LOGGER.info(f"Sweep finished with {len(rows)} rows")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prune": cmd_prune,
    "group": cmd_group,
    "deform": cmd_deform,
    "render": cmd_render,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "sweep": cmd_sweep,
}
