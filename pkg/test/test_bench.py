import numpy as np
import pytest

from speede_ctl.compress.bench import (
    CSV_COLUMNS,
    BenchReport,
    bench_csv,
    bench_render,
    evaluate_quality,
    model_size,
    read_bench_csv,
    render_views,
)
from speede_ctl.compress.groupflow import GroupFlowModel, groupflow_bytes
from speede_ctl.general.general import ConfigurationError, DimensionMismatchError
from speede_ctl.general.metrics import PSNR_CAP_DB
from speede_ctl.scene.deformation import IdentityField, deform
from speede_ctl.scene.gaussian import GaussianCloud, ply_bytes
from speede_ctl.scene.render import render

from conftest import make_view, random_cloud


def report(**kwargs):
    values = dict(
        label="pruned", fps_mean=41.25, fps_std=0.5, n_gaussians=1400, model_bytes=83127,
        psnr=31.5, ssim=0.93, n_views=8, warmup=2, iters=5, seed=0, threads=4,
        deformation="sampled", speedup=2.5,
    )
    values.update(kwargs)
    return BenchReport(**values)


def test_csv_round_trip():
    rows = [report(), report(label="baseline", psnr=None, ssim=None, speedup=None)]
    text = bench_csv(rows)
    assert text.splitlines()[0] == ",".join(CSV_COLUMNS)
    loaded = read_bench_csv(text)
    for a, b in zip(loaded, rows):
        assert {c: getattr(a, c) for c in CSV_COLUMNS} == {c: getattr(b, c) for c in CSV_COLUMNS}


def test_report_needs_iterations():
    with pytest.raises(ConfigurationError):
        report(iters=0)


def test_report_json():
    data = report().to_json()
    assert data["io_excluded"] is True
    assert data["speedup"] == 2.5


def test_empty_model_is_a_bare_header():
    payload = ply_bytes(GaussianCloud.empty())
    assert payload.endswith(b"end_header\n")
    assert model_size(GaussianCloud.empty()) == len(payload)


def test_model_size_counts_the_flow():
    cloud = random_cloud(np.random.default_rng(0), 3)
    flow = GroupFlowModel(np.zeros((1, 3)), np.tile(np.eye(3), (2, 1, 1, 1)), np.zeros((2, 1, 3)), [0, 0, 0], [0.0, 1.0])
    assert model_size(cloud, flow) == len(ply_bytes(cloud)) + len(groupflow_bytes(flow))
    assert model_size(cloud, deformation=IdentityField()) == len(ply_bytes(cloud))


def test_render_views_match_single_renders():
    cloud = random_cloud(np.random.default_rng(1), 5)
    views = [make_view(timestamp=t) for t in (0.0, 0.0, 1.0)]
    for image, view in zip(render_views(cloud, IdentityField(), views), views):
        assert image.tobytes() == render(deform(cloud, IdentityField(), view.timestamp), view).tobytes()


def test_quality_against_own_renders(small_scene):
    quality = evaluate_quality(small_scene.cloud, small_scene.deformation, small_scene.views, small_scene.images, small_scene.background)
    assert quality.psnr == [PSNR_CAP_DB] * 6
    assert quality.ssim_mean == pytest.approx(1.0)
    with pytest.raises(DimensionMismatchError):
        evaluate_quality(small_scene.cloud, small_scene.deformation, small_scene.views, small_scene.images[:2])


def test_bench_is_deterministic_apart_from_timing(small_scene):
    args = (small_scene.cloud, small_scene.deformation, small_scene.views)
    a = bench_render(*args, warmup=1, iters=2, seed=5, background=small_scene.background, images=small_scene.images)
    b = bench_render(*args, warmup=0, iters=3, seed=9, threads=2, background=small_scene.background)
    for x, y, gt in zip(a.images, b.images, small_scene.images):
        assert x.tobytes() == y.tobytes() == gt.tobytes()
    assert a.psnr == PSNR_CAP_DB
    assert b.psnr is None
    assert len(a.fps_runs) == 2 and all(f > 0 for f in a.fps_runs)
    assert a.fps_mean == pytest.approx(float(np.median(a.fps_runs)))
    assert a.n_gaussians == 200
    assert a.deformation == "analytic"


def test_bench_rejects_bad_arguments():
    cloud = random_cloud(np.random.default_rng(2), 2)
    with pytest.raises(ConfigurationError):
        bench_render(cloud, IdentityField(), [make_view()], iters=0)
    with pytest.raises(ConfigurationError):
        bench_render(cloud, IdentityField(), [])


@pytest.mark.slow
def test_a_tenth_of_the_gaussians_renders_at_least_twice_as_fast():
    views = [make_view(width=64, height=64, focal=80.0, timestamp=t) for t in (0.0, 0.5)]
    cloud = random_cloud(np.random.default_rng(4), 3000)
    small = cloud.subset(np.arange(0, 3000, 10))
    full = bench_render(cloud, IdentityField(), views, warmup=1, iters=3)
    tenth = bench_render(small, IdentityField(), views, warmup=1, iters=3)
    assert tenth.n_gaussians == 300
    assert tenth.fps_mean >= 2.0 * full.fps_mean
