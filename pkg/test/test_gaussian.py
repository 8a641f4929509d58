import os

import numpy as np
import pytest
from plyfile import PlyData, PlyElement

from speede_ctl.general.general import (
    CloudValidationError,
    ConfigurationError,
    PlyFormatError,
    SpeedeError,
)
from speede_ctl.scene.gaussian import (
    SH_C0,
    GaussianCloud,
    TrainingView,
    load_cameras,
    load_ply,
    look_at,
    ply_bytes,
    save_cameras,
    save_ply,
    validate,
)

from conftest import make_cloud, make_view


def float32_cloud(n: int = 5, sh_degree: int = 0, seed: int = 0) -> GaussianCloud:
    rng = np.random.default_rng(seed)
    k = (sh_degree + 1) ** 2
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return GaussianCloud(
        rng.normal(size=(n, 3)).astype(np.float32),
        rng.normal(-3.0, 0.5, size=(n, 3)).astype(np.float32),
        q.astype(np.float32),
        rng.normal(size=(n, k, 3)).astype(np.float32),
        rng.normal(size=n).astype(np.float32),
    )


def test_round_trip_is_bit_exact(tmp_path):
    cloud = float32_cloud(20)
    path = os.path.join(tmp_path, "cloud.ply")
    save_ply(cloud, path)
    loaded = load_ply(path)
    assert len(loaded) == 20
    assert loaded.equals(cloud)


def test_round_trip_keeps_higher_sh_bands(tmp_path):
    cloud = float32_cloud(4, sh_degree=3)
    path = os.path.join(tmp_path, "sh3.ply")
    save_ply(cloud, path)
    loaded = load_ply(path)
    assert loaded.sh_degree == 3
    assert loaded.sh_colors.shape == (4, 16, 3)
    assert loaded.equals(cloud)


def test_empty_cloud(tmp_path):
    path = os.path.join(tmp_path, "empty.ply")
    save_ply(GaussianCloud.empty(), path)
    loaded = load_ply(path)
    assert len(loaded) == 0
    assert loaded.sh_degree == 0


def test_single_gaussian_file_layout():
    payload = ply_bytes(float32_cloud(1))
    header_end = payload.index(b"end_header\n") + len(b"end_header\n")
    assert len(payload) == header_end + 17 * 4


def test_missing_opacity_property(tmp_path):
    names = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "scale_0", "scale_1", "scale_2",
             "rot_0", "rot_1", "rot_2", "rot_3"]
    data = np.zeros(2, dtype=[(n, "<f4") for n in names])
    data["rot_0"] = 1.0
    path = os.path.join(tmp_path, "no_opacity.ply")
    PlyData([PlyElement.describe(data, "vertex")], byte_order="<").write(path)
    with pytest.raises(PlyFormatError, match="missing required property"):
        load_ply(path)


def test_malformed_header_names_line(tmp_path):
    path = os.path.join(tmp_path, "bad.ply")
    with open(path, "wb") as f:
        f.write(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty floaty x\nend_header\n")
    with pytest.raises(PlyFormatError, match="line"):
        load_ply(path)


def test_non_finite_values_name_the_index(tmp_path):
    cloud = float32_cloud(4)
    means = cloud.means.copy()
    means[2, 1] = np.nan
    path = os.path.join(tmp_path, "nan.ply")
    save_ply(cloud.replace(means=means), path)
    with pytest.raises(CloudValidationError) as info:
        load_ply(path)
    assert info.value.indices == [2]


def test_load_renormalises_only_off_unit_quaternions(tmp_path):
    cloud = float32_cloud(3)
    rotations = cloud.rotations.copy()
    rotations[1] *= 2.0
    path = os.path.join(tmp_path, "quat.ply")
    save_ply(cloud.replace(rotations=rotations), path)
    loaded = load_ply(path)
    np.testing.assert_allclose(np.linalg.norm(loaded.rotations, axis=1), 1.0, atol=1e-6)
    assert loaded.rotations[0].tobytes() == cloud.rotations[0].tobytes()
    assert loaded.rotations[2].tobytes() == cloud.rotations[2].tobytes()


def test_unwritable_path(tmp_path):
    blocker = os.path.join(tmp_path, "file")
    with open(blocker, "w") as f:
        f.write("x")
    with pytest.raises(SpeedeError):
        save_ply(float32_cloud(1), os.path.join(blocker, "cloud.ply"))


def test_missing_file():
    with pytest.raises(SpeedeError):
        load_ply("/nonexistent/cloud.ply")


def test_validate_valid_cloud():
    report = validate(float32_cloud(6))
    assert report.ok
    assert report.issues == []


def test_validate_zero_norm_quaternion():
    cloud = float32_cloud(5)
    rotations = cloud.rotations.copy()
    rotations[3] = 0.0
    report = validate(cloud.replace(rotations=rotations))
    assert report.indices() == [3]
    assert report.issues[0].reason == "zero-norm quaternion"
    with pytest.raises(CloudValidationError):
        report.raise_if_invalid()


def test_validate_nan_mean():
    cloud = float32_cloud(3)
    means = cloud.means.copy()
    means[0, 0] = np.nan
    report = validate(cloud.replace(means=means))
    assert [i.kind for i in report.issues] == ["non-finite"]
    assert report.to_json()["ok"] is False


def test_validate_never_raises_on_garbage():
    cloud = float32_cloud(4)
    report = validate(cloud.replace(
        means=np.full((4, 3), np.inf, dtype=np.float32),
        rotations=np.zeros((4, 4), dtype=np.float32),
    ))
    assert not report.ok


def test_cloud_is_read_only():
    cloud = float32_cloud(2)
    with pytest.raises(ValueError):
        cloud.means[0, 0] = 1.0


def test_inconsistent_shapes():
    with pytest.raises(CloudValidationError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 4)), np.zeros((2, 1, 3)), np.zeros(2))


def test_subset_copies_parameters():
    cloud = float32_cloud(6)
    sub = cloud.subset(np.array([4, 1]))
    assert len(sub) == 2
    assert sub.means.tobytes() == cloud.means[[4, 1]].tobytes()


def test_from_rgb_activations():
    cloud = make_cloud([[0, 0, 1]], scale=0.25, rgb=[[0.2, 0.4, 0.6]], alpha=0.3)
    np.testing.assert_allclose(cloud.activated_scales(), 0.25)
    np.testing.assert_allclose(cloud.activated_opacities(), 0.3)
    np.testing.assert_allclose(cloud.dc_colors(), [[0.2, 0.4, 0.6]])
    np.testing.assert_allclose(cloud.sh_colors[0, 0], (np.array([0.2, 0.4, 0.6]) - 0.5) / SH_C0)


def test_dc_colors_clamped_at_zero():
    cloud = make_cloud([[0, 0, 1]], rgb=[[-0.5, 0.5, 1.5]])
    assert cloud.dc_colors()[0, 0] == 0.0
    assert cloud.dc_colors()[0, 2] == pytest.approx(1.5)


def test_view_rejects_non_orthonormal_rotation():
    with pytest.raises(ConfigurationError, match="orthonormal"):
        make_view(rotation=np.diag([1.0, 2.0, 1.0]))


def test_view_rejects_empty_image():
    with pytest.raises(ConfigurationError):
        make_view(width=0)


def test_look_at_centres_the_target():
    view = look_at(np.array([0.0, -5.0, 0.0]), np.zeros(3), np.array([0.0, 0.0, 1.0]), 32, 24, 60.0, 0.5)
    cam = view.rotation @ np.zeros(3) + view.translation
    np.testing.assert_allclose(cam, [0.0, 0.0, 5.0], atol=1e-12)
    np.testing.assert_allclose(view.camera_center(), [0.0, -5.0, 0.0], atol=1e-12)
    assert view.cx == 16.0 and view.cy == 12.0


def test_cameras_round_trip_resolves_relative_paths(tmp_path):
    views = [
        TrainingView(np.eye(3), [0.0, 0.0, 1.0], 10.0, 10.0, 4.0, 4.0, 8, 8, 0.25, "frames/0000.png"),
        make_view(timestamp=1.0),
    ]
    path = os.path.join(tmp_path, "cameras.json")
    save_cameras(views, path)
    loaded = load_cameras(path)
    assert loaded[0].image_path == os.path.join(str(tmp_path), "frames/0000.png")
    assert loaded[0].timestamp == 0.25
    np.testing.assert_array_equal(loaded[0].translation, [0.0, 0.0, 1.0])
    assert loaded[1].image_path == ""


def test_cameras_must_be_an_array(tmp_path):
    path = os.path.join(tmp_path, "cameras.json")
    with open(path, "w") as f:
        f.write('{"fx": 1}')
    with pytest.raises(ConfigurationError):
        load_cameras(path)
