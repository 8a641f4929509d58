import numpy as np
import pytest

from speede_ctl.general.general import DimensionMismatchError
from speede_ctl.general.metrics import (
    PSNR_CAP_DB,
    gaussian_window,
    grouping_purity,
    psnr,
    ssim,
    ssim_gradient,
)


def naive_ssim(a, b, size=11, sigma=1.5):
    """Literal sliding window SSIM over valid windows, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01**2, 0.03**2
    values = []
    for c in range(a.shape[2]):
        for i in range(a.shape[0] - size + 1):
            for j in range(a.shape[1] - size + 1):
                pa = a[i:i + size, j:j + size, c]
                pb = b[i:i + size, j:j + size, c]
                mu_a = np.sum(w * pa)
                mu_b = np.sum(w * pb)
                var_a = np.sum(w * (pa - mu_a) ** 2)
                var_b = np.sum(w * (pb - mu_b) ** 2)
                cov = np.sum(w * (pa - mu_a) * (pb - mu_b))
                values.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
    return float(np.mean(values))


def test_psnr_identical_is_capped():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == PSNR_CAP_DB


def test_psnr_constant_offset():
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.1)) == pytest.approx(20.0)


def test_psnr_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_gaussian_window_normalised():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0)


def test_ssim_identical():
    a = np.random.default_rng(1).uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)


def test_ssim_anticorrelated_binary_image():
    a = (np.random.default_rng(2).uniform(size=(16, 16, 3)) > 0.5).astype(np.float64)
    assert ssim(a, 1.0 - a) < 0.0


@pytest.mark.parametrize("seed", range(3))
def test_ssim_matches_naive_reference(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(16, 16, 3))
    b = rng.uniform(size=(16, 16, 3))
    assert abs(ssim(a, b) - naive_ssim(a, b)) < 1e-9


def test_ssim_needs_a_full_window():
    with pytest.raises(DimensionMismatchError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = rng.uniform(size=(13, 12, 2))
    y = rng.uniform(size=(13, 12, 2))
    value, grad = ssim_gradient(x, y)
    assert value == pytest.approx(ssim(x, y))
    eps = 1e-6
    for idx in [(0, 0, 0), (6, 5, 1), (12, 11, 0), (3, 9, 1)]:
        plus = x.copy()
        plus[idx] += eps
        minus = x.copy()
        minus[idx] -= eps
        numeric = (ssim(plus, y) - ssim(minus, y)) / (2 * eps)
        assert grad[idx] == pytest.approx(numeric, rel=1e-5, abs=1e-10)


def test_purity_perfect():
    labels = np.array([0, 0, 1, 1, 2])
    assert grouping_purity(labels, labels) == 1.0


def test_purity_is_label_permutation_invariant():
    assert grouping_purity(np.array([2, 2, 0, 0]), np.array([0, 0, 1, 1])) == 1.0


def test_purity_single_group_over_two_clusters():
    assert grouping_purity(np.zeros(6, dtype=int), np.array([0, 0, 0, 1, 1, 1])) == 0.5


def test_purity_length_mismatch():
    with pytest.raises(DimensionMismatchError):
        grouping_purity(np.zeros(3), np.zeros(4))
