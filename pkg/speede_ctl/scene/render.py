"""CPU reference splat renderer

EWA projection of the 3D Gaussians, front-to-back alpha compositing over
fixed 16×16 pixel tiles and the analytic backward pass needed by the
sensitivity score (gradient with respect to the per-pixel footprint value
g_i) and by fine-tuning (DC color and opacity).
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, TypeVar

import numpy as np

from ..general.general import LOGGER, DimensionMismatchError
from ..general.metrics import check_same_shape, ssim, ssim_gradient
from ..general.rotations import quaternion_to_matrix
from .gaussian import SH_C0, GaussianCloud, TrainingView, sigmoid

NEAR_PLANE = 0.2
COV2D_DILATION = 0.3
ALPHA_MAX = 0.999
T_MIN = 1e-4
SIGMA_EXTENT = 3.0
TILE_SIZE = 16
CHUNK_SIZE = 512

DEFAULT_SSIM_WEIGHT = 0.2

# Images are H×W×3 float64 arrays, row-major, values in [0,1].
Image = np.ndarray

R = TypeVar("R")


@dataclass(frozen=True)
class Splat2D:
    mean2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    color: np.ndarray
    alpha: float
    source_index: int


@dataclass
class SplatBatch:
    """Projected splats, sorted front to back by (depth, source_index)."""

    mean2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    raw_color: np.ndarray
    alpha: np.ndarray
    bbox: np.ndarray
    source_index: np.ndarray
    n_input: int

    @property
    def n_culled(self) -> int:
        return self.n_input - len(self)

    def __len__(self) -> int:
        return self.depth.shape[0]

    def __getitem__(self, i: int) -> Splat2D:
        a, b, c = self.conic[i]
        return Splat2D(
            self.mean2d[i].copy(),
            np.array([[a, b], [b, c]]),
            float(self.depth[i]),
            self.color[i].copy(),
            float(self.alpha[i]),
            int(self.source_index[i]),
        )

    def __iter__(self) -> Iterator[Splat2D]:
        return (self[i] for i in range(len(self)))


def project(frame: GaussianCloud, view: TrainingView) -> SplatBatch:
    """Project a (deformed) frame into the view and cull invisible Gaussians."""
    n = len(frame)
    w = view.rotation
    t_cam = frame.means.astype(np.float64) @ w.T + view.translation
    depth = t_cam[:, 2]
    visible = depth > NEAR_PLANE
    z = np.where(visible, depth, 1.0)
    x, y = t_cam[:, 0], t_cam[:, 1]

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = view.fx / z
    jac[:, 0, 2] = -view.fx * x / z**2
    jac[:, 1, 1] = view.fy / z
    jac[:, 1, 2] = -view.fy * y / z**2

    rot = quaternion_to_matrix(frame.rotations)
    m = rot * frame.activated_scales()[:, None, :]
    cov3d = m @ np.swapaxes(m, 1, 2)
    t = jac @ w
    cov2d = t @ cov3d @ np.swapaxes(t, 1, 2)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    visible &= det > 0
    det = np.where(visible, det, 1.0)
    conic = np.stack([c / det, -b / det, a / det], axis=1)

    mean2d = np.stack([view.fx * x / z + view.cx, view.fy * y / z + view.cy], axis=1)
    rx = SIGMA_EXTENT * np.sqrt(np.maximum(a, 0.0))
    ry = SIGMA_EXTENT * np.sqrt(np.maximum(c, 0.0))
    with np.errstate(invalid="ignore"):
        x0 = np.maximum(np.ceil(mean2d[:, 0] - rx), 0)
        x1 = np.minimum(np.floor(mean2d[:, 0] + rx), view.width - 1)
        y0 = np.maximum(np.ceil(mean2d[:, 1] - ry), 0)
        y1 = np.minimum(np.floor(mean2d[:, 1] + ry), view.height - 1)
    visible &= np.isfinite(mean2d).all(axis=1) & (x0 <= x1) & (y0 <= y1)

    alpha = np.minimum(frame.activated_opacities(), ALPHA_MAX)
    visible &= alpha > 0
    raw_color = SH_C0 * frame.sh_colors[:, 0, :].astype(np.float64) + 0.5

    idx = np.nonzero(visible)[0]
    order = idx[np.lexsort((idx, depth[idx]))]
    bbox = np.stack([x0, x1, y0, y1], axis=1)[order].astype(np.int64)
    LOGGER.debug(f"Projected {order.size} of {n} Gaussians ({n - order.size} culled)")
    return SplatBatch(
        mean2d[order],
        conic[order],
        depth[order],
        np.clip(raw_color[order], 0.0, 1.0),
        raw_color[order],
        alpha[order],
        bbox,
        order.astype(np.int64),
        n,
    )


def gaussian_value(splat: Splat2D, pixel: np.ndarray) -> float:
    """Footprint value g = exp(-0.5 dᵀ Σ⁻¹ d) of a splat at a pixel."""
    d = np.asarray(pixel, dtype=np.float64) - splat.mean2d
    return float(np.exp(-0.5 * d @ splat.inv_cov2d @ d))


@dataclass
class _Tile:
    x0: int
    x1: int
    y0: int
    y1: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.y1 - self.y0, self.x1 - self.x0


@dataclass
class _TileResult:
    color: np.ndarray
    transmittance: np.ndarray
    indices: np.ndarray | None = None
    footprint: np.ndarray | None = None
    d_color: np.ndarray | None = None
    d_alpha: np.ndarray | None = None


def _tiles(view: TrainingView) -> list[_Tile]:
    return [
        _Tile(x, min(x + TILE_SIZE, view.width), y, min(y + TILE_SIZE, view.height))
        for y in range(0, view.height, TILE_SIZE)
        for x in range(0, view.width, TILE_SIZE)
    ]


def _run_tiles(fn: Callable[[_Tile], R], tiles: list[_Tile], threads: int) -> list[R]:
    """Apply fn to every tile; results come back in tile order."""
    if threads <= 1 or len(tiles) <= 1:
        return [fn(tile) for tile in tiles]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, tiles))


class _TileRasterizer:
    """Forward and backward compositing of one tile."""

    def __init__(
        self,
        batch: SplatBatch,
        tile: _Tile,
        footprint_offset: tuple[int, float] | None = None,
    ) -> None:
        self.batch = batch
        bb = batch.bbox
        hit = (bb[:, 0] < tile.x1) & (bb[:, 1] >= tile.x0) & (bb[:, 2] < tile.y1) & (bb[:, 3] >= tile.y0)
        self.idx = np.nonzero(hit)[0]
        ys, xs = np.mgrid[tile.y0:tile.y1, tile.x0:tile.x1]
        self.px = xs.ravel().astype(np.float64)
        self.py = ys.ravel().astype(np.float64)
        self.footprint_offset = footprint_offset
        self.t_starts: list[np.ndarray] = []

    def _chunks(self) -> list[np.ndarray]:
        return [self.idx[i:i + CHUNK_SIZE] for i in range(0, self.idx.size, CHUNK_SIZE)]

    def _footprint(self, sel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        b = self.batch
        dx = self.px[None, :] - b.mean2d[sel, 0:1]
        dy = self.py[None, :] - b.mean2d[sel, 1:2]
        conic = b.conic[sel]
        q = -0.5 * (conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy)
        bb = b.bbox[sel]
        support = (
            (self.px[None, :] >= bb[:, 0:1]) & (self.px[None, :] <= bb[:, 1:2])
            & (self.py[None, :] >= bb[:, 2:3]) & (self.py[None, :] <= bb[:, 3:4])
        )
        g = np.where(support, np.exp(q), 0.0)
        if self.footprint_offset is not None:
            source, eps = self.footprint_offset
            hit = b.source_index[sel] == source
            if hit.any():
                g[hit] += np.where(support[hit], eps, 0.0)
        return g, support

    def _composite(self, sel: np.ndarray, t_start: np.ndarray) -> tuple[np.ndarray, ...]:
        g, support = self._footprint(sel)
        a = self.batch.alpha[sel, None] * g
        one_minus = 1.0 - a
        after = t_start[None, :] * np.cumprod(one_minus, axis=0)
        before = np.concatenate([t_start[None, :], after[:-1]], axis=0)
        active = before >= T_MIN
        weight = np.where(active, a * before, 0.0)
        t_end = np.where(active[-1], after[-1], before[np.argmin(active, axis=0), np.arange(active.shape[1])])
        return g, support, a, before, active, weight, t_end

    def forward(self, background: np.ndarray) -> _TileResult:
        p = self.px.size
        color = np.zeros((p, 3))
        t = np.ones(p)
        self.t_starts = []
        for sel in self._chunks():
            self.t_starts.append(t)
            _, _, _, _, _, weight, t = self._composite(sel, t)
            color = color + (weight[:, :, None] * self.batch.color[sel, None, :]).sum(axis=0)
        return _TileResult(color + t[:, None] * background[None, :], t)

    def backward(
        self,
        background: np.ndarray,
        t_final: np.ndarray,
        grad_image: np.ndarray | None = None,
    ) -> _TileResult:
        """Reverse pass; footprint scores always, color/alpha grads with grad_image."""
        b = self.batch
        n = self.idx.size
        footprint = np.zeros(n)
        d_color = np.zeros((n, 3)) if grad_image is not None else None
        d_alpha = np.zeros(n) if grad_image is not None else None
        behind = t_final[:, None] * background[None, :]
        chunks = self._chunks()
        offset = n
        for sel, t_start in zip(reversed(chunks), reversed(self.t_starts)):
            offset -= sel.size
            g, support, a, before, active, weight, _ = self._composite(sel, t_start)
            contrib = weight[:, :, None] * b.color[sel, None, :]
            suffix = np.cumsum(contrib[::-1], axis=0)[::-1]
            after_sum = behind[None] + np.concatenate([suffix[1:], np.zeros_like(suffix[:1])], axis=0)
            # d I / d(alpha_i g_i), identical factor for g and alpha.
            d_ag = np.where(
                active[:, :, None],
                b.color[sel, None, :] * before[:, :, None] - after_sum / (1.0 - a)[:, :, None],
                0.0,
            )
            # g_i is pinned to 0 outside its support.
            d_g = np.where(support[:, :, None], b.alpha[sel, None, None] * d_ag, 0.0)
            part = slice(offset, offset + sel.size)
            footprint[part] = (d_g * d_g).sum(axis=(1, 2))
            if grad_image is not None:
                d_color[part] = (grad_image[None] * weight[:, :, None]).sum(axis=1)
                d_alpha[part] = (grad_image[None] * d_ag * g[:, :, None]).sum(axis=(1, 2))
            behind = behind + suffix[0]
        return _TileResult(
            np.zeros(0), t_final, self.batch.source_index[self.idx], footprint, d_color, d_alpha
        )


def _background(background: np.ndarray | None) -> np.ndarray:
    if background is None:
        return np.zeros(3)
    return np.asarray(background, dtype=np.float64).reshape(3)


def render(
    frame: GaussianCloud,
    view: TrainingView,
    background: np.ndarray | None = None,
    threads: int = 1,
    footprint_offset: tuple[int, float] | None = None,
) -> Image:
    """Composite the frame as seen from view into an H×W×3 image."""
    batch = project(frame, view)
    return render_batch(batch, view, background, threads, footprint_offset)


def render_batch(
    batch: SplatBatch,
    view: TrainingView,
    background: np.ndarray | None = None,
    threads: int = 1,
    footprint_offset: tuple[int, float] | None = None,
) -> Image:
    bg = _background(background)
    image = np.zeros((view.height, view.width, 3))

    def run(tile: _Tile) -> np.ndarray:
        return _TileRasterizer(batch, tile, footprint_offset).forward(bg).color

    tiles = _tiles(view)
    for tile, color in zip(tiles, _run_tiles(run, tiles, threads)):
        image[tile.y0:tile.y1, tile.x0:tile.x1] = color.reshape(*tile.shape, 3)
    return np.clip(image, 0.0, 1.0)


def _backward_tiles(
    batch: SplatBatch,
    view: TrainingView,
    bg: np.ndarray,
    threads: int,
    grad_image: np.ndarray | None,
) -> list[_TileResult]:
    def run(tile: _Tile) -> _TileResult:
        rasterizer = _TileRasterizer(batch, tile)
        fwd = rasterizer.forward(bg)
        grad = None
        if grad_image is not None:
            grad = grad_image[tile.y0:tile.y1, tile.x0:tile.x1].reshape(-1, 3)
        result = rasterizer.backward(bg, fwd.transmittance, grad)
        result.color = fwd.color
        return result

    return _run_tiles(run, _tiles(view), threads)


def footprint_gradients(
    frame: GaussianCloud,
    view: TrainingView,
    background: np.ndarray | None = None,
    threads: int = 1,
) -> np.ndarray:
    """Per Gaussian Σ_pixels Σ_channels (∂I(p)/∂g_i)², zero for culled Gaussians."""
    batch = project(frame, view)
    scores = np.zeros(len(frame))
    for result in _backward_tiles(batch, view, _background(background), threads, None):
        np.add.at(scores, result.indices, result.footprint)
    return scores


def loss_gradient(rendered: Image, gt: Image, ssim_weight: float) -> tuple[float, np.ndarray]:
    """Loss value and ∂L/∂I for (1-λ)·L1 + λ·(1-SSIM)/2."""
    check_same_shape(rendered, gt)
    diff = np.asarray(rendered, np.float64) - np.asarray(gt, np.float64)
    value = (1.0 - ssim_weight) * float(np.mean(np.abs(diff)))
    grad = (1.0 - ssim_weight) * np.sign(diff) / diff.size
    if ssim_weight > 0.0:
        s, d_ssim = ssim_gradient(rendered, gt)
        value += ssim_weight * (1.0 - s) / 2.0
        grad = grad - 0.5 * ssim_weight * d_ssim
    return value, grad


def loss(rendered: Image, gt: Image, ssim_weight: float = DEFAULT_SSIM_WEIGHT) -> float:
    """(1-λ)·mean L1 + λ·(1-SSIM)/2."""
    check_same_shape(rendered, gt)
    diff = np.asarray(rendered, np.float64) - np.asarray(gt, np.float64)
    value = (1.0 - ssim_weight) * float(np.mean(np.abs(diff)))
    if ssim_weight > 0.0:
        value += ssim_weight * (1.0 - ssim(rendered, gt)) / 2.0
    return value


def color_opacity_gradients(
    frame: GaussianCloud,
    view: TrainingView,
    gt: Image,
    background: np.ndarray | None = None,
    ssim_weight: float = DEFAULT_SSIM_WEIGHT,
    threads: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """∂L/∂f_dc (N×3) and ∂L/∂opacity-logit (N) of loss(render(frame), gt)."""
    if np.shape(gt) != (view.height, view.width, 3):
        raise DimensionMismatchError(
            f"Ground truth is {np.shape(gt)}, view renders {(view.height, view.width, 3)}"
        )
    batch = project(frame, view)
    bg = _background(background)
    rendered = render_batch(batch, view, bg, threads)
    _, grad_image = loss_gradient(rendered, gt, ssim_weight)

    n = len(frame)
    d_color = np.zeros((n, 3))
    d_alpha = np.zeros(n)
    for result in _backward_tiles(batch, view, bg, threads, grad_image):
        np.add.at(d_color, result.indices, result.d_color)
        np.add.at(d_alpha, result.indices, result.d_alpha)

    raw = SH_C0 * frame.sh_colors[:, 0, :].astype(np.float64) + 0.5
    d_f_dc = np.where((raw > 0.0) & (raw < 1.0), d_color * SH_C0, 0.0)
    sig = sigmoid(frame.opacities)
    d_opacity = np.where(sig < ALPHA_MAX, d_alpha * sig * (1.0 - sig), 0.0)
    return d_f_dc, d_opacity


def n_tiles(view: TrainingView) -> int:
    return math.ceil(view.width / TILE_SIZE) * math.ceil(view.height / TILE_SIZE)
