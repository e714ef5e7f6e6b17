"""Synthetic scenes and a synthetic frozen backbone.

Scenes are a tilted background plane with flat objects (rectangles, ellipses,
thin bars) composited by z-buffer. The backbone area-downsamples the ground
truth, adds seeded noise and emits pseudo-logits: the log of a per-cell
histogram of ground-truth depths, so cells that straddle a depth
discontinuity are multimodal and get high entropy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from ..geo import DenseMap, MapKind, ValidityMask, _area_weights, downsample_area, lowres_shape

SHAPES = ("rect", "ellipse", "bar")
HIST_FLOOR = 1e-6
LIGHT = np.array([-0.4, -0.5, 0.77])


@dataclass(frozen=True, eq=False)
class SceneSample:
    rgb: DenseMap
    gt_geo: DenseMap
    mask: ValidityMask
    seed: int

    def __post_init__(self):
        hw = (self.rgb.height, self.rgb.width)
        if (self.gt_geo.height, self.gt_geo.width) != hw or (self.mask.height, self.mask.width) != hw:
            raise InvalidArgument("scene maps have mismatched dimensions")

    @property
    def depth(self) -> np.ndarray:
        """H x W depth (the z channel for pointmaps)."""
        return self.gt_geo.values[:, :, -1]


@dataclass(frozen=True, eq=False)
class BackboneOutput:
    coarse_lr: DenseMap
    logits_lr: DenseMap
    long_side_used: int

    def __post_init__(self):
        if (self.coarse_lr.height, self.coarse_lr.width) != (self.logits_lr.height, self.logits_lr.width):
            raise InvalidArgument("coarse and logit maps must share their resolution")
        if self.logits_lr.channels < 2:
            raise InvalidArgument("backbone logits need at least two channels")


def _object_mask(kind, rng, yy, xx, h, w):
    if kind == "rect":
        hh = int(rng.integers(max(2, h // 16), max(3, h // 3)))
        ww = int(rng.integers(max(2, w // 16), max(3, w // 3)))
        r0 = int(rng.integers(0, h - hh + 1))
        c0 = int(rng.integers(0, w - ww + 1))
        return (yy >= r0) & (yy < r0 + hh) & (xx >= c0) & (xx < c0 + ww)
    if kind == "ellipse":
        ry, rx = rng.uniform(h / 32, h / 6), rng.uniform(w / 32, w / 6)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    # thin bar of width 1-3 px at a random angle
    width = int(rng.integers(1, 4))
    ang = rng.uniform(0, np.pi)
    cy, cx = rng.uniform(0, h), rng.uniform(0, w)
    length = rng.uniform(min(h, w) / 6, min(h, w) / 2)
    across = -(xx - cx) * np.sin(ang) + (yy - cy) * np.cos(ang)
    along = (xx - cx) * np.cos(ang) + (yy - cy) * np.sin(ang)
    return (np.abs(across) <= width / 2) & (np.abs(along) <= length / 2)


def synth_scene(seed: int, h: int = 512, w: int = 512, n_objects: int = 12, *,
                shapes=SHAPES, ramp: bool = True, geometry: str = "depth",
                invalid_fraction: float = 0.0) -> SceneSample:
    if h < 32 or w < 32:
        raise InvalidArgument(f"scene must be at least 32x32, got {h}x{w}")
    if n_objects < 1:
        raise InvalidArgument("need at least one object")
    if geometry not in ("depth", "pointmap"):
        raise InvalidArgument(f"unknown geometry {geometry!r}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)

    # background plane between 6 and 8 units
    if ramp:
        gy, gx = rng.uniform(-1, 1, 2)
        if abs(gy) + abs(gx) < 1e-3:
            gy = 1.0
        plane = gy * yy / h + gx * xx / w
        plane = (plane - plane.min()) / (plane.max() - plane.min())
        depth = 6.0 + 2.0 * plane
        slope_y, slope_x = 2.0 * gy / (h * (abs(gy) + abs(gx))), 2.0 * gx / (w * (abs(gy) + abs(gx)))
    else:
        depth = np.full((h, w), 7.0)
        slope_y = slope_x = 0.0
    label = np.zeros((h, w), dtype=np.int64)

    zs: list[float] = []
    for i in range(n_objects):
        kind = shapes[int(rng.integers(0, len(shapes)))]
        m = _object_mask(kind, rng, yy, xx, h, w)
        for _ in range(100):
            z = float(rng.uniform(1.0, 5.5))
            if all(abs(z - o) >= 0.2 for o in zs):
                break
        zs.append(z)
        win = m & (z < depth)
        depth = np.where(win, z, depth)
        label = np.where(win, i + 1, label)

    albedo = rng.uniform(0.15, 0.95, (n_objects + 1, 3))
    # background normal follows the plane tilt (depth per pixel ~ focal-normalized slope)
    focal = float(max(h, w))
    n_bg = np.array([-slope_x * focal / 7.0, -slope_y * focal / 7.0, 1.0])
    n_bg /= np.linalg.norm(n_bg)
    light = LIGHT / np.linalg.norm(LIGHT)
    shade_bg = 0.35 + 0.65 * max(0.0, float(n_bg @ light))
    shade_obj = 0.35 + 0.65 * float(light[2])
    shade = np.where(label == 0, shade_bg, shade_obj)
    rgb = np.clip(albedo[label] * shade[:, :, None], 0.0, 1.0)

    valid = np.ones((h, w), dtype=bool)
    if invalid_fraction > 0:
        valid = rng.random((h, w)) >= invalid_fraction

    if geometry == "pointmap":
        X = (xx - (w - 1) / 2.0) / focal * depth
        Y = (yy - (h - 1) / 2.0) / focal * depth
        geo = DenseMap(np.stack([X, Y, depth], axis=-1), MapKind.POINTMAP)
    else:
        geo = DenseMap(depth[:, :, None], MapKind.DEPTH)
    return SceneSample(DenseMap(rgb, MapKind.RGB), geo, ValidityMask(valid), seed)


def depth_bins(depth: np.ndarray, valid: np.ndarray, k_bins: int) -> np.ndarray:
    """Bin index per pixel: K bin centres span [min, max]; each centre owns +-half a bin."""
    d = depth[valid]
    lo, hi = float(d.min()), float(d.max())
    if hi <= lo:
        return np.zeros(depth.shape, dtype=np.int64)
    u = (depth - lo) / (hi - lo) * (k_bins - 1)
    return np.clip(np.floor(u + 0.5), 0, k_bins - 1).astype(np.int64)


def histogram_logits(depth: np.ndarray, valid: np.ndarray, out_hw: tuple[int, int], k_bins: int) -> np.ndarray:
    """Log of the area-weighted depth-bin histogram of each low-resolution cell."""
    h, w = depth.shape
    ry = _area_weights(h, out_hw[0])
    rx = _area_weights(w, out_hw[1])
    bins = depth_bins(depth, valid, k_bins)
    onehot = (bins[:, :, None] == np.arange(k_bins)).astype(np.float64) * valid[:, :, None]
    counts = np.einsum("oh,hwk,pw->opk", ry, onehot, rx, optimize=True)
    total = counts.sum(axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        hist = np.where(total > 0, counts / np.where(total > 0, total, 1.0), 1.0 / k_bins)
    return np.log(np.maximum(hist, HIST_FLOOR))


def synthetic_backbone(scene: SceneSample, long_side: int, k_bins: int = 4, noise_sigma: float = 0.01,
                       seed: int = 0) -> BackboneOutput:
    if k_bins < 2:
        raise InvalidArgument("k_bins must be >= 2")
    valid = scene.mask.bits
    depth = scene.depth
    coarse = downsample_area(scene.gt_geo, long_side)
    if noise_sigma > 0:
        d = depth[valid]
        rng = np.random.default_rng(seed)
        sigma = noise_sigma * float(d.max() - d.min())
        noisy = coarse.values + rng.normal(0.0, sigma, coarse.values.shape)
        coarse = DenseMap(noisy.astype(coarse.values.dtype), coarse.kind)
    out_hw = lowres_shape(scene.gt_geo.height, scene.gt_geo.width, long_side)
    logits = histogram_logits(depth, valid, out_hw, k_bins)
    return BackboneOutput(coarse, DenseMap(logits, MapKind.LOGITS), long_side)


def default_long_side(height: int, width: int) -> int:
    """Backbone resolution at one eighth of the input's long side (2048 -> 256)."""
    return max(1, max(height, width) // 8)


def boundary_fraction(depth: np.ndarray, rel_jump: float = 0.05) -> float:
    """Fraction of pixels with a 4-neighbour depth jump above rel_jump * depth range."""
    thr = rel_jump * float(depth.max() - depth.min())
    b = np.zeros(depth.shape, dtype=bool)
    dv = np.abs(np.diff(depth, axis=0)) > thr
    dh = np.abs(np.diff(depth, axis=1)) > thr
    b[1:] |= dv
    b[:-1] |= dv
    b[:, 1:] |= dh
    b[:, :-1] |= dh
    return float(b.mean())
