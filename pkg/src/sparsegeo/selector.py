"""Pixel selection policies, context halo dilation and sparse input assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy import ndimage

from .errors import InvalidArgument
from .geo import DenseMap, MapKind
from .sparse.tensor import SparseTensor

LUMA = np.array([0.299, 0.587, 0.114])


class Policy(str, Enum):
    ENTROPY_THRESHOLD = "entropy_threshold"
    TOP_FRACTION = "top_fraction"
    RANDOM = "random"
    EDGE = "edge"


@dataclass(frozen=True, eq=False)
class PixelSelection:
    """Sorted, unique HR pixel coordinates with a core/halo flag per entry."""

    coords: np.ndarray
    is_core: np.ndarray
    source_policy: Policy
    height: int
    width: int
    alpha_used: float | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        core = np.asarray(self.is_core, dtype=bool).reshape(-1)
        if len(core) != len(c):
            raise InvalidArgument("is_core length differs from coordinate count")
        if len(c):
            if (c[:, 0] < 0).any() or (c[:, 0] >= self.height).any() or (c[:, 1] < 0).any() or (
                c[:, 1] >= self.width
            ).any():
                raise InvalidArgument("selection coordinate out of bounds")
            keys = c[:, 0] * self.width + c[:, 1]
            if (np.diff(keys) <= 0).any():
                raise InvalidArgument("selection coordinates must be sorted and unique")
        c.setflags(write=False)
        core.setflags(write=False)
        object.__setattr__(self, "coords", c)
        object.__setattr__(self, "is_core", core)
        object.__setattr__(self, "source_policy", Policy(self.source_policy))

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def core_coords(self) -> np.ndarray:
        return self.coords[self.is_core]

    @property
    def n_core(self) -> int:
        return int(self.is_core.sum())

    @property
    def n_halo(self) -> int:
        return len(self) - self.n_core

    def core_mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        cc = self.core_coords
        m[cc[:, 0], cc[:, 1]] = True
        return m

    def full_mask(self) -> np.ndarray:
        m = np.zeros((self.height, self.width), dtype=bool)
        m[self.coords[:, 0], self.coords[:, 1]] = True
        return m

    def to_array(self) -> np.ndarray:
        """N x 3 int32 rows of (row, col, is_core) for TensorFile storage."""
        return np.column_stack([self.coords, self.is_core.astype(np.int64)]).astype(np.int32)

    @classmethod
    def from_array(cls, arr: np.ndarray, height: int, width: int, policy=Policy.ENTROPY_THRESHOLD,
                   alpha: float | None = None) -> "PixelSelection":
        a = np.asarray(arr).reshape(-1, 3)
        return cls(a[:, :2], a[:, 2] != 0, policy, height, width, alpha)


def _from_mask(mask: np.ndarray, policy: Policy, alpha=None) -> PixelSelection:
    coords = np.argwhere(mask)  # row-major order == lexicographic
    return PixelSelection(coords, np.ones(len(coords), bool), policy, mask.shape[0], mask.shape[1], alpha)


def select_entropy(entropy: DenseMap, alpha: float) -> PixelSelection:
    """Core set = pixels whose normalized entropy is strictly above ``alpha``."""
    if not 0.0 <= alpha <= 1.0:
        raise InvalidArgument(f"alpha must be in [0, 1], got {alpha}")
    return _from_mask(entropy.values[:, :, 0] > alpha, Policy.ENTROPY_THRESHOLD, float(alpha))


def select_top_fraction(score: DenseMap | np.ndarray, fraction: float,
                        policy: Policy | str = Policy.TOP_FRACTION) -> PixelSelection:
    """Exactly round(fraction*H*W) pixels with the highest score.

    Ties go to the lexicographically smaller coordinate.
    """
    if not 0.0 < fraction <= 1.0:
        raise InvalidArgument(f"fraction must be in (0, 1], got {fraction}")
    s = score.values[:, :, 0] if isinstance(score, DenseMap) else np.asarray(score)
    h, w = s.shape
    k = int(math.floor(fraction * h * w + 0.5))
    flat = s.reshape(-1).astype(np.float64)
    # flat index order is lexicographic, so a stable sort on -score breaks ties correctly
    order = np.argsort(-flat, kind="stable")[:k]
    mask = np.zeros(h * w, dtype=bool)
    mask[order] = True
    return _from_mask(mask.reshape(h, w), Policy(policy))


def random_scores(height: int, width: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).random((height, width))


def edge_scores(rgb: DenseMap) -> np.ndarray:
    """Sobel gradient magnitude of ITU-R 601 luminance."""
    lum = rgb.values.astype(np.float64) @ LUMA
    gy = ndimage.sobel(lum, axis=0, mode="nearest")
    gx = ndimage.sobel(lum, axis=1, mode="nearest")
    return np.hypot(gx, gy)


def select_random(height: int, width: int, fraction: float, seed: int) -> PixelSelection:
    return select_top_fraction(random_scores(height, width, seed), fraction, Policy.RANDOM)


def select_edge(rgb: DenseMap, fraction: float) -> PixelSelection:
    return select_top_fraction(edge_scores(rgb), fraction, Policy.EDGE)


def selection_recall(score, error, fraction: float = 0.1) -> float:
    """Share of the top-``fraction`` error pixels that the top-``fraction`` score pixels cover."""
    picked = select_top_fraction(score, fraction).core_mask()
    worst = select_top_fraction(error, fraction).core_mask()
    n = int(worst.sum())
    if n == 0:
        raise InvalidArgument("fraction selects no pixels")
    return float((picked & worst).sum() / n)


def dilate_halo(sel: PixelSelection, radius: int) -> PixelSelection:
    """Add every pixel within Chebyshev distance ``radius`` of a core pixel as halo."""
    if radius < 0:
        raise InvalidArgument("halo radius must be >= 0")
    if radius == 0 or sel.n_core == 0:
        return sel
    core = sel.core_mask()
    grown = ndimage.binary_dilation(core, structure=np.ones((2 * radius + 1,) * 2, bool))
    full = grown | sel.full_mask()
    coords = np.argwhere(full)
    return PixelSelection(coords, core[coords[:, 0], coords[:, 1]], sel.source_policy,
                          sel.height, sel.width, sel.alpha_used)


def assemble_sparse_input(sel: PixelSelection, rgb: DenseMap, coarse: DenseMap, entropy: DenseMap,
                          dtype=np.float64) -> SparseTensor:
    """Per-site features ``[rgb | coarse geometry | entropy]`` in selection order."""
    hw = (sel.height, sel.width)
    for name, m in (("rgb", rgb), ("coarse", coarse), ("entropy", entropy)):
        if (m.height, m.width) != hw:
            raise InvalidArgument(f"{name} map is {m.height}x{m.width}, selection is {hw[0]}x{hw[1]}")
    if rgb.channels != 3 or entropy.kind is not MapKind.ENTROPY:
        raise InvalidArgument("expected a 3-channel rgb map and an entropy map")
    if len(sel) == 0:
        raise InvalidArgument("cannot assemble an empty selection")
    r, c = sel.coords[:, 0], sel.coords[:, 1]
    feats = np.concatenate(
        [rgb.values[r, c], coarse.values[r, c], entropy.values[r, c]], axis=1
    ).astype(dtype)
    return SparseTensor(sel.coords, feats, stride=1, assume_sorted=True)
