"""Coordinate hashing, sparse tensors and kernel maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument

_SHIFT = np.int64(1) << np.int64(32)


def pack(coords: np.ndarray) -> np.ndarray:
    """Pack (row, col) pairs into int64 keys that sort lexicographically.

    Valid for |row|, |col| < 2**31.
    """
    c = np.asarray(coords, dtype=np.int64)
    return c[..., 0] * _SHIFT + c[..., 1]


class CoordIndex:
    """coordinate -> row lookup over a fixed coordinate set.

    Keys are kept sorted so vectorized lookups are a binary search; missing
    coordinates map to -1.
    """

    def __init__(self, coords: np.ndarray, assume_sorted: bool = False):
        keys = pack(coords)
        if assume_sorted and (len(keys) < 2 or (np.diff(keys) > 0).all()):
            order = np.arange(len(keys), dtype=np.int64)
            sorted_keys = keys
        else:
            order = np.argsort(keys, kind="stable")
            sorted_keys = keys[order]
            if len(sorted_keys) > 1 and (np.diff(sorted_keys) == 0).any():
                raise InvalidArgument("sparse coordinates must be unique")
        self._keys = sorted_keys
        self._rows = order

    def __len__(self) -> int:
        return len(self._keys)

    def lookup(self, coords: np.ndarray) -> np.ndarray:
        k = pack(coords)
        if len(self._keys) == 0:
            return np.full(k.shape, -1, dtype=np.int64)
        pos = np.searchsorted(self._keys, k)
        pos = np.minimum(pos, len(self._keys) - 1)
        hit = self._keys[pos] == k
        return np.where(hit, self._rows[pos], -1)

    def __getitem__(self, coord) -> int:
        row = int(self.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 2))[0])
        if row < 0:
            raise KeyError(tuple(coord))
        return row

    def __contains__(self, coord) -> bool:
        return int(self.lookup(np.asarray(coord, dtype=np.int64).reshape(1, 2))[0]) >= 0


class SparseTensor:
    """Active pixel sites at a power-of-two stride with one feature row per site."""

    def __init__(self, coords, feats, stride: int = 1, index: CoordIndex | None = None,
                 assume_sorted: bool = False):
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(feats)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.shape[0] != coords.shape[0]:
            raise InvalidArgument(f"{coords.shape[0]} coordinates but {feats.shape[0]} feature rows")
        if stride < 1 or stride & (stride - 1):
            raise InvalidArgument(f"stride must be a power of two, got {stride}")
        if stride > 1 and (coords % stride).any():
            raise InvalidArgument(f"coordinates are not divisible by stride {stride}")
        self.coords = coords
        self.feats = feats
        self.stride = stride
        self.index = index if index is not None else CoordIndex(coords, assume_sorted)

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def channels(self) -> int:
        return self.feats.shape[1]

    def replace_feats(self, feats) -> "SparseTensor":
        return SparseTensor(self.coords, feats, self.stride, index=self.index)


def kernel_offsets(kernel_size: int) -> np.ndarray:
    """Offsets (dy, dx) in row-major scan order."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise InvalidArgument(f"kernel size must be odd and positive, got {kernel_size}")
    r = kernel_size // 2
    d = np.arange(-r, r + 1)
    return np.stack(np.meshgrid(d, d, indexing="ij"), axis=-1).reshape(-1, 2).astype(np.int64)


@dataclass
class KernelMap:
    """Per-offset (input_row, output_row) pair lists.

    Within each offset, pairs are ordered by output row; offsets follow
    row-major scan order, so the accumulation order of a convolution is fixed.
    """

    kernel_size: int
    in_stride: int
    conv_stride: int
    n_out: int
    offsets: np.ndarray
    in_rows: list = field(default_factory=list)
    out_rows: list = field(default_factory=list)

    @property
    def out_stride(self) -> int:
        return self.in_stride * self.conv_stride

    def pairs(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        return self.in_rows[k], self.out_rows[k]

    def pair_counts(self) -> np.ndarray:
        return np.array([len(r) for r in self.in_rows], dtype=np.int64)

    @property
    def n_pairs(self) -> int:
        return int(self.pair_counts().sum())

    def pair_list(self) -> np.ndarray:
        """All pairs as rows (offset_index, input_row, output_row), sorted by output row then offset."""
        parts = [
            np.column_stack([np.full(len(i), k), i, o])
            for k, (i, o) in enumerate(zip(self.in_rows, self.out_rows))
        ]
        if not parts:
            return np.zeros((0, 3), dtype=np.int64)
        allp = np.concatenate(parts).astype(np.int64)
        return allp[np.lexsort((allp[:, 0], allp[:, 2]))]


def build_kernel_map(inp: SparseTensor, out_coords: np.ndarray, kernel_size: int,
                     conv_stride: int = 1) -> KernelMap:
    offsets = kernel_offsets(kernel_size)
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 2)
    s_out = inp.stride * conv_stride
    if s_out > 1 and (out_coords % s_out).any():
        raise InvalidArgument(f"output coordinates must be divisible by {s_out}")
    s_in = inp.stride
    km = KernelMap(kernel_size, s_in, conv_stride, len(out_coords), offsets)
    out_idx = np.arange(len(out_coords), dtype=np.int64)
    for off in offsets:
        rows = inp.index.lookup(out_coords + off * s_in)
        hit = rows >= 0
        km.in_rows.append(rows[hit])
        km.out_rows.append(out_idx[hit])
    return km


def downsample_coords(x: SparseTensor, factor: int = 2) -> np.ndarray:
    """Snap sites down onto the grid of spacing stride*factor; sorted and unique."""
    step = x.stride * factor
    snapped = x.coords - np.mod(x.coords, step)
    keys = np.unique(pack(snapped))
    out = np.empty((len(keys), 2), dtype=np.int64)
    out[:, 0] = np.floor_divide(keys + (_SHIFT // 2), _SHIFT)
    out[:, 1] = keys - out[:, 0] * _SHIFT
    return out


def parent_rows(fine: SparseTensor, coarse: SparseTensor) -> np.ndarray:
    """Row in ``coarse`` of the cell containing each ``fine`` site."""
    snapped = fine.coords - np.mod(fine.coords, coarse.stride)
    rows = coarse.index.lookup(snapped)
    if (rows < 0).any():
        raise InvalidArgument("coarse tensor is missing a parent cell")
    return rows
