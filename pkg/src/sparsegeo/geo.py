"""Dense rasters, resampling, entropy and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from enum import Enum

import numpy as np

from .errors import EmptyEvaluation, InvalidArgument, InvalidInput


class MapKind(str, Enum):
    RGB = "rgb"
    DEPTH = "depth"
    POINTMAP = "pointmap"
    LOGITS = "logits"
    ENTROPY = "entropy"


_FIXED_CHANNELS = {MapKind.DEPTH: 1, MapKind.POINTMAP: 3, MapKind.ENTROPY: 1}


@dataclass(frozen=True, eq=False)
class DenseMap:
    """Row-major H x W x C raster. ``values`` is stored read-only."""

    values: np.ndarray
    kind: MapKind

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise InvalidArgument(f"DenseMap needs shape (H, W, C) with positive dims, got {v.shape}")
        if v.dtype not in (np.float32, np.float64):
            v = v.astype(np.float64)
        kind = MapKind(self.kind)
        want = _FIXED_CHANNELS.get(kind)
        if want is not None and v.shape[2] != want:
            raise InvalidArgument(f"{kind.value} map must have {want} channel(s), got {v.shape[2]}")
        if kind is MapKind.ENTROPY and v.size and (v.min() < 0.0 or v.max() > 1.0):
            raise InvalidInput("entropy map values must lie in [0, 1]")
        if v.flags.writeable or not v.flags.c_contiguous:
            v = np.array(v, order="C", copy=True)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "kind", kind)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    @property
    def precision(self) -> str:
        return "single" if self.values.dtype == np.float32 else "double"

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray) -> "DenseMap":
        return DenseMap(values, self.kind)

    def equals(self, other: "DenseMap") -> bool:
        """Bitwise equality of kind, shape, dtype and values."""
        return (
            self.kind is other.kind
            and self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(frozen=True, eq=False)
class ValidityMask:
    bits: np.ndarray

    def __post_init__(self):
        b = np.array(self.bits, dtype=bool)
        if b.ndim == 3 and b.shape[2] == 1:
            b = b[:, :, 0]
        if b.ndim != 2:
            raise InvalidArgument(f"mask must be 2-D, got shape {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "bits", b)

    @classmethod
    def full(cls, height: int, width: int) -> "ValidityMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float = math.nan
    rmse: float = math.nan
    delta_half: float = math.nan
    accuracy: float = math.nan
    completeness: float = math.nan
    overall: float = math.nan
    valid_count: int = 0

    def to_text(self) -> str:
        """Flat ``metric=value`` form, one per line; unset metrics are skipped."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and math.isnan(v):
                continue
            lines.append(f"{f.name}={v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        kw = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            kw[key] = int(val) if key == "valid_count" else float(val)
        return cls(**kw)


# ---------------------------------------------------------------------------
# resampling


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix of overlap fractions; rows sum to one."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        i0, i1 = int(math.floor(lo)), min(int(math.ceil(hi)), n_in)
        for i in range(i0, i1):
            w[o, i] = min(hi, i + 1) - max(lo, i)
    return w / w.sum(axis=1, keepdims=True)


def lowres_shape(height: int, width: int, long_side: int) -> tuple[int, int]:
    long = max(height, width)
    if long_side < 1 or long_side > long:
        raise InvalidArgument(f"long_side must be in [1, {long}], got {long_side}")
    short = max(1, int(math.floor(min(height, width) * long_side / long + 0.5)))
    return (long_side, short) if height >= width else (short, long_side)


def downsample_area(img: DenseMap, long_side: int) -> DenseMap:
    """Area-average ``img`` so that its longer side becomes ``long_side``."""
    out_h, out_w = lowres_shape(img.height, img.width, long_side)
    ry = _area_weights(img.height, out_h)
    rx = _area_weights(img.width, out_w)
    v = img.values.astype(np.float64)
    out = np.einsum("oh,hwc,pw->opc", ry, v, rx, optimize=True)
    return DenseMap(out.astype(img.values.dtype), img.kind)


def upsample_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out, dtype=np.int64) * n_in) // n_out


def upsample_nearest(m: DenseMap, out_h: int, out_w: int) -> DenseMap:
    if out_h < 1 or out_w < 1:
        raise InvalidArgument("output dimensions must be positive")
    if out_h < m.height or out_w < m.width:
        raise InvalidArgument(
            f"upsample target {out_h}x{out_w} is smaller than source {m.height}x{m.width}"
        )
    if out_h == m.height and out_w == m.width:
        return DenseMap(m.values.copy(), m.kind)
    rows = upsample_index(m.height, out_h)
    cols = upsample_index(m.width, out_w)
    return DenseMap(m.values[rows[:, None], cols[None, :]], m.kind)


# ---------------------------------------------------------------------------
# entropy


def normalized_entropy(logits: np.ndarray) -> np.ndarray:
    """Softmax entropy over the last axis divided by log(C).

    Works on any leading shape; computed in float64.
    """
    z = np.asarray(logits, dtype=np.float64)
    c = z.shape[-1]
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=-1, keepdims=True)
    q = ez / s
    # -sum q log q with log q = z - log s; zero-probability terms vanish
    h = np.log(s[..., 0]) - (q * z).sum(axis=-1)
    return np.clip(h / math.log(c), 0.0, 1.0)


def normalized_entropy_backward(logits: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Gradient of ``normalized_entropy`` w.r.t. the logits (clipping ignored)."""
    z = np.asarray(logits, dtype=np.float64)
    c = z.shape[-1]
    z = z - z.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    s = ez.sum(axis=-1, keepdims=True)
    q = ez / s
    logq = z - np.log(s)
    h = -(q * logq).sum(axis=-1, keepdims=True)
    # dH/dz_j = -q_j (log q_j + H)
    return -q * (logq + h) * (np.asarray(grad_out, dtype=np.float64)[..., None] / math.log(c))


def compute_entropy(logits: DenseMap) -> DenseMap:
    if logits.channels < 2:
        raise InvalidArgument("entropy needs at least 2 logit channels")
    v = logits.values
    bad = ~np.isfinite(v)
    if bad.any():
        r, c, _ = np.argwhere(bad)[0]
        raise InvalidInput(f"non-finite logit at pixel ({r}, {c})")
    return DenseMap(normalized_entropy(v)[:, :, None], MapKind.ENTROPY)


# ---------------------------------------------------------------------------
# depth metrics


def delta_threshold() -> float:
    return 1.25**0.5


def depth_metrics(pred: DenseMap, gt: DenseMap, mask: ValidityMask | None = None) -> MetricReport:
    if pred.shape != gt.shape:
        raise InvalidArgument(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is None:
        mask = ValidityMask.full(gt.height, gt.width)
    if (mask.height, mask.width) != (gt.height, gt.width):
        raise InvalidArgument("mask dimensions do not match the depth maps")
    return depth_metrics_arrays(pred.values[:, :, 0], gt.values[:, :, 0], mask.bits)


def depth_metrics_arrays(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> MetricReport:
    """Metrics over ``valid`` pixels of same-shaped depth arrays."""
    p = np.asarray(pred, dtype=np.float64)[valid]
    g = np.asarray(gt, dtype=np.float64)[valid]
    if g.size == 0:
        raise EmptyEvaluation("no valid pixels to evaluate")
    if (g <= 0).any():
        idx = np.argwhere(np.asarray(valid) & (np.asarray(gt) <= 0))[0]
        raise InvalidInput(f"ground-truth depth <= 0 at valid pixel {tuple(int(i) for i in idx)}")
    diff = p - g
    abs_rel = float(np.mean(np.abs(diff) / g))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta = float(np.mean(ratio < delta_threshold()))
    return MetricReport(abs_rel=abs_rel, rmse=rmse, delta_half=delta, valid_count=int(g.size))


# ---------------------------------------------------------------------------
# pointmap metrics


def _pair_dist(q: np.ndarray, r: np.ndarray) -> np.ndarray:
    # one fixed formula so brute force and the grid agree bit for bit
    dx = q[:, None, 0] - r[None, :, 0]
    dy = q[:, None, 1] - r[None, :, 1]
    dz = q[:, None, 2] - r[None, :, 2]
    return np.sqrt(dx * dx + dy * dy + dz * dz)


def nearest_distance_brute(queries: np.ndarray, refs: np.ndarray, chunk: int = 2048) -> np.ndarray:
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    out = np.empty(len(q))
    for s in range(0, len(q), chunk):
        out[s : s + chunk] = _pair_dist(q[s : s + chunk], r).min(axis=1)
    return out


def _default_cell(refs: np.ndarray) -> float:
    ext = float(np.max(refs.max(axis=0) - refs.min(axis=0)))
    if ext == 0.0:
        return 1.0
    # points from pointmaps lie on surfaces, so size cells by area density
    return ext / max(1.0, math.sqrt(len(refs)) / 2.0)


def nearest_distance_grid(queries: np.ndarray, refs: np.ndarray, cell: float | None = None) -> np.ndarray:
    """Exact nearest-neighbour distances using a uniform hash grid.

    Candidate cells are visited in growing Chebyshev rings; a query is final once
    its best distance is no larger than the radius already fully covered.
    """
    q = np.asarray(queries, dtype=np.float64)
    r = np.asarray(refs, dtype=np.float64)
    if cell is None:
        cell = _default_cell(r)
    origin = r.min(axis=0)
    rc = np.floor((r - origin) / cell).astype(np.int64)
    qc = np.floor((q - origin) / cell).astype(np.int64)
    lo = min(rc.min(), qc.min()) - 1
    span = max(rc.max(), qc.max()) - lo + 2
    key = lambda c: ((c[:, 0] - lo) * span + (c[:, 1] - lo)) * span + (c[:, 2] - lo)  # noqa: E731
    rk = key(rc)
    order = np.argsort(rk, kind="stable")
    rk_sorted = rk[order]
    r_sorted = r[order]
    cell_keys, starts, counts = np.unique(rk_sorted, return_index=True, return_counts=True)

    best = np.full(len(q), np.inf)
    pending = np.arange(len(q))
    max_ring = int(span)
    ring = 0
    while len(pending) and ring <= max_ring:
        offs = _ring_offsets(ring)
        qcp = qc[pending]
        for off in offs:
            cells = qcp + off
            inside = ((cells - lo >= 0) & (cells - lo < span)).all(axis=1)
            k = key(cells)
            pos = np.searchsorted(cell_keys, k)
            pos_c = np.minimum(pos, len(cell_keys) - 1)
            hit = inside & (cell_keys[pos_c] == k)
            if not hit.any():
                continue
            qi = pending[hit]
            st = starts[pos_c[hit]]
            ct = counts[pos_c[hit]]
            # expand (query, cell) into (query, point) pairs
            rep_q = np.repeat(qi, ct)
            first = np.repeat(np.cumsum(ct) - ct, ct)
            pts = np.repeat(st, ct) + (np.arange(ct.sum()) - first)
            d = np.sqrt(
                (q[rep_q, 0] - r_sorted[pts, 0]) * (q[rep_q, 0] - r_sorted[pts, 0])
                + (q[rep_q, 1] - r_sorted[pts, 1]) * (q[rep_q, 1] - r_sorted[pts, 1])
                + (q[rep_q, 2] - r_sorted[pts, 2]) * (q[rep_q, 2] - r_sorted[pts, 2])
            )
            np.minimum.at(best, rep_q, d)
        done = best[pending] <= ring * cell
        pending = pending[~done]
        ring += 1
    return best


def _ring_offsets(ring: int) -> np.ndarray:
    if ring == 0:
        return np.zeros((1, 3), dtype=np.int64)
    rng = np.arange(-ring, ring + 1)
    g = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
    return g[np.abs(g).max(axis=1) == ring]


def pointmap_metrics(pred: np.ndarray, gt: np.ndarray, accelerate: bool = False) -> MetricReport:
    """Accuracy (pred -> gt), completeness (gt -> pred) and their mean."""
    p = np.asarray(pred, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        raise EmptyEvaluation("point sets must be non-empty")
    nn = nearest_distance_grid if accelerate else nearest_distance_brute
    acc = float(np.mean(nn(p, g)))
    comp = float(np.mean(nn(g, p)))
    return MetricReport(
        accuracy=acc, completeness=comp, overall=(acc + comp) / 2.0, valid_count=len(p)
    )
