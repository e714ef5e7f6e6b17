"""Writers for refined maps: 16-bit PNG, raw TensorFile and ASCII PLY."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import InvalidArgument
from ..geo import DenseMap, MapKind, ValidityMask
from .tensorfile import write_tensor


def write_png16(path, dmap: DenseMap, mask: ValidityMask | None = None) -> dict:
    """Quantize a depth map to uint16 over its valid range; the range goes to a JSON sidecar.

    Invalid pixels are written as 0, valid ones span 1..65535.
    """
    if dmap.kind is not MapKind.DEPTH and dmap.channels != 1:
        raise InvalidArgument("PNG export takes single-channel depth maps")
    d = dmap.values[:, :, 0].astype(np.float64)
    valid = np.isfinite(d) if mask is None else (mask.bits & np.isfinite(d))
    if not valid.any():
        raise InvalidArgument("no valid pixels to export")
    lo, hi = float(d[valid].min()), float(d[valid].max())
    span = hi - lo if hi > lo else 1.0
    q = np.zeros(d.shape, dtype=np.uint16)
    q[valid] = (1 + np.round((d[valid] - lo) / span * 65534)).astype(np.uint16)
    Image.fromarray(q).save(path)  # uint16 arrays become mode I;16
    meta = {"min": lo, "max": hi, "invalid": 0, "levels": 65535}
    Path(str(path) + ".json").write_text(json.dumps(meta))
    return meta


def read_png16(path) -> np.ndarray:
    """Back to float depth (NaN where invalid) using the sidecar range."""
    meta = json.loads(Path(str(path) + ".json").read_text())
    q = np.asarray(Image.open(path)).astype(np.float64)
    span = meta["max"] - meta["min"] if meta["max"] > meta["min"] else 1.0
    d = meta["min"] + (q - 1) / 65534 * span
    d[q == 0] = np.nan
    return d


def write_raw(path, dmap: DenseMap):
    write_tensor(path, dmap.values)


def to_points(dmap: DenseMap, mask: ValidityMask | None = None, focal: float | None = None) -> np.ndarray:
    """Valid pixels as 3-D points. Depth maps are back-projected with a centred pinhole."""
    h, w = dmap.height, dmap.width
    valid = np.ones((h, w), bool) if mask is None else mask.bits
    if dmap.channels == 3:
        pts = dmap.values
    elif dmap.channels == 1:
        f = float(max(h, w)) if focal is None else focal
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        z = dmap.values[:, :, 0].astype(np.float64)
        pts = np.stack([(xx - (w - 1) / 2) / f * z, (yy - (h - 1) / 2) / f * z, z], axis=-1)
    else:
        raise InvalidArgument("PLY export takes depth or pointmap geometry")
    valid = valid & np.isfinite(pts).all(axis=-1)
    return pts[valid]


def write_ply(path, dmap: DenseMap, mask: ValidityMask | None = None, focal: float | None = None) -> int:
    pts = to_points(dmap, mask, focal)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        np.savetxt(fh, pts, fmt="%.6f")
    return len(pts)


def ply_vertex_count(path) -> int:
    with open(path, encoding="ascii") as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[-1])
    raise InvalidArgument("no vertex element in PLY header")
