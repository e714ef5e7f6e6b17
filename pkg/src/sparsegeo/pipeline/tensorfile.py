"""RTFT tensor container and the named-tensor weight manifest.

TensorFile layout (all little-endian)::

    b"RTFT" | u16 version | u8 dtype code | u8 ndim | ndim x u32 dims | payload

Manifest layout: a text header ::

    RTFM 1
    # key=value            (optional metadata lines)
    <name> <dtype> <d0xd1x...> <offset>
    ...
    END

followed by the concatenated TensorFile records; offsets count bytes from the
first byte after the ``END`` line.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from ..errors import InvalidArgument

MAGIC = b"RTFT"
VERSION = 1
CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i4"), 4: np.dtype("u1")}
NAMES = {1: "f32", 2: "f64", 3: "i32", 4: "u8"}
_BY_KIND = {np.dtype("float32"): 1, np.dtype("float64"): 2, np.dtype("int32"): 3, np.dtype("uint8"): 4,
            np.dtype("bool"): 4}


class FormatError(ValueError):
    pass


def encode_tensor(arr: np.ndarray) -> bytes:
    a = np.asarray(arr)
    code = _BY_KIND.get(a.dtype)
    if code is None:
        raise InvalidArgument(f"dtype {a.dtype} has no TensorFile code")
    if a.ndim > 255:
        raise InvalidArgument("too many dimensions")
    head = MAGIC + struct.pack("<HBB", VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + np.ascontiguousarray(a, dtype=CODES[code]).tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one record starting at ``offset``; returns (array, end offset)."""
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("bad magic, not a TensorFile record")
    version, code, ndim = struct.unpack_from("<HBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported TensorFile version {version}")
    if code not in CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{ndim}I", buf, offset + 8)
    start = offset + 8 + 4 * ndim
    dt = CODES[code]
    n = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if start + n > len(buf):
        raise FormatError("truncated TensorFile payload")
    arr = np.frombuffer(buf, dtype=dt, count=n // dt.itemsize, offset=start).reshape(dims).copy()
    return arr.astype(dt.newbyteorder("=")), start + n


def write_tensor(path, arr: np.ndarray):
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after TensorFile payload")
    return arr


def write_manifest(path, tensors: dict[str, np.ndarray], meta: dict[str, str] | None = None):
    blobs = io.BytesIO()
    lines = ["RTFM 1"]
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={v}")
    for name, arr in tensors.items():
        if any(ch.isspace() for ch in name):
            raise InvalidArgument(f"tensor name {name!r} contains whitespace")
        a = np.asarray(arr)
        rec = encode_tensor(a)
        code = _BY_KIND[a.dtype]
        shape = "x".join(str(d) for d in a.shape) or "scalar"
        lines.append(f"{name} {NAMES[code]} {shape} {blobs.tell()}")
        blobs.write(rec)
    lines.append("END")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii") + blobs.getvalue())


def read_manifest(path) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    buf = Path(path).read_bytes()
    end = buf.find(b"\nEND\n")
    if not buf.startswith(b"RTFM 1\n") or end < 0:
        raise FormatError("not a weight manifest")
    header = buf[:end].decode("ascii").splitlines()[1:]
    base = end + len(b"\nEND\n")
    tensors, meta = {}, {}
    for line in header:
        if line.startswith("#"):
            k, _, v = line[1:].strip().partition("=")
            meta[k] = v
            continue
        name, dtype, shape, off = line.split()
        arr, _ = decode_tensor(buf, base + int(off))
        want = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        if arr.shape != want or NAMES[_BY_KIND[arr.dtype]] != dtype:
            raise FormatError(f"manifest entry {name} disagrees with its record")
        tensors[name] = arr
    return tensors, meta
