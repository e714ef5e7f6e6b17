"""Gather-scatter sparse convolution, site normalization and rectifier, with backward passes."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from ..errors import InvalidArgument
from .tensor import KernelMap, SparseTensor

NORM_EPS = 1e-5


class MAddCounter:
    """Exact multiply-accumulate tally, split by layer name."""

    def __init__(self):
        self.by_layer: dict[str, int] = defaultdict(int)

    def add(self, name: str, n: int):
        self.by_layer[name] += int(n)

    @property
    def total(self) -> int:
        return int(sum(self.by_layer.values()))


@dataclass
class ConvParams:
    weights: np.ndarray  # (k*k, C_in, C_out)
    bias: np.ndarray  # (C_out,)

    def __post_init__(self):
        w = np.asarray(self.weights)
        k2 = w.shape[0]
        k = int(round(k2**0.5))
        if w.ndim != 3 or k * k != k2 or k % 2 == 0:
            raise InvalidArgument(f"conv weights must be (k*k, C_in, C_out) with odd k, got {w.shape}")
        if np.asarray(self.bias).shape != (w.shape[2],):
            raise InvalidArgument("bias length must equal C_out")
        if not (np.isfinite(w).all() and np.isfinite(self.bias).all()):
            raise InvalidArgument("conv parameters must be finite")

    @property
    def kernel_size(self) -> int:
        return int(round(self.weights.shape[0] ** 0.5))


def conv_madds(km: KernelMap, c_in: int, c_out: int) -> int:
    return km.n_pairs * c_in * c_out


def conv_forward(feats: np.ndarray, weight: np.ndarray, bias: np.ndarray, km: KernelMap,
                 counter: MAddCounter | None = None, name: str = "conv") -> np.ndarray:
    """y_u = b + sum over offsets of W_o x_{u + o*s}, accumulated in offset scan order."""
    k2, c_in, c_out = weight.shape
    if k2 != len(km.offsets):
        raise InvalidArgument(f"weights have {k2} taps, kernel map has {len(km.offsets)}")
    if feats.shape[1] != c_in:
        raise InvalidArgument(f"input has {feats.shape[1]} channels, weights expect {c_in}")
    out = np.empty((km.n_out, c_out), dtype=feats.dtype)
    out[:] = bias.astype(feats.dtype)
    for k in range(k2):
        i, o = km.in_rows[k], km.out_rows[k]
        if len(i) == 0:
            continue
        contrib = feats[i] @ weight[k]
        if len(o) == km.n_out:
            out += contrib  # output rows are 0..n-1 in order
        else:
            out[o] += contrib
    if counter is not None:
        counter.add(name, conv_madds(km, c_in, c_out))
    return out


def conv_backward(feats: np.ndarray, weight: np.ndarray, km: KernelMap, grad_out: np.ndarray):
    """Returns (grad_feats, grad_weight, grad_bias)."""
    if grad_out.shape != (km.n_out, weight.shape[2]):
        raise InvalidArgument(f"upstream gradient shape {grad_out.shape} does not match conv output")
    g_in = np.zeros_like(feats)
    g_w = np.zeros_like(weight)
    for k in range(weight.shape[0]):
        i, o = km.in_rows[k], km.out_rows[k]
        if len(i) == 0:
            continue
        go = grad_out if len(o) == km.n_out else grad_out[o]
        g_w[k] = feats[i].T @ go
        # each input row appears at most once per offset
        g_in[i] += go @ weight[k].T
    return g_in, g_w, grad_out.sum(axis=0)


def sparse_conv(x: SparseTensor, p: ConvParams, km: KernelMap, out_coords: np.ndarray,
                counter: MAddCounter | None = None, out_index=None) -> SparseTensor:
    out_coords = np.asarray(out_coords, dtype=np.int64).reshape(-1, 2)
    if len(out_coords) != km.n_out or km.in_stride != x.stride:
        raise InvalidArgument("kernel map was not built for this input/output pair")
    w = np.asarray(p.weights, dtype=x.feats.dtype)
    b = np.asarray(p.bias, dtype=x.feats.dtype)
    y = conv_forward(x.feats, w, b, km, counter)
    return SparseTensor(out_coords, y, km.out_stride, index=out_index)


def linear_forward(feats, weight, bias, counter: MAddCounter | None = None, name: str = "linear"):
    """1x1 convolution (per-site affine map)."""
    if counter is not None:
        counter.add(name, feats.shape[0] * weight.shape[0] * weight.shape[1])
    return feats @ weight + bias


def linear_backward(feats, weight, grad_out):
    return grad_out @ weight.T, feats.T @ grad_out, grad_out.sum(axis=0)


def norm_forward(x: np.ndarray, scale: np.ndarray, shift: np.ndarray):
    """Per-channel standardization over active sites, then affine. Returns (y, cache)."""
    mean = x.mean(axis=0, dtype=np.float64)
    xc = x - mean.astype(x.dtype)
    var = np.mean(np.square(xc, dtype=np.float64), axis=0)
    inv = (1.0 / np.sqrt(var + NORM_EPS)).astype(x.dtype)
    xhat = xc * inv
    return xhat * scale + shift, (xhat, inv)


def norm_backward(cache, scale: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_x, grad_scale, grad_shift)."""
    xhat, inv = cache
    n = xhat.shape[0]
    g_shift = grad_out.sum(axis=0)
    g_scale = (grad_out * xhat).sum(axis=0)
    gx_hat = grad_out * scale
    g_x = (inv / n) * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
    return g_x, g_scale, g_shift


def site_norm(x: SparseTensor, scale, shift) -> SparseTensor:
    if len(x) == 0:
        raise InvalidArgument("site_norm needs at least one active site")
    y, _ = norm_forward(x.feats, np.asarray(scale, x.feats.dtype), np.asarray(shift, x.feats.dtype))
    return x.replace_feats(y)


def relu_forward(x: np.ndarray):
    mask = x > 0
    return np.where(mask, x, 0).astype(x.dtype), mask


def relu_backward(mask: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(mask, grad_out, 0).astype(grad_out.dtype)
