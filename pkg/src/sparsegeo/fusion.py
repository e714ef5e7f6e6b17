"""Per-pixel fusion of coarse geometry and refined residuals."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import InconsistencyError, InvalidArgument, InvalidInput
from .geo import DenseMap, normalized_entropy
from .selector import PixelSelection
from .sparse.tensor import SparseTensor

ENTROPY_FUSE_EPS = 1e-8


class Strategy(str, Enum):
    GATED = "gated"
    DIRECT = "direct"
    ENTROPY = "entropy"
    COARSE = "coarse"


@dataclass
class FusionParams:
    w1: np.ndarray  # (2C+2, hidden)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, 1)
    b2: np.ndarray  # (1,)

    def __post_init__(self):
        h = self.w1.shape[1]
        if self.b1.shape != (h,) or self.w2.shape != (h, 1) or self.b2.shape != (1,):
            raise InvalidArgument("inconsistent fusion parameter shapes")
        if (self.w1.shape[0] - 2) % 2:
            raise InvalidArgument("gate input width must be 2C + 2")

    @property
    def geo_channels(self) -> int:
        return (self.w1.shape[0] - 2) // 2

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {"fuse.l1.weight": self.w1, "fuse.l1.bias": self.b1,
                "fuse.l2.weight": self.w2, "fuse.l2.bias": self.b2}

    @classmethod
    def from_tensors(cls, t: dict[str, np.ndarray]) -> "FusionParams":
        return cls(t["fuse.l1.weight"], t["fuse.l1.bias"], t["fuse.l2.weight"], t["fuse.l2.bias"])

    def copy(self) -> "FusionParams":
        return FusionParams(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def init_fusion_params(geo_channels: int = 1, hidden: int = 16, seed: int = 0, dtype=np.float64) -> FusionParams:
    """Random first layer; zero second layer so the gate starts neutral (w = 0.5)."""
    rng = np.random.default_rng(seed)
    fan_in = 2 * geo_channels + 2
    bound = np.sqrt(6.0 / fan_in)
    return FusionParams(
        rng.uniform(-bound, bound, (fan_in, hidden)).astype(dtype),
        np.zeros(hidden, dtype),
        np.zeros((hidden, 1), dtype),
        np.zeros(1, dtype),
    )


def gate_forward(coarse, delta, h_coarse, h_delta, p: FusionParams):
    """Vectorized gate over N pixels. Returns (value, w, cache)."""
    coarse = np.atleast_2d(coarse)
    delta = np.atleast_2d(delta)
    h_coarse = np.asarray(h_coarse, dtype=coarse.dtype).reshape(-1, 1)
    h_delta = np.asarray(h_delta, dtype=coarse.dtype).reshape(-1, 1)
    z_in = np.concatenate([coarse, delta, h_coarse, h_delta], axis=1)
    if z_in.shape[1] != p.w1.shape[0]:
        raise InvalidArgument(f"gate input width {z_in.shape[1]} != {p.w1.shape[0]}")
    pre1 = z_in @ p.w1 + p.b1
    hid = np.maximum(pre1, 0)
    logit = hid @ p.w2 + p.b2
    w = expit(logit)
    value = coarse + (1.0 - w) * delta
    return value, w[:, 0], (z_in, pre1, hid, w, delta)


def gated_fuse(coarse_p, delta_p, h_coarse: float, h_delta: float, params: FusionParams):
    """Single-pixel gated fusion; returns (value C-vector, w)."""
    c = np.asarray(coarse_p, dtype=np.float64).reshape(1, -1)
    d = np.asarray(delta_p, dtype=np.float64).reshape(1, -1)
    if not (np.isfinite(c).all() and np.isfinite(d).all() and np.isfinite([h_coarse, h_delta]).all()):
        raise InvalidInput("gated_fuse received a non-finite input")
    value, w, _ = gate_forward(c, d, [h_coarse], [h_delta], params)
    return value[0], float(w[0])


def gate_backward(cache, p: FusionParams, upstream: np.ndarray):
    """Gradients of the fused value w.r.t. params and the gate inputs.

    Returns (param_grads dict, grad_coarse, grad_delta, grad_h_coarse, grad_h_delta).
    """
    z_in, pre1, hid, w, delta = cache
    g = np.atleast_2d(upstream)
    if g.shape != delta.shape:
        raise InvalidArgument(f"upstream shape {g.shape} != fused value shape {delta.shape}")
    c = delta.shape[1]
    # value = coarse + (1 - w) * delta
    g_coarse = g.copy()
    g_delta = g * (1.0 - w)
    g_w = -(g * delta).sum(axis=1, keepdims=True)
    g_logit = g_w * w * (1.0 - w)
    g_w2 = hid.T @ g_logit
    g_b2 = g_logit.sum(axis=0)
    g_hid = g_logit @ p.w2.T
    g_pre1 = np.where(pre1 > 0, g_hid, 0.0)
    g_w1 = z_in.T @ g_pre1
    g_b1 = g_pre1.sum(axis=0)
    g_z = g_pre1 @ p.w1.T
    g_coarse = g_coarse + g_z[:, :c]
    g_delta = g_delta + g_z[:, c : 2 * c]
    grads = {"fuse.l1.weight": g_w1, "fuse.l1.bias": g_b1, "fuse.l2.weight": g_w2, "fuse.l2.bias": g_b2}
    return grads, g_coarse, g_delta, g_z[:, 2 * c], g_z[:, 2 * c + 1]


def fusion_backward(coarse, delta, h_coarse, h_delta, params: FusionParams, upstream):
    _, _, cache = gate_forward(np.asarray(coarse, np.float64), np.asarray(delta, np.float64),
                               h_coarse, h_delta, params)
    return gate_backward(cache, params, np.asarray(upstream, np.float64))


def direct_replace(coarse_p, delta_p):
    return np.asarray(coarse_p) + np.asarray(delta_p)


def entropy_weights(h_coarse, h_delta):
    return np.asarray(h_delta) / (np.asarray(h_coarse) + np.asarray(h_delta) + ENTROPY_FUSE_EPS)


def entropy_weight_fuse(coarse_p, delta_p, h_coarse, h_delta):
    w = entropy_weights(h_coarse, h_delta)
    w = np.asarray(w)[..., None] if np.ndim(coarse_p) > np.ndim(w) else w
    return np.asarray(coarse_p) + (1.0 - w) * np.asarray(delta_p)


def fuse_sites(strategy: Strategy | str, coarse, delta, h_coarse, h_delta, params: FusionParams | None):
    """Fuse N pixels at once; returns (values (N, C), weights (N,))."""
    strategy = Strategy(strategy)
    n = coarse.shape[0]
    if strategy is Strategy.GATED:
        if params is None:
            raise InvalidArgument("gated fusion needs FusionParams")
        value, w, _ = gate_forward(coarse, delta, h_coarse, h_delta, params.__class__(
            *(a.astype(coarse.dtype, copy=False) for a in (params.w1, params.b1, params.w2, params.b2))))
        return value, w
    if strategy is Strategy.DIRECT:
        return coarse + delta, np.zeros(n, coarse.dtype)
    if strategy is Strategy.ENTROPY:
        w = entropy_weights(h_coarse, h_delta).astype(coarse.dtype)
        return coarse + (1.0 - w)[:, None] * delta, w
    return coarse.copy(), np.ones(n, coarse.dtype)


def refined_site_terms(refined: SparseTensor, geo_channels: int):
    """Split refiner output rows into residuals and normalized confidence entropy."""
    delta = refined.feats[:, :geo_channels]
    h_delta = normalized_entropy(refined.feats[:, geo_channels:])
    return delta, h_delta


def apply_fusion_to_map(coarse_hr: DenseMap, sel: PixelSelection, refined: SparseTensor | None,
                        h_map: DenseMap, params: FusionParams | None, strategy="gated") -> DenseMap:
    """Copy ``coarse_hr`` and overwrite each core pixel with its fused value."""
    if (sel.height, sel.width) != (coarse_hr.height, coarse_hr.width):
        raise InvalidArgument("selection and coarse map sizes differ")
    core = sel.core_coords
    if len(core) == 0:
        return DenseMap(coarse_hr.values.copy(), coarse_hr.kind)
    if refined is None:
        raise InconsistencyError("core pixels selected but no refined tensor given")
    rows = refined.index.lookup(core)
    if (rows < 0).any():
        r, c = core[np.argmax(rows < 0)]
        raise InconsistencyError(f"core pixel ({r}, {c}) has no refined row")
    C = coarse_hr.channels
    delta, h_delta = refined_site_terms(refined, C)
    out = coarse_hr.values.copy()
    cv = out[core[:, 0], core[:, 1]]
    hc = h_map.values[core[:, 0], core[:, 1], 0]
    vals, _ = fuse_sites(strategy, cv, delta[rows].astype(cv.dtype), hc.astype(cv.dtype),
                         h_delta[rows].astype(cv.dtype), params)
    out[core[:, 0], core[:, 1]] = vals
    return DenseMap(out, coarse_hr.kind)
