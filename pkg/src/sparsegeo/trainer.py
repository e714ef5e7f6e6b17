"""Desk-scale training of the sparse refiner and the fusion gate.

The backbone is frozen: its outputs are precomputed per scene and only read.
Each step draws ``batch`` random crops, selects pixels by entropy inside the
crop, runs refiner + gated fusion and takes an Adam step on the mean absolute
error at valid core pixels.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DivergenceError, EmptyEvaluation, InvalidArgument
from .fusion import FusionParams, gate_backward, gate_forward, init_fusion_params
from .geo import DenseMap, ValidityMask, normalized_entropy, normalized_entropy_backward
from .pipeline.scenes import BackboneOutput, SceneSample
from .selector import PixelSelection
from .sparse.refiner import (
    RefinerConfig,
    RefinerParams,
    init_refiner_params,
    refiner_forward,
    tape_backward,
)
from .sparse.tensor import SparseTensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 8
    learn_rate: float = 1e-3
    seed: int = 0
    loss: str = "l1"
    alpha: float = 0.3
    halo: int = 1
    crop: int = 128
    precision: str = "single"

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        if not self.learn_rate >= 0:
            raise InvalidArgument("learn_rate must be >= 0")
        if self.loss != "l1":
            raise InvalidArgument(f"unsupported loss {self.loss!r}")
        if self.precision not in ("single", "double"):
            raise InvalidArgument("precision is 'single' or 'double'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64


@dataclass(frozen=True)
class LossReport:
    total: float
    per_pixel_count: int
    selected_rmse: float
    full_rmse: float


def refine_loss(fused: DenseMap, gt: DenseMap, mask: ValidityMask, sel: PixelSelection) -> LossReport:
    """Mean absolute error over valid core pixels, summed over channels."""
    if fused.shape != gt.shape:
        raise InvalidArgument(f"shape mismatch {fused.shape} vs {gt.shape}")
    core = sel.core_coords
    valid_core = core[mask.bits[core[:, 0], core[:, 1]]] if len(core) else core
    if len(valid_core) == 0:
        raise EmptyEvaluation("no valid core pixels to supervise")
    f = fused.values.astype(np.float64)
    g = gt.values.astype(np.float64)
    d = f[valid_core[:, 0], valid_core[:, 1]] - g[valid_core[:, 0], valid_core[:, 1]]
    total = float(np.abs(d).sum(axis=1).mean())
    sel_rmse = float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
    full = (f - g)[mask.bits]
    full_rmse = float(np.sqrt(np.mean(np.sum(full * full, axis=1))))
    return LossReport(total, len(valid_core), sel_rmse, full_rmse)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in sorted(params):
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.setdefault(name, np.zeros_like(params[name]))
            v = self.v.setdefault(name, np.zeros_like(params[name]))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def checksum(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


@dataclass
class PreparedScene:
    rgb: np.ndarray
    gt: np.ndarray
    valid: np.ndarray
    coarse: np.ndarray
    entropy: np.ndarray
    cell: int


def prepare(scene: SceneSample, backbone: BackboneOutput) -> PreparedScene:
    from .pipeline.run import coarse_maps

    H, W = scene.rgb.height, scene.rgb.width
    coarse, ent = coarse_maps(backbone, H, W)
    cell = H // backbone.coarse_lr.height if H % backbone.coarse_lr.height == 0 else 1
    return PreparedScene(scene.rgb.values, scene.gt_geo.values, scene.mask.bits, coarse.values,
                         ent.values[:, :, 0], cell)


@dataclass
class Item:
    """One crop's forward state, enough to run backward."""

    loss: float
    n_valid: int
    sq_err_core: float
    sq_err_full: float
    n_full: int
    backward: object


def site_loss(x: SparseTensor, core_rows, coarse_core, h_coarse, gt_core, vmask, params: RefinerParams,
              fusion: FusionParams, rcfg: RefinerConfig):
    """Mean absolute error of gated fusion at the valid core rows of ``x``.

    Returns (loss, fused core values, backward) where backward() gives
    (refiner grads, fusion grads, input feature grads).
    """
    tape = refiner_forward(x, params, rcfg)
    C = rcfg.geo_channels
    out = tape.output[core_rows].astype(np.float64)
    delta, conf = out[:, :C], out[:, C:]
    h_delta = normalized_entropy(conf)
    coarse_core = np.asarray(coarse_core, np.float64)
    fused, _, cache = gate_forward(coarse_core, delta, h_coarse, h_delta, fusion)
    n = int(vmask.sum())
    if n == 0:
        raise EmptyEvaluation("no valid core pixels to supervise")
    diff = fused - gt_core
    loss = float(np.abs(diff[vmask]).sum() / n)

    def backward():
        g_fused = np.sign(diff) * (vmask[:, None] / n)
        gfuse, _, g_delta, _, g_hd = gate_backward(cache, fusion, g_fused)
        g_conf = normalized_entropy_backward(conf, g_hd)
        up = np.zeros(tape.output.shape, dtype=np.float64)
        up[core_rows, :C] = g_delta
        up[core_rows, C:] = g_conf
        gref, g_in = tape_backward(tape, params, up.astype(tape.output.dtype))
        return gref, gfuse, g_in

    return loss, fused, backward


def _crop_item(ps: PreparedScene, r0, c0, size, cfg: TrainConfig, rcfg: RefinerConfig,
               params: RefinerParams, fusion: FusionParams):
    sl = (slice(r0, r0 + size), slice(c0, c0 + size))
    ent = ps.entropy[sl]
    core = ent > cfg.alpha
    valid = ps.valid[sl]
    if not (core & valid).any():
        return None
    full = core
    if cfg.halo > 0:
        full = ndimage.binary_dilation(core, structure=np.ones((2 * cfg.halo + 1,) * 2, bool))
    coords = np.argwhere(full)
    r, c = coords[:, 0], coords[:, 1]
    rgb, coarse, gt = ps.rgb[sl], ps.coarse[sl], ps.gt[sl]
    feats = np.concatenate([rgb[r, c], coarse[r, c], ent[r, c][:, None]], axis=1).astype(cfg.dtype)
    x = SparseTensor(coords, feats, 1, assume_sorted=True)
    core_rows = np.flatnonzero(core[r, c])
    cr, cc = r[core_rows], c[core_rows]
    vmask = valid[cr, cc]
    n = int(vmask.sum())
    loss, fused, backward = site_loss(x, core_rows, coarse[cr, cc], ent[cr, cc], gt[cr, cc], vmask,
                                      params, fusion, rcfg)
    diff = fused - gt[cr, cc]
    sq_core = float(np.sum(diff[vmask] ** 2))
    # full-crop error: coarse everywhere except the fused core pixels
    err = (coarse - gt).astype(np.float64)
    err[cr, cc] = diff
    sq_full = float(np.sum(err[valid] ** 2))
    return Item(loss, n, sq_core, sq_full, int(valid.sum()), backward)


def _aligned_origin(rng, extent, size, align):
    hi = max(0, extent - size)
    return int(rng.integers(0, hi // align + 1)) * align


def train(samples: list[tuple[SceneSample, BackboneOutput]], cfg: TrainConfig = TrainConfig(),
          init_seed: int = 0, rcfg: RefinerConfig | None = None, hidden: int = 16,
          log_every: int = 0):
    """Returns (RefinerParams, FusionParams, curve) where curve rows are (step, total, sel_rmse, full_rmse)."""
    if not samples:
        raise InvalidArgument("need at least one training scene")
    geo_c = samples[0][0].gt_geo.channels
    rcfg = rcfg or RefinerConfig(geo_channels=geo_c)
    if rcfg.geo_channels != geo_c:
        raise InvalidArgument("refiner geometry channels differ from the scenes")
    sums = [checksum(b.coarse_lr.values, b.logits_lr.values) for _, b in samples]
    prepared = [prepare(s, b) for s, b in samples]

    refiner = init_refiner_params(rcfg, seed=init_seed)
    fusion = init_fusion_params(geo_c, hidden, seed=init_seed + 1)
    flat = dict(refiner.tensors)
    flat.update(fusion.tensors())
    opt = Adam(cfg.learn_rate)
    rng = np.random.default_rng(cfg.seed)
    align = math.lcm(2**rcfg.levels, max(ps.cell for ps in prepared))
    curve = []

    for step in range(cfg.steps):
        items = []
        for _ in range(cfg.batch):
            for _attempt in range(50):
                ps = prepared[int(rng.integers(0, len(prepared)))]
                H, W = ps.valid.shape
                size = min(cfg.crop, H, W)
                r0 = _aligned_origin(rng, H, size, align)
                c0 = _aligned_origin(rng, W, size, align)
                item = _crop_item(ps, r0, c0, size, cfg, rcfg, refiner, fusion)
                if item is not None:
                    items.append(item)
                    break
        if not items:
            raise InvalidArgument("no crop contained selected pixels; lower alpha or check the scenes")
        total = float(np.mean([it.loss for it in items]))
        sel_rmse = math.sqrt(sum(it.sq_err_core for it in items) / sum(it.n_valid for it in items))
        full_rmse = math.sqrt(sum(it.sq_err_full for it in items) / sum(it.n_full for it in items))
        if not math.isfinite(total):
            raise DivergenceError(f"non-finite loss at step {step}")
        curve.append((step, total, sel_rmse, full_rmse))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.5f sel_rmse %.5f", step, total, sel_rmse)

        grads: dict[str, np.ndarray] = {}
        for it in items:  # fixed batch order
            gref, gfuse, _ = it.backward()
            for name, g in list(gref.items()) + list(gfuse.items()):
                g = g.astype(np.float64)
                if name in grads:
                    grads[name] += g
                else:
                    grads[name] = g
        for g in grads.values():
            g /= len(items)
        opt.step(flat, grads)

    if [checksum(b.coarse_lr.values, b.logits_lr.values) for _, b in samples] != sums:
        raise RuntimeError("backbone outputs were modified during training")
    refiner = RefinerParams({k: flat[k] for k in refiner.tensors})
    fusion = FusionParams.from_tensors(flat)
    return refiner, fusion, curve


def curve_to_csv(curve) -> str:
    lines = ["step,total,selected_rmse,full_rmse"]
    lines += [f"{s},{t!r},{a!r},{b!r}" for s, t, a, b in curve]
    return "\n".join(lines) + "\n"


def fit_gate_bias(coarse, delta, h_coarse, h_delta, target, params: FusionParams, steps=3000, learn_rate=0.05):
    """Fit only the gate's output bias by squared error (refiner bypassed)."""
    p = params.copy()
    flat = {"b2": p.b2}
    opt = Adam(learn_rate)
    coarse = np.atleast_2d(np.asarray(coarse, np.float64))
    delta = np.atleast_2d(np.asarray(delta, np.float64))
    target = np.atleast_2d(np.asarray(target, np.float64))
    for _ in range(steps):
        fused, _, cache = gate_forward(coarse, delta, h_coarse, h_delta, p)
        g = 2.0 * (fused - target) / fused.shape[0]
        grads, *_ = gate_backward(cache, p, g)
        opt.step(flat, {"b2": grads["fuse.l2.bias"]})
    return p
