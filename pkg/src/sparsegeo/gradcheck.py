"""Finite-difference checks of every hand-written backward pass.

All checks run in double precision with central differences. The relative
error of a tensor is max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6);
the floor only matters for gradients that are zero by construction, such as
a convolution bias followed by normalization.
Instances are drawn so that no rectifier input or L1 residual lies within
a few steps of its kink.
"""

from __future__ import annotations

import time

import numpy as np

from .fusion import gate_backward, gate_forward, init_fusion_params
from .geo import normalized_entropy, normalized_entropy_backward
from .sparse import conv as C
from .sparse.refiner import (
    RefinerConfig,
    build_hierarchy,
    init_refiner_params,
    refiner_forward,
    tape_backward,
    unpool,
    unpool_backward,
)
from .sparse.tensor import SparseTensor, build_kernel_map, downsample_coords
from .trainer import site_loss

STEP = 1e-4
FLOOR = 1e-6


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, np.float64)
    n = np.asarray(numeric, np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), FLOOR)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def numeric_grad(f, x: np.ndarray, step=STEP, entries=None) -> np.ndarray:
    """Central differences of scalar f() w.r.t. x (perturbed in place).

    With ``entries`` only those flat indices are filled; the rest stay NaN.
    """
    g = np.full(x.shape, np.nan) if entries is not None else np.zeros(x.shape)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if entries is None else entries:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def _compare(analytic, numeric):
    mask = ~np.isnan(numeric)
    return rel_error(np.asarray(analytic)[mask], numeric[mask])


def _random_sites(rng, n, extent):
    cells = rng.choice(extent * extent, size=n, replace=False)
    cells.sort()
    return np.stack([cells // extent, cells % extent], axis=1).astype(np.int64)


def check_linear(rng):
    x = rng.normal(size=(7, 4))
    w = rng.normal(size=(4, 3))
    b = rng.normal(size=3)
    R = rng.normal(size=(7, 3))
    f = lambda: float(np.sum(C.linear_forward(x, w, b) * R))
    gx, gw, gb = C.linear_backward(x, w, R)
    return max(_compare(gx, numeric_grad(f, x)), _compare(gw, numeric_grad(f, w)),
               _compare(gb, numeric_grad(f, b)))


def check_conv(rng, kernel_size=3, conv_stride=1):
    coords = _random_sites(rng, 10, 5)
    x = SparseTensor(coords, rng.normal(size=(10, 3)), 1)
    out = coords if conv_stride == 1 else downsample_coords(x, conv_stride)
    km = build_kernel_map(x, out, kernel_size, conv_stride)
    w = rng.normal(size=(kernel_size**2, 3, 2))
    b = rng.normal(size=2)
    R = rng.normal(size=(len(out), 2))
    feats = x.feats
    f = lambda: float(np.sum(C.conv_forward(feats, w, b, km) * R))
    gx, gw, gb = C.conv_backward(feats, w, km, R)
    return max(_compare(gx, numeric_grad(f, feats)), _compare(gw, numeric_grad(f, w)),
               _compare(gb, numeric_grad(f, b)))


def check_relu(rng):
    x = rng.uniform(0.1, 1.0, size=(8, 3)) * rng.choice([-1.0, 1.0], size=(8, 3))
    R = rng.normal(size=(8, 3))
    f = lambda: float(np.sum(C.relu_forward(x)[0] * R))
    _, mask = C.relu_forward(x)
    return _compare(C.relu_backward(mask, R), numeric_grad(f, x))


def check_site_norm(rng):
    x = rng.normal(size=(9, 3))
    scale = rng.normal(size=3)
    shift = rng.normal(size=3)
    R = rng.normal(size=(9, 3))
    f = lambda: float(np.sum(C.norm_forward(x, scale, shift)[0] * R))
    _, cache = C.norm_forward(x, scale, shift)
    gx, gs, gb = C.norm_backward(cache, scale, R)
    return max(_compare(gx, numeric_grad(f, x)), _compare(gs, numeric_grad(f, scale)),
               _compare(gb, numeric_grad(f, shift)))


def check_site_norm_pair(rng):
    """Two sites: y1 = -y2 = d / sqrt(d^2 + eps) with d = (x1 - x2) / 2, so the Jacobian is closed form."""
    x = rng.normal(size=(2, 1))
    one = np.ones(1)
    _, cache = C.norm_forward(x, one, np.zeros(1))
    d = (x[0, 0] - x[1, 0]) / 2
    dy1_dd = C.NORM_EPS / (d * d + C.NORM_EPS) ** 1.5
    jac = 0.5 * dy1_dd * np.array([[1.0, -1.0], [-1.0, 1.0]])
    got = np.stack([C.norm_backward(cache, one, e[:, None])[0][:, 0] for e in np.eye(2)])
    return rel_error(got, jac)


def check_unpool(rng):
    parents = np.array([0, 0, 1, 2, 2, 2, 3])
    p = rng.normal(size=(4, 3))
    R = rng.normal(size=(7, 3))
    f = lambda: float(np.sum(unpool(p, parents) * R))
    return _compare(unpool_backward(parents, R, 4), numeric_grad(f, p))


def check_gate(rng):
    fp = init_fusion_params(2, 6, seed=int(rng.integers(1 << 30)))
    fp.w2[:] = rng.normal(size=fp.w2.shape)
    fp.b1[:] = rng.uniform(0.5, 1.0, size=fp.b1.shape)
    n = 5
    coarse = rng.normal(size=(n, 2))
    delta = rng.normal(size=(n, 2))
    hc = rng.uniform(0.1, 0.9, n)
    hd = rng.uniform(0.1, 0.9, n)
    R = rng.normal(size=(n, 2))

    def f():
        return float(np.sum(gate_forward(coarse, delta, hc, hd, fp)[0] * R))

    _, _, cache = gate_forward(coarse, delta, hc, hd, fp)
    pre = cache[1]
    if np.abs(pre).min() < 1e-2:  # keep away from the rectifier kink
        return check_gate(rng)
    grads, gc, gd, ghc, ghd = gate_backward(cache, fp, R)
    errs = [_compare(gc, numeric_grad(f, coarse)), _compare(gd, numeric_grad(f, delta)),
            _compare(ghc, numeric_grad(f, hc)), _compare(ghd, numeric_grad(f, hd))]
    for name, t in fp.tensors().items():
        errs.append(_compare(grads[name], numeric_grad(f, t)))
    return max(errs)


def check_entropy(rng):
    z = rng.normal(size=(6, 4)) * 2
    R = rng.normal(size=6)
    f = lambda: float(np.sum(normalized_entropy(z) * R))
    return _compare(normalized_entropy_backward(z, R), numeric_grad(f, z))


def _random_refiner(cfg, rng):
    p = init_refiner_params(cfg, seed=int(rng.integers(1 << 30)))
    for name, t in p.tensors.items():
        if name.endswith("norm.shift"):
            t[:] = rng.uniform(0.2, 0.8, t.shape) * rng.choice([-1.0, 1.0], t.shape)
        elif name.endswith("norm.scale"):
            t[:] = rng.uniform(0.5, 1.5, t.shape)
        elif name.startswith("head"):
            t[:] = rng.normal(size=t.shape) * 0.5
        elif name.endswith("bias"):
            t[:] = rng.normal(size=t.shape) * 0.1
    return p


def _refiner_instance(cfg, rng, n_sites, extent):
    for _ in range(200):
        coords = _random_sites(rng, n_sites, extent)
        x = SparseTensor(coords, rng.normal(size=(n_sites, cfg.in_channels)), 1)
        params = _random_refiner(cfg, rng)
        tape = refiner_forward(x, params, cfg)
        if tape.margin > 1e-2:
            return x, params
    raise RuntimeError("could not draw a kink-free refiner instance")


def check_refiner(rng):
    cfg = RefinerConfig(levels=1, channels=(4,))
    x, params = _refiner_instance(cfg, rng, 8, 4)
    hier = build_hierarchy(x.coords, cfg)
    R = rng.normal(size=(len(x), cfg.out_channels))
    feats = x.feats

    def f():
        xi = SparseTensor(x.coords, feats, 1, index=x.index)
        return float(np.sum(refiner_forward(xi, params, cfg, hier=hier).output * R))

    tape = refiner_forward(x, params, cfg, hier=hier)
    grads, g_in = tape_backward(tape, params, R)
    errs = {"input": _compare(g_in, numeric_grad(f, feats))}
    for name, t in params.tensors.items():
        errs[name] = _compare(grads[name], numeric_grad(f, t))
    return max(errs.values())


def check_end_to_end(rng, entries_per_tensor=6):
    """Gated-fusion L1 loss on core sites through the default refiner, sampled parameter entries."""
    cfg = RefinerConfig()
    x, params = _refiner_instance(cfg, rng, 10, 4)
    n = len(x)
    core_rows = np.sort(rng.choice(n, size=6, replace=False))
    coarse = rng.normal(size=(len(core_rows), 1))
    hc = rng.uniform(0.3, 0.9, len(core_rows))
    vmask = np.ones(len(core_rows), bool)
    fusion = init_fusion_params(1, 16, seed=int(rng.integers(1 << 30)))
    fusion.w2[:] = rng.normal(size=fusion.w2.shape) * 0.5
    fusion.b1[:] = rng.uniform(0.3, 0.6, fusion.b1.shape)
    _, fused, _ = site_loss(x, core_rows, coarse, hc, coarse, vmask, params, fusion, cfg)
    # targets a fixed distance away from the fused values keep L1 off its kink
    gt = fused + rng.uniform(0.2, 0.5, fused.shape) * rng.choice([-1.0, 1.0], fused.shape)
    feats = x.feats
    hier = build_hierarchy(x.coords, cfg)

    def f():
        xi = SparseTensor(x.coords, feats, 1, index=x.index)
        tape = refiner_forward(xi, params, cfg, hier=hier)
        assert tape.margin > 0
        return site_loss(xi, core_rows, coarse, hc, gt, vmask, params, fusion, cfg)[0]

    _, _, backward = site_loss(x, core_rows, coarse, hc, gt, vmask, params, fusion, cfg)
    gref, gfuse, g_in = backward()
    errs = {"input": _compare(g_in, numeric_grad(f, feats))}
    named = list(params.tensors.items()) + list(fusion.tensors().items())
    for name, t in named:
        k = min(entries_per_tensor, t.size)
        entries = rng.choice(t.size, size=k, replace=False)
        g = gref[name] if name in gref else gfuse[name]
        errs[name] = _compare(g, numeric_grad(f, t, entries=entries))
    return max(errs.values())


CHECKS = {
    "linear": check_linear,
    "conv_k3_s1": lambda rng: check_conv(rng, 3, 1),
    "conv_k3_s2": lambda rng: check_conv(rng, 3, 2),
    "conv_k5_s1": lambda rng: check_conv(rng, 5, 1),
    "relu": check_relu,
    "site_norm": check_site_norm,
    "site_norm_pair": check_site_norm_pair,
    "unpool": check_unpool,
    "gate": check_gate,
    "entropy": check_entropy,
    "refiner": check_refiner,
    "end_to_end": check_end_to_end,
}


def grad_check_all(seed: int = 0) -> dict[str, float]:
    """Max relative error per layer type; also includes 'max' and 'seconds'."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    report = {name: fn(rng) for name, fn in CHECKS.items()}
    report["max"] = max(report.values())
    report["seconds"] = time.perf_counter() - t0
    return report
