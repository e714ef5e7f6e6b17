"""Sparse U-shaped refiner: strided encoder, bottleneck, coordinate-cached decoder, 1x1 head.

Level l holds sites at stride 2**l. Encoder level l convolves level l down to
level l+1; decoder level l copies each level l+1 feature to its child sites
(the cached level l coordinate set), concatenates the level l skip features
and convolves at stride 2**l. The head emits C geometry residuals followed by
K confidence logits per input site.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from . import conv as C
from .tensor import KernelMap, SparseTensor, build_kernel_map, downsample_coords, parent_rows


@dataclass(frozen=True)
class RefinerConfig:
    levels: int = 2
    channels: tuple[int, ...] = (16, 32)
    kernel_size: int = 3
    geo_channels: int = 1
    conf_logits: int = 4
    norm: str = "site_norm"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.levels < 1 or len(self.channels) != self.levels:
            raise InvalidArgument("need levels >= 1 and one channel count per level")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise InvalidArgument("kernel size must be odd")
        if self.conf_logits < 2:
            raise InvalidArgument("need at least two confidence logits")
        if self.norm not in ("none", "site_norm"):
            raise InvalidArgument(f"unknown norm {self.norm!r}")

    @property
    def in_channels(self) -> int:
        return self.geo_channels + 4  # rgb + geometry + entropy

    @property
    def out_channels(self) -> int:
        return self.geo_channels + self.conf_logits

    def layer_shapes(self) -> dict[str, tuple[int, int, int]]:
        """name -> (taps, C_in, C_out) for every convolution, in execution order."""
        k2 = self.kernel_size**2
        ch = self.channels
        shapes = {}
        for lv in range(self.levels):
            cin = self.in_channels if lv == 0 else ch[lv - 1]
            shapes[f"enc{lv}"] = (k2, cin, ch[lv])
        shapes["bottleneck"] = (k2, ch[-1], ch[-1])
        up = ch[-1]
        for lv in reversed(range(self.levels)):
            skip = self.in_channels if lv == 0 else ch[lv - 1]
            out = ch[lv - 1] if lv > 0 else ch[0]
            shapes[f"dec{lv}"] = (k2, up + skip, out)
            up = out
        shapes["head"] = (1, up, self.out_channels)
        return shapes


@dataclass
class RefinerParams:
    """Named parameter tensors, e.g. ``enc0.weight``, ``enc0.norm.scale``, ``head.bias``."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self):
        return list(self.tensors)

    def copy(self) -> "RefinerParams":
        return RefinerParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "RefinerParams":
        return RefinerParams({k: v.astype(dtype) for k, v in self.tensors.items()})

    def check(self, cfg: RefinerConfig):
        for name, (k2, cin, cout) in cfg.layer_shapes().items():
            w = self.tensors.get(f"{name}.weight")
            b = self.tensors.get(f"{name}.bias")
            want_w = (cin, cout) if name == "head" else (k2, cin, cout)
            if w is None or w.shape != want_w or b is None or b.shape != (cout,):
                raise InvalidArgument(f"parameter shapes for {name} do not match the config")
            if cfg.norm == "site_norm" and name != "head":
                for part in ("scale", "shift"):
                    t = self.tensors.get(f"{name}.norm.{part}")
                    if t is None or t.shape != (cout,):
                        raise InvalidArgument(f"missing or misshapen {name}.norm.{part}")


def init_refiner_params(cfg: RefinerConfig, seed: int = 0, dtype=np.float64) -> RefinerParams:
    """Fan-in scaled uniform weights; the head starts at zero so the refiner is a no-op."""
    rng = np.random.default_rng(seed)
    t = {}
    for name, (k2, cin, cout) in cfg.layer_shapes().items():
        if name == "head":
            t["head.weight"] = np.zeros((cin, cout), dtype)
            t["head.bias"] = np.zeros(cout, dtype)
            continue
        bound = np.sqrt(6.0 / (k2 * cin))
        t[f"{name}.weight"] = rng.uniform(-bound, bound, (k2, cin, cout)).astype(dtype)
        t[f"{name}.bias"] = np.zeros(cout, dtype)
        if cfg.norm == "site_norm":
            t[f"{name}.norm.scale"] = np.ones(cout, dtype)
            t[f"{name}.norm.shift"] = np.zeros(cout, dtype)
    return RefinerParams(t)


@dataclass
class Hierarchy:
    """Cached coordinate sets and kernel maps for one input site set."""

    levels: list[SparseTensor]  # feature-less tensors, level l at stride 2**l
    down_maps: list[KernelMap]  # level l -> l+1, conv stride 2
    same_maps: list[KernelMap]  # stride-1 conv at level l
    parents: list[np.ndarray]  # row in level l+1 of each level-l site

    def pair_counts(self) -> dict[str, int]:
        out = {}
        for lv, km in enumerate(self.down_maps):
            out[f"down{lv}"] = km.n_pairs
        for lv, km in enumerate(self.same_maps):
            out[f"same{lv}"] = km.n_pairs
        return out


def build_hierarchy(coords: np.ndarray, cfg: RefinerConfig, index=None) -> Hierarchy:
    k = cfg.kernel_size
    lv0 = SparseTensor(coords, np.zeros((len(coords), 0)), 1, index=index)
    levels = [lv0]
    down = []
    for _ in range(cfg.levels):
        cur = levels[-1]
        nxt_coords = downsample_coords(cur, 2)
        nxt = SparseTensor(nxt_coords, np.zeros((len(nxt_coords), 0)), cur.stride * 2, assume_sorted=True)
        down.append(build_kernel_map(cur, nxt_coords, k, conv_stride=2))
        levels.append(nxt)
    same = [build_kernel_map(t, t.coords, k, 1) for t in levels]
    parents = [parent_rows(levels[lv], levels[lv + 1]) for lv in range(cfg.levels)]
    return Hierarchy(levels, down, same, parents)


@dataclass
class Tape:
    cfg: RefinerConfig
    hier: Hierarchy
    records: list = field(default_factory=list)
    output: np.ndarray | None = None
    margin: float = np.inf  # smallest |pre-activation| seen, for kink-free finite differences


def _block(tape, name, x, params, km, counter):
    """conv -> [site_norm] -> relu, recording what backward needs."""
    w = params[f"{name}.weight"].astype(x.dtype, copy=False)
    b = params[f"{name}.bias"].astype(x.dtype, copy=False)
    y = C.conv_forward(x, w, b, km, counter, name)
    norm_cache = None
    if tape.cfg.norm == "site_norm":
        y, norm_cache = C.norm_forward(
            y,
            params[f"{name}.norm.scale"].astype(x.dtype, copy=False),
            params[f"{name}.norm.shift"].astype(x.dtype, copy=False),
        )
    if y.size:
        tape.margin = min(tape.margin, float(np.abs(y).min()))
    y, mask = C.relu_forward(y)
    tape.records.append((name, x, km, norm_cache, mask))
    return y


def refiner_forward(inp: SparseTensor, params: RefinerParams, cfg: RefinerConfig,
                    counter: C.MAddCounter | None = None, hier: Hierarchy | None = None) -> Tape:
    if inp.stride != 1:
        raise InvalidArgument("refiner input must be at stride 1")
    if inp.channels != cfg.in_channels:
        raise InvalidArgument(f"input has {inp.channels} channels, config expects {cfg.in_channels}")
    if len(inp) == 0:
        raise InvalidArgument("refiner input is empty")
    params.check(cfg)
    if hier is None:
        hier = build_hierarchy(inp.coords, cfg, index=inp.index)
    tape = Tape(cfg, hier)
    L = cfg.levels
    skips = [inp.feats]
    x = inp.feats
    for lv in range(L):
        x = _block(tape, f"enc{lv}", x, params, hier.down_maps[lv], counter)
        skips.append(x)
    x = _block(tape, "bottleneck", x, params, hier.same_maps[L], counter)
    for lv in reversed(range(L)):
        up = unpool(x, hier.parents[lv])
        cat = np.concatenate([up, skips[lv]], axis=1)
        x = _block(tape, f"dec{lv}", cat, params, hier.same_maps[lv], counter)
    w = params["head.weight"].astype(x.dtype, copy=False)
    b = params["head.bias"].astype(x.dtype, copy=False)
    tape.records.append(("head", x))
    tape.output = C.linear_forward(x, w, b, counter, "head")
    return tape


def run_refiner(inp: SparseTensor, params: RefinerParams, cfg: RefinerConfig,
                counter: C.MAddCounter | None = None, hier: Hierarchy | None = None) -> SparseTensor:
    """Residuals (first C channels) and confidence logits (last K) at the input sites."""
    tape = refiner_forward(inp, params, cfg, counter, hier)
    return SparseTensor(inp.coords, tape.output, 1, index=inp.index)


def unpool(parent_feats: np.ndarray, parents: np.ndarray) -> np.ndarray:
    """Copy each parent feature row to its child sites."""
    return parent_feats[parents]


def unpool_backward(parents: np.ndarray, grad_children: np.ndarray, n_parent: int) -> np.ndarray:
    g = np.zeros((n_parent, grad_children.shape[1]), dtype=grad_children.dtype)
    np.add.at(g, parents, grad_children)
    return g


def tape_backward(tape: Tape, params: RefinerParams, upstream: np.ndarray):
    """Reverse pass over a recorded forward. Returns (param_grads, input_grad)."""
    cfg, hier = tape.cfg, tape.hier
    if upstream.shape != tape.output.shape:
        raise InvalidArgument(f"upstream gradient {upstream.shape} != output {tape.output.shape}")
    grads: dict[str, np.ndarray] = {}
    recs = {r[0]: r for r in tape.records}
    L = cfg.levels
    dt = tape.output.dtype

    _, head_in = recs["head"]
    g, grads["head.weight"], grads["head.bias"] = C.linear_backward(
        head_in, params["head.weight"].astype(dt, copy=False), upstream
    )

    def block_back(name, g):
        _, x, km, norm_cache, mask = recs[name]
        g = C.relu_backward(mask, g)
        if norm_cache is not None:
            g, grads[f"{name}.norm.scale"], grads[f"{name}.norm.shift"] = C.norm_backward(
                norm_cache, params[f"{name}.norm.scale"].astype(dt, copy=False), g
            )
        gx, grads[f"{name}.weight"], grads[f"{name}.bias"] = C.conv_backward(
            x, params[f"{name}.weight"].astype(dt, copy=False), km, g
        )
        return gx

    # skip gradients per level, level 0 is the input itself
    skip_grads = [None] * (L + 1)
    for lv in range(L):
        gcat = block_back(f"dec{lv}", g)
        up_width = gcat.shape[1] - (cfg.in_channels if lv == 0 else cfg.channels[lv - 1])
        g_up, g_skip = gcat[:, :up_width], gcat[:, up_width:]
        skip_grads[lv] = g_skip
        # unpool backward: children add into their parent row
        g = unpool_backward(hier.parents[lv], g_up, len(hier.levels[lv + 1]))
    g = block_back("bottleneck", g)
    for lv in reversed(range(L)):
        g = g + skip_grads[lv + 1] if skip_grads[lv + 1] is not None else g
        g = block_back(f"enc{lv}", g)
    g_in = g + skip_grads[0]
    return grads, g_in


def refiner_backward(inp: SparseTensor, params: RefinerParams, cfg: RefinerConfig, upstream_grad):
    tape = refiner_forward(inp, params, cfg)
    return tape_backward(tape, params, np.asarray(upstream_grad, dtype=tape.output.dtype))
