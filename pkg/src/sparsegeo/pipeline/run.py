"""End-to-end coarse-to-fine inference."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidArgument
from ..fusion import FusionParams, Strategy, apply_fusion_to_map
from ..geo import DenseMap, MapKind, compute_entropy, upsample_nearest
from ..selector import (
    Policy,
    PixelSelection,
    assemble_sparse_input,
    dilate_halo,
    edge_scores,
    random_scores,
    select_entropy,
    select_top_fraction,
)
from ..sparse.conv import MAddCounter
from ..sparse.refiner import RefinerConfig, RefinerParams, build_hierarchy, run_refiner
from .scenes import BackboneOutput

SELECTORS = ("entropy", "topk", "random", "edge", "all")


@dataclass
class Model:
    cfg: RefinerConfig
    refiner: RefinerParams
    fusion: FusionParams


@dataclass
class Diagnostics:
    selected_fraction: float = 0.0
    halo_fraction: float = 0.0
    n_core: int = 0
    n_halo: int = 0
    pair_counts: dict = field(default_factory=dict)
    madds: int = 0
    madds_by_layer: dict = field(default_factory=dict)
    stage_times: dict = field(default_factory=dict)
    selection: PixelSelection | None = None

    @property
    def refine_time(self) -> float:
        return self.stage_times.get("refine", 0.0)

    @property
    def total_time(self) -> float:
        return float(sum(self.stage_times.values()))


def coarse_maps(backbone: BackboneOutput, height: int, width: int) -> tuple[DenseMap, DenseMap]:
    """Nearest-upsampled coarse geometry and its normalized entropy at full resolution.

    Entropy is computed per low-resolution cell and then replicated, which is
    identical to computing it on the replicated logits.
    """
    coarse_hr = upsample_nearest(backbone.coarse_lr, height, width)
    ent_lr = compute_entropy(backbone.logits_lr)
    return coarse_hr, upsample_nearest(ent_lr, height, width)


def make_selection(selector: str, entropy: DenseMap, rgb: DenseMap, alpha: float, fraction: float,
                   seed: int) -> PixelSelection:
    h, w = entropy.height, entropy.width
    if selector == "entropy":
        return select_entropy(entropy, alpha)
    if selector == "topk":
        return select_top_fraction(entropy, fraction, Policy.TOP_FRACTION)
    if selector == "random":
        return select_top_fraction(random_scores(h, w, seed), fraction, Policy.RANDOM)
    if selector == "edge":
        return select_top_fraction(edge_scores(rgb), fraction, Policy.EDGE)
    if selector == "all":
        return select_top_fraction(np.zeros((h, w)), 1.0, Policy.TOP_FRACTION)
    raise InvalidArgument(f"unknown selector {selector!r}; expected one of {SELECTORS}")


def run_pipeline(rgb: DenseMap, backbone: BackboneOutput, model: Model, alpha: float = 0.3, halo: int = 1,
                 strategy: Strategy | str = "gated", selector: str = "entropy", fraction: float = 0.1,
                 seed: int = 0, dtype=np.float32) -> tuple[DenseMap, Diagnostics]:
    diag = Diagnostics()
    clock = time.perf_counter
    H, W = rgb.height, rgb.width
    if backbone.coarse_lr.channels != model.cfg.geo_channels:
        raise InvalidArgument("backbone geometry channels do not match the refiner config")

    t0 = clock()
    coarse_hr, ent_hr = coarse_maps(backbone, H, W)
    t1 = clock()
    sel = make_selection(selector, ent_hr, rgb, alpha, fraction, seed)
    sel = dilate_halo(sel, halo)
    t2 = clock()
    diag.stage_times.update(upsample_entropy=t1 - t0, select=t2 - t1)
    diag.selection = sel
    diag.n_core, diag.n_halo = sel.n_core, sel.n_halo
    diag.selected_fraction = sel.n_core / (H * W)
    diag.halo_fraction = sel.n_halo / (H * W)
    if sel.n_core == 0:
        diag.stage_times.update(assemble=0.0, refine=0.0, fuse=0.0)
        return coarse_hr, diag

    x = assemble_sparse_input(sel, rgb, coarse_hr, ent_hr, dtype=dtype)
    t3 = clock()
    counter = MAddCounter()
    hier = build_hierarchy(x.coords, model.cfg, index=x.index)
    refined = run_refiner(x, model.refiner, model.cfg, counter, hier)
    t4 = clock()
    out = apply_fusion_to_map(coarse_hr, sel, refined, ent_hr, model.fusion, strategy)
    t5 = clock()
    diag.stage_times.update(assemble=t3 - t2, refine=t4 - t3, fuse=t5 - t4)
    diag.pair_counts = hier.pair_counts()
    diag.madds = counter.total
    diag.madds_by_layer = dict(counter.by_layer)
    return out, diag


def geometry_kind(channels: int) -> MapKind:
    return MapKind.DEPTH if channels == 1 else MapKind.POINTMAP
