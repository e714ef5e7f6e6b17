"""Timing and accuracy harness: threshold sweep, dense baseline and ablations."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from ..geo import DenseMap, ValidityMask, depth_metrics
from .run import Model, run_pipeline
from .scenes import BackboneOutput, SceneSample

ALPHAS = (0.8, 0.6, 0.3, 0.1)
WARMUP = 5
RUNS = 20


def geo_rmse(pred: DenseMap, gt: DenseMap, valid: np.ndarray) -> float:
    """RMSE over ``valid`` pixels; for pointmaps the per-pixel error is the Euclidean distance."""
    if gt.channels == 1:
        return depth_metrics(pred, gt, ValidityMask(valid)).rmse
    d = pred.values[valid].astype(np.float64) - gt.values[valid]
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def median_time(fn, warmup: int = WARMUP, runs: int = RUNS):
    """Run fn() warmup + runs times; returns (median seconds, last result, all timings)."""
    out = None
    for _ in range(warmup):
        out = fn()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out, times


@dataclass
class BenchRow:
    label: str
    alpha: float | None
    selected_fraction: float
    halo_fraction: float
    madds: int
    refine_time: float  # mean over scenes of the per-scene median
    total_time: float
    rmse: float
    abs_rel: float
    per_scene: list = field(default_factory=list)


def _measure(label, alpha, scenes, model, warmup, runs, **kw) -> BenchRow:
    sel, halo, madds, t_ref, t_tot, rm, ar, per = [], [], [], [], [], [], [], []
    for scene, bb in scenes:
        refine_times = []

        def once():
            out, diag = run_pipeline(scene.rgb, bb, model, alpha=alpha if alpha is not None else 0.0, **kw)
            refine_times.append(diag.refine_time)
            return out, diag

        med, (out, diag), _ = median_time(once, warmup, runs)
        t_ref.append(statistics.median(refine_times[warmup:]))
        t_tot.append(med)
        sel.append(diag.selected_fraction)
        halo.append(diag.halo_fraction)
        madds.append(diag.madds)
        r = geo_rmse(out, scene.gt_geo, scene.mask.bits)
        rm.append(r)
        per.append(r)
        if scene.gt_geo.channels == 1:
            ar.append(depth_metrics(out, scene.gt_geo, scene.mask).abs_rel)
    return BenchRow(label, alpha, float(np.mean(sel)), float(np.mean(halo)), int(np.sum(madds)),
                    float(np.mean(t_ref)), float(np.mean(t_tot)), float(np.mean(rm)),
                    float(np.mean(ar)) if ar else float("nan"), per)


def bench(scenes: list[tuple[SceneSample, BackboneOutput]], model: Model, alphas=ALPHAS, halo: int = 1,
          strategy="gated", dense: bool = True, warmup: int = WARMUP, runs: int = RUNS,
          dtype=np.float32) -> list[BenchRow]:
    """Sparse pipeline at each alpha, then the all-pixel baseline (same weights, halo 0)."""
    rows = [_measure(f"alpha={a}", a, scenes, model, warmup, runs, halo=halo, strategy=strategy, dtype=dtype)
            for a in alphas]
    if dense:
        rows.append(_measure("dense", None, scenes, model, warmup, runs, halo=0, strategy=strategy,
                             selector="all", dtype=dtype))
    return rows


def format_table(rows: list[BenchRow]) -> str:
    head = f"{'setting':<12} {'selected':>9} {'halo':>7} {'MAdds':>14} {'refine_s':>10} {'total_s':>10} {'rmse':>9} {'abs_rel':>9}"
    lines = [head]
    for r in rows:
        lines.append(f"{r.label:<12} {r.selected_fraction:>9.4f} {r.halo_fraction:>7.4f} {r.madds:>14d} "
                     f"{r.refine_time:>10.4f} {r.total_time:>10.4f} {r.rmse:>9.5f} {r.abs_rel:>9.5f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# ablations


def ablate_fusion(scenes, model: Model, alpha: float = 0.3, halo: int = 1,
                  strategies=("gated", "direct", "entropy", "coarse")) -> dict[str, list[float]]:
    """Full-map RMSE per scene for each fusion strategy."""
    out = {s: [] for s in strategies}
    for scene, bb in scenes:
        for s in strategies:
            pred, _ = run_pipeline(scene.rgb, bb, model, alpha=alpha, halo=halo, strategy=s)
            out[s].append(geo_rmse(pred, scene.gt_geo, scene.mask.bits))
    return out


def ablate_selector(scenes, model: Model, fraction: float = 0.1, halo: int = 1, seed: int = 0,
                    selectors=("topk", "random", "edge")) -> dict[str, dict[str, list[float]]]:
    """Full-map and selected-pixel RMSE per scene for each selector at an equal pixel budget."""
    out = {s: {"full": [], "selected": []} for s in selectors}
    for i, (scene, bb) in enumerate(scenes):
        for s in selectors:
            pred, diag = run_pipeline(scene.rgb, bb, model, halo=halo, selector=s, fraction=fraction,
                                      seed=seed + i)
            valid = scene.mask.bits
            out[s]["full"].append(geo_rmse(pred, scene.gt_geo, valid))
            out[s]["selected"].append(geo_rmse(pred, scene.gt_geo, valid & diag.selection.core_mask()))
    return out


def ablate_threshold(scenes, model: Model, alphas=ALPHAS, halo: int = 1, warmup: int = WARMUP,
                     runs: int = RUNS) -> list[BenchRow]:
    return bench(scenes, model, alphas, halo, dense=False, warmup=warmup, runs=runs)
