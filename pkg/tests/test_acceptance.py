"""End-to-end acceptance checks at their stated tolerances.

Each test records one PASS/FAIL line; conftest prints them at the end of the run.
The trained model is built once per session (about four minutes on a desktop CPU).
"""

import statistics
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from oracles import dense_conv
from sparsegeo.geo import DenseMap, MapKind, ValidityMask, depth_metrics, upsample_nearest
from sparsegeo.gradcheck import grad_check_all
from sparsegeo.pipeline import bench as B
from sparsegeo.pipeline.export import ply_vertex_count, write_ply
from sparsegeo.pipeline.run import Model, coarse_maps, run_pipeline
from sparsegeo.pipeline.scenes import synth_scene, synthetic_backbone
from sparsegeo.pipeline.tensorfile import read_manifest, read_tensor, write_manifest, write_tensor
from sparsegeo.pipeline.weights import load_model, save_model, zero_head_model
from sparsegeo.selector import random_scores, selection_recall
from sparsegeo.sparse.conv import ConvParams, MAddCounter, sparse_conv
from sparsegeo.sparse.refiner import RefinerConfig
from sparsegeo.sparse.tensor import SparseTensor, build_kernel_map
from sparsegeo.trainer import TrainConfig, train

RESULTS: list[str] = []

SIZE = 512
LONG_SIDE = 64
TRAIN_SEEDS = range(1000, 1050)
TEST_SEEDS = range(5000, 5010)


def report(k, ok, detail):
    line = f"acceptance {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    return ok


def scenes_for(seeds, size=(SIZE, SIZE), n_objects=12, long_side=LONG_SIDE):
    out = []
    for s in seeds:
        sc = synth_scene(s, *size, n_objects=n_objects)
        out.append((sc, synthetic_backbone(sc, long_side, seed=s)))
    return out


@pytest.fixture(scope="module")
def held_out():
    return scenes_for(TEST_SEEDS)


@pytest.fixture(scope="module")
def trained():
    t0 = time.perf_counter()
    refiner, fusion, curve = train(scenes_for(TRAIN_SEEDS), TrainConfig(steps=2000, batch=8), init_seed=0)
    return Model(RefinerConfig(), refiner, fusion), curve, time.perf_counter() - t0


def _random_sites(rng, n, extent):
    flat = rng.choice(extent * extent, size=min(n, extent * extent), replace=False)
    return np.stack(np.unravel_index(np.sort(flat), (extent, extent)), axis=1).astype(np.int64)


def test_1_sparse_matches_dense_oracle():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {np.float64: 0.0, np.float32: 0.0}
    ok = True
    for i in range(50):
        dtype = np.float64 if i % 2 == 0 else np.float32
        k = 3 if i % 4 < 2 else 5
        extent = int(rng.integers(4, 17))
        n = int(rng.integers(1, extent * extent + 1))
        cin, cout = (int(c) for c in rng.integers(1, 9, size=2))
        coords = _random_sites(rng, n, extent)
        x = SparseTensor(coords, rng.normal(size=(len(coords), cin)).astype(dtype))
        p = ConvParams(rng.normal(size=(k * k, cin, cout)).astype(dtype), rng.normal(size=cout).astype(dtype))
        y = sparse_conv(x, p, build_kernel_map(x, coords, k), coords, MAddCounter())
        ref = dense_conv(coords, x.feats, p.weights, p.bias, coords, 1, k)
        err = float(np.max(np.abs(y.feats - ref) / np.maximum(1.0, np.abs(ref))))
        worst[dtype] = max(worst[dtype], err)
        ok &= err <= (1e-12 if dtype == np.float64 else 1e-5)
    secs = time.perf_counter() - t0
    ok &= secs < 5.0
    assert report(1, ok, f"max err f64 {worst[np.float64]:.2e}, f32 {worst[np.float32]:.2e}, {secs:.2f}s")


def test_2_gradients():
    rep = grad_check_all(0)
    ok = rep["max"] <= 1e-4 and rep["seconds"] < 30.0
    worst = max((k for k in rep if k not in ("max", "seconds")), key=rep.get)
    assert report(2, ok, f"max rel err {rep['max']:.2e} ({worst}), {rep['seconds']:.1f}s")


def test_3_selector_recall():
    t0 = time.perf_counter()
    ent, rnd = [], []
    for s in range(20):
        sc, bb = scenes_for([s])[0]
        coarse, h = coarse_maps(bb, SIZE, SIZE)
        err = np.abs(coarse.values - sc.gt_geo.values)[:, :, 0]
        ent.append(selection_recall(h, err, 0.1))
        rnd.append(selection_recall(random_scores(SIZE, SIZE, s), err, 0.1))
    secs = time.perf_counter() - t0
    m_ent, m_rnd = float(np.mean(ent)), float(np.mean(rnd))
    ok = m_ent >= 0.6 and m_ent >= 3 * m_rnd and secs < 120
    assert report(3, ok, f"mean recall {m_ent:.3f} (min {min(ent):.3f}) vs random {m_rnd:.3f} "
                         f"= {m_ent / m_rnd:.1f}x, {secs:.1f}s")


def _selected_rmse(pred, sc, sel_mask):
    return depth_metrics(pred, sc.gt_geo, ValidityMask(sc.mask.bits & sel_mask)).rmse


def test_4_refinement_improves(trained, held_out):
    model, curve, secs = trained
    wins, full_ref, full_coarse = 0, [], []
    rows = []
    for sc, bb in held_out:
        out, diag = run_pipeline(sc.rgb, bb, model, alpha=0.3, halo=1)
        coarse = upsample_nearest(bb.coarse_lr, SIZE, SIZE)
        core = diag.selection.core_mask()
        r_ref, r_coarse = _selected_rmse(out, sc, core), _selected_rmse(coarse, sc, core)
        wins += r_ref < r_coarse
        rows.append(f"{r_ref:.3f}/{r_coarse:.3f}")
        full_ref.append(B.geo_rmse(out, sc.gt_geo, sc.mask.bits))
        full_coarse.append(B.geo_rmse(coarse, sc.gt_geo, sc.mask.bits))
    ok = wins >= 9 and np.mean(full_ref) < np.mean(full_coarse) and secs < 1800
    assert report(4, ok, f"selected rmse better on {wins}/10 (refined/coarse {' '.join(rows)}); "
                         f"full rmse {np.mean(full_ref):.4f} vs {np.mean(full_coarse):.4f}; "
                         f"train {secs:.0f}s, loss {curve[0][1]:.3f}->{curve[-1][1]:.3f}")


def test_5_ablation_orderings(trained, held_out):
    model = trained[0]
    fus = B.ablate_fusion(held_out, model, strategies=("gated", "direct"))
    gated, direct = np.mean(fus["gated"]), np.mean(fus["direct"])
    sel = B.ablate_selector(held_out, model, fraction=0.1, selectors=("topk", "random"))
    ent, rnd = np.mean(sel["topk"]["full"]), np.mean(sel["random"]["full"])
    rows = B.ablate_threshold(held_out, model)
    errs = [r.rmse for r in rows]
    times = [r.total_time for r in rows]
    mono_err = all(b <= a for a, b in zip(errs, errs[1:]))
    mono_time = all(b >= a for a, b in zip(times, times[1:]))
    ok = gated <= direct and ent <= rnd and mono_err and mono_time
    assert report(5, ok, f"gated {gated:.4f} <= direct {direct:.4f}; entropy {ent:.4f} <= random {rnd:.4f}; "
                         f"alpha 0.8..0.1 rmse {' '.join(f'{e:.4f}' for e in errs)}, "
                         f"time {' '.join(f'{t * 1e3:.1f}ms' for t in times)}")


def test_6_relative_efficiency(trained):
    model = trained[0]
    sc, bb = scenes_for([7], size=(1536, 2048), n_objects=48, long_side=256)[0]

    def timed(runs, warmup, **kw):
        ref, tot = [], []
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            _, diag = run_pipeline(sc.rgb, bb, model, **kw)
            if i >= warmup:
                tot.append(time.perf_counter() - t0)
                ref.append(diag.refine_time)
        return diag, statistics.median(ref), statistics.median(tot)

    with threadpool_limits(limits=1):
        sp, sp_ref, sp_tot = timed(20, 5, alpha=0.3, halo=1)
        de, de_ref, de_tot = timed(20, 1, selector="all", halo=0)
    madd_ratio = de.madds / sp.madds
    time_ratio = de_ref / sp_ref
    ok = madd_ratio >= 5.0 and time_ratio >= 3.0
    assert report(6, ok, f"selected {sp.selected_fraction:.3%} (+halo {sp.halo_fraction:.3%}); MAdds "
                         f"{sp.madds} vs {de.madds} = {madd_ratio:.1f}x; refine median {sp_ref:.3f}s vs "
                         f"{de_ref:.3f}s = {time_ratio:.1f}x (whole pipeline {de_tot / sp_tot:.1f}x)")


def test_7_determinism_and_formats(trained, held_out, tmp_path):
    model = trained[0]
    sc, bb = held_out[0]
    with threadpool_limits(limits=1):
        a, da = run_pipeline(sc.rgb, bb, model)
        b, db = run_pipeline(sc.rgb, bb, model)
    same_run = a.values.tobytes() == b.values.tobytes() and da.madds == db.madds
    rerun = train(scenes_for([1000, 1001], size=(128, 128), long_side=16), TrainConfig(steps=3, batch=2), 0)
    again = train(scenes_for([1000, 1001], size=(128, 128), long_side=16), TrainConfig(steps=3, batch=2), 0)
    same_train = all(rerun[0].tensors[k].tobytes() == again[0].tensors[k].tobytes() for k in rerun[0].tensors)
    same_train &= rerun[2] == again[2]

    write_tensor(tmp_path / "a.rtft", a.values)
    tf_ok = read_tensor(tmp_path / "a.rtft").tobytes() == a.values.tobytes()
    save_model(tmp_path / "w.rtfm", model)
    back = load_model(tmp_path / "w.rtfm")
    man_ok = all(back.refiner.tensors[k].tobytes() == v.tobytes() for k, v in model.refiner.tensors.items())
    man_ok &= all(back.fusion.tensors()[k].tobytes() == v.tobytes() for k, v in model.fusion.tensors().items())
    t = {"x": np.arange(7, dtype=np.int32), "y": np.float32([1.5, -2.0])}
    write_manifest(tmp_path / "m", t)
    man_ok &= all(read_manifest(tmp_path / "m")[0][k].tobytes() == v.tobytes() for k, v in t.items())

    bits = sc.mask.bits.copy()
    bits[::7, ::3] = False
    n = write_ply(tmp_path / "d.ply", a, ValidityMask(bits))
    pts = DenseMap(np.dstack([a.values] * 3), MapKind.POINTMAP)
    n3 = write_ply(tmp_path / "p.ply", pts, ValidityMask(bits))
    ply_ok = n == n3 == int(bits.sum()) == ply_vertex_count(tmp_path / "d.ply")

    ok = same_run and same_train and tf_ok and man_ok and ply_ok
    assert report(7, ok, f"pipeline rerun identical {same_run}, training rerun identical {same_train}, "
                         f"tensorfile {tf_ok}, manifest {man_ok}, ply {n} vertices for {int(bits.sum())} valid")


def test_8_noop_guarantees(trained, held_out):
    sc, bb = held_out[1]
    coarse = upsample_nearest(bb.coarse_lr, SIZE, SIZE).values.tobytes()
    out_a, da = run_pipeline(sc.rgb, bb, trained[0], alpha=1.0)
    out_z, dz = run_pipeline(sc.rgb, bb, zero_head_model(RefinerConfig(), seed=3), alpha=0.3)
    ok = out_a.values.tobytes() == coarse and out_z.values.tobytes() == coarse and dz.n_core > 0
    assert report(8, ok, f"alpha=1 selects {da.n_core} pixels; zero head over {dz.n_core} core pixels; "
                         f"both bitwise equal to the upsampled coarse map")
