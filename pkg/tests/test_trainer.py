import numpy as np
import pytest
from scipy.special import expit

from sparsegeo.errors import EmptyEvaluation, InvalidArgument
from sparsegeo.fusion import init_fusion_params
from sparsegeo.geo import DenseMap, MapKind, ValidityMask
from sparsegeo.gradcheck import check_linear, check_relu, check_site_norm_pair, grad_check_all
from sparsegeo.pipeline.run import Model, run_pipeline
from sparsegeo.selector import PixelSelection, Policy
from sparsegeo.sparse.refiner import RefinerConfig, init_refiner_params
from sparsegeo.trainer import (
    Adam,
    TrainConfig,
    checksum,
    curve_to_csv,
    fit_gate_bias,
    refine_loss,
    train,
)


def depth(a):
    return DenseMap(np.asarray(a, np.float64)[:, :, None], MapKind.DEPTH)


def core_sel(coords, h, w):
    coords = np.array(sorted(coords))
    return PixelSelection(coords, np.ones(len(coords), bool), Policy.ENTROPY_THRESHOLD, h, w)


def test_loss_identical_maps_is_zero(rng):
    g = depth(rng.random((4, 4)))
    rep = refine_loss(g, g, ValidityMask(np.ones((4, 4), bool)), core_sel([(1, 1), (2, 3)], 4, 4))
    assert rep.total == 0 and rep.selected_rmse == 0 and rep.full_rmse == 0 and rep.per_pixel_count == 2


def test_loss_single_term():
    f = depth([[2.0, 0.0]])
    g = depth([[1.5, 0.0]])
    rep = refine_loss(f, g, ValidityMask(np.ones((1, 2), bool)), core_sel([(0, 0)], 1, 2))
    assert rep.total == 0.5 and rep.per_pixel_count == 1


def test_loss_direct_summation_oracle(rng):
    f = DenseMap(rng.normal(size=(6, 6, 3)), MapKind.POINTMAP)
    g = DenseMap(rng.normal(size=(6, 6, 3)), MapKind.POINTMAP)
    bits = np.ones((6, 6), bool)
    bits[0, 0] = False
    picks = [(0, 0), (1, 2), (3, 3), (4, 1), (5, 5), (2, 0)]
    rep = refine_loss(f, g, ValidityMask(bits), core_sel(picks, 6, 6))
    tot, sq, n = 0.0, 0.0, 0
    for r, c in picks:
        if not bits[r, c]:
            continue
        for k in range(3):
            d = f.values[r, c, k] - g.values[r, c, k]
            tot += abs(d)
            sq += d * d
        n += 1
    assert n == 5 and rep.per_pixel_count == 5
    assert abs(rep.total - tot / n) < 1e-12
    assert abs(rep.selected_rmse - np.sqrt(sq / n)) < 1e-12


def test_loss_without_valid_core_pixels():
    g = depth(np.ones((3, 3)))
    bits = np.ones((3, 3), bool)
    bits[1, 1] = False
    with pytest.raises(EmptyEvaluation):
        refine_loss(g, g, ValidityMask(bits), core_sel([(1, 1)], 3, 3))
    with pytest.raises(EmptyEvaluation):
        empty = PixelSelection(np.zeros((0, 2), int), np.zeros(0, bool), Policy.RANDOM, 3, 3)
        refine_loss(g, g, ValidityMask(bits), empty)


def test_config_validation():
    with pytest.raises(InvalidArgument):
        TrainConfig(steps=0)
    with pytest.raises(InvalidArgument):
        TrainConfig(learn_rate=-1e-3)
    with pytest.raises(InvalidArgument):
        TrainConfig(loss="l2")
    assert TrainConfig().batch == 8 and TrainConfig(precision="double").dtype == np.float64


def test_adam_first_step_is_signed_lr():
    p = {"a": np.array([1.0, -2.0, 3.0])}
    Adam(0.1).step(p, {"a": np.array([0.5, -4.0, 0.0])})
    # bias-corrected first step moves each entry by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["a"], [0.9, -1.9, 3.0], atol=1e-7)


def _cfg(**kw):
    base = dict(steps=1, batch=2, crop=64)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_learn_rate_leaves_params_bitwise(small_scene):
    ref0 = init_refiner_params(RefinerConfig(), seed=0)
    fus0 = init_fusion_params(1, 16, seed=1)
    ref, fus, curve = train([small_scene], _cfg(learn_rate=0.0), init_seed=0)
    assert len(curve) == 1
    for k, v in ref0.tensors.items():
        assert ref.tensors[k].tobytes() == v.tobytes(), k
    for k, v in fus0.tensors().items():
        assert fus.tensors()[k].tobytes() == v.tobytes(), k


def test_training_is_reproducible_and_backbone_untouched(small_scene):
    sc, bb = small_scene
    before = checksum(bb.coarse_lr.values, bb.logits_lr.values)
    a = train([small_scene], _cfg(steps=3, crop=32), init_seed=2)
    b = train([small_scene], _cfg(steps=3, crop=32), init_seed=2)
    assert checksum(*a[0].tensors.values()) == checksum(*b[0].tensors.values())
    assert checksum(*a[1].tensors().values()) == checksum(*b[1].tensors().values())
    assert curve_to_csv(a[2]) == curve_to_csv(b[2])
    assert checksum(bb.coarse_lr.values, bb.logits_lr.values) == before
    c = train([small_scene], _cfg(steps=3, crop=32, seed=1), init_seed=2)
    assert curve_to_csv(c[2]) != curve_to_csv(a[2])


def test_curve_csv_format():
    text = curve_to_csv([(0, 1.5, 2.0, 0.5), (1, 1.25, 1.75, 0.25)])
    lines = text.splitlines()
    assert lines[0] == "step,total,selected_rmse,full_rmse"
    assert lines[2] == "1,1.25,1.75,0.25"


def test_two_hundred_steps_reduce_loss():
    from sparsegeo.pipeline.scenes import synth_scene, synthetic_backbone

    sc = synth_scene(21, 128, 128, n_objects=6)
    bb = synthetic_backbone(sc, 16, seed=21)
    cfg = TrainConfig(steps=200)
    ref, fus, curve = train([(sc, bb)], cfg, init_seed=0)
    losses = np.array([c[1] for c in curve])
    assert losses[-20:].mean() < losses[:20].mean()

    def selected_l1(model):
        out, diag = run_pipeline(sc.rgb, bb, model)
        return refine_loss(out, sc.gt_geo, sc.mask, diag.selection).total

    start = Model(RefinerConfig(), init_refiner_params(RefinerConfig(), seed=0), init_fusion_params(1, 16, seed=1))
    assert selected_l1(Model(RefinerConfig(), ref, fus)) < selected_l1(start)


def test_gate_bias_reaches_scalar_optimum(rng):
    c = rng.normal(size=(40, 1))
    d = rng.normal(size=(40, 1))
    t = c + 0.3 * d + 0.05 * rng.normal(size=(40, 1))
    p = init_fusion_params(1, 16, seed=0)  # zero output weights: the gate is sigma(b2) everywhere
    fitted = fit_gate_bias(c, d, np.full(40, 0.5), np.full(40, 0.5), t, p)
    # squared loss in u = 1 - w is a parabola with vertex sum d (t - c) / sum d^2
    u_star = float(np.sum(d * (t - c)) / np.sum(d * d))
    assert 0 < u_star < 1
    u = 1.0 - float(expit(fitted.b2[0]))
    assert abs(u - u_star) < 1e-3
    assert p.b2[0] == 0.0  # the input parameters are not mutated


def test_grad_checks_pass():
    rng = np.random.default_rng(0)
    assert check_linear(rng) < 1e-8
    assert check_relu(rng) <= 1e-4
    assert check_site_norm_pair(rng) <= 1e-6
    rep = grad_check_all(0)
    assert rep["max"] <= 1e-4, rep
    assert {"linear", "conv_k3_s2", "relu", "site_norm", "gate", "end_to_end"} <= set(rep)
