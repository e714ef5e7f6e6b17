import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sparsegeo.errors import InvalidArgument
from sparsegeo.geo import DenseMap, MapKind
from sparsegeo.pipeline.run import coarse_maps
from sparsegeo.pipeline.scenes import synth_scene, synthetic_backbone
from sparsegeo.selector import (
    PixelSelection,
    Policy,
    assemble_sparse_input,
    dilate_halo,
    edge_scores,
    random_scores,
    select_edge,
    select_entropy,
    select_random,
    select_top_fraction,
    selection_recall,
)


def ent(a):
    return DenseMap(np.asarray(a, dtype=np.float64)[:, :, None], MapKind.ENTROPY)


unit = st.floats(0, 1, allow_nan=False)


def test_threshold_excludes_everything():
    assert len(select_entropy(ent(np.full((3, 3), 0.3)), 0.3)) == 0


def test_threshold_is_strict():
    sel = select_entropy(ent([[0.2, 0.4]]), 0.3)
    assert sel.coords.tolist() == [[0, 1]] and sel.alpha_used == 0.3
    with pytest.raises(InvalidArgument):
        select_entropy(ent([[0.2]]), 1.5)


def test_threshold_matches_exhaustive_scan(rng):
    e = rng.random((8, 8))
    sel = select_entropy(ent(e), 0.3)
    expect = [[r, c] for r in range(8) for c in range(8) if e[r, c] > 0.3]
    assert sel.coords.tolist() == expect
    assert sel.is_core.all() and sel.n_halo == 0


@given(arrays(np.float64, (6, 7), elements=unit), unit, unit)
def test_threshold_monotone(e, a1, a2):
    lo, hi = min(a1, a2), max(a1, a2)
    big = select_entropy(ent(e), lo).core_mask()
    small = select_entropy(ent(e), hi).core_mask()
    assert not (small & ~big).any()


def test_top_fraction_full_and_forced_order():
    s = np.array([[4.0, 3.0], [2.0, 1.0]])
    assert len(select_top_fraction(s, 1.0)) == 4
    assert select_top_fraction(s, 0.5).coords.tolist() == [[0, 0], [0, 1]]
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(InvalidArgument):
            select_top_fraction(s, bad)


def test_top_fraction_matches_sort_oracle(rng):
    s = np.round(rng.random((16, 16)), 1)  # plenty of ties
    sel = select_top_fraction(s, 0.1)
    k = int(np.floor(0.1 * 256 + 0.5))
    ranked = sorted(((-s[r, c], r, c) for r in range(16) for c in range(16)))[:k]
    assert sel.coords.tolist() == sorted([r, c] for _, r, c in ranked)


def test_random_policy_reproducible():
    a = select_random(20, 30, 0.2, seed=7)
    b = select_random(20, 30, 0.2, seed=7)
    assert a.coords.tobytes() == b.coords.tobytes() and a.source_policy is Policy.RANDOM
    assert len(a) == 120
    # the per-pixel draws come from the seeded generator in row-major order
    assert random_scores(2, 3, 7).tolist() == np.random.default_rng(7).random(6).reshape(2, 3).tolist()


def test_edge_scores_on_step_image():
    img = np.zeros((6, 6, 3))
    img[:, 3:] = 1.0
    e = edge_scores(DenseMap(img, MapKind.RGB))
    assert e[:, 2:4].min() > 0 and e[:, :2].max() == 0 and e[:, 4:].max() == 0
    sel = select_edge(DenseMap(img, MapKind.RGB), 12 / 36)
    assert set(map(tuple, sel.coords)) == {(r, c) for r in range(6) for c in (2, 3)}


def test_halo_radius_zero_is_identity(rng):
    sel = select_entropy(ent(rng.random((5, 5))), 0.5)
    assert dilate_halo(sel, 0) is sel


def test_halo_center_pixel():
    e = np.zeros((5, 5))
    e[2, 2] = 1.0
    sel = dilate_halo(select_entropy(ent(e), 0.5), 1)
    assert len(sel) == 9 and sel.n_core == 1 and sel.n_halo == 8


def test_halo_corner_clipping_oracle():
    e = np.zeros((6, 6))
    e[0, 0] = 1.0
    sel = dilate_halo(select_entropy(ent(e), 0.5), 2)
    window = [[r, c] for r in range(-2, 3) for c in range(-2, 3) if 0 <= r < 6 and 0 <= c < 6]
    assert sel.coords.tolist() == sorted(window)
    assert sel.is_core.tolist() == [r == 0 and c == 0 for r, c in sorted(window)]


@settings(deadline=None)
@given(arrays(np.float64, (9, 8), elements=unit), st.integers(0, 3))
def test_halo_properties(e, radius):
    sel = select_entropy(ent(e), 0.6)
    out = dilate_halo(sel, radius)
    core = sel.core_mask()
    assert (out.core_mask() == core).all()
    assert not (sel.full_mask() & ~out.full_mask()).any()
    # every halo pixel is within Chebyshev distance radius of a core pixel
    cc = sel.core_coords
    for r, c in out.coords[~out.is_core]:
        assert np.abs(cc - [r, c]).max(axis=1).min() <= radius
    assert dilate_halo(out, radius).coords.tobytes() == out.coords.tobytes()


def test_selection_validates_order_and_bounds():
    with pytest.raises(InvalidArgument):
        PixelSelection(np.array([[0, 1], [0, 0]]), [True, True], Policy.RANDOM, 2, 2)
    with pytest.raises(InvalidArgument):
        PixelSelection(np.array([[0, 2]]), [True], Policy.RANDOM, 2, 2)


def test_selection_array_round_trip(rng):
    sel = dilate_halo(select_entropy(ent(rng.random((7, 7))), 0.8), 1)
    arr = sel.to_array()
    assert arr.dtype == np.int32 and arr.shape == (len(sel), 3)
    back = PixelSelection.from_array(arr, 7, 7)
    assert back.coords.tolist() == sel.coords.tolist() and back.is_core.tolist() == sel.is_core.tolist()


def _maps(rng, h, w, c):
    rgb = DenseMap(rng.random((h, w, 3)), MapKind.RGB)
    kind = MapKind.DEPTH if c == 1 else MapKind.POINTMAP
    geo = DenseMap(rng.random((h, w, c)) + 1, kind)
    return rgb, geo, ent(rng.random((h, w)))


@pytest.mark.parametrize("c,width", [(1, 5), (3, 7)])
def test_assemble_feature_width(rng, c, width):
    rgb, geo, e = _maps(rng, 4, 4, c)
    sel = select_top_fraction(np.arange(16.0).reshape(4, 4), 0.25)
    assert assemble_sparse_input(sel, rgb, geo, e).channels == width


def test_assemble_rows_read_back(rng):
    rgb, geo, e = _maps(rng, 5, 6, 1)
    sel = PixelSelection(np.array([[0, 5], [2, 1], [4, 0]]), [True, False, True], Policy.RANDOM, 5, 6)
    x = assemble_sparse_input(sel, rgb, geo, e)
    for (r, c) in sel.coords:
        row = x.index[(r, c)]
        want = np.concatenate([rgb.values[r, c], geo.values[r, c], e.values[r, c]])
        assert x.feats[row].tolist() == want.tolist()
    with pytest.raises(InvalidArgument):
        assemble_sparse_input(sel, rgb, DenseMap(np.ones((4, 6, 1)), MapKind.DEPTH), e)


def test_recall_beats_random_on_synthetic_backbone():
    sc = synth_scene(11, 256, 256)
    bb = synthetic_backbone(sc, 32, seed=11)
    coarse, h = coarse_maps(bb, 256, 256)
    err = np.abs(coarse.values - sc.gt_geo.values)[:, :, 0]
    r_ent = selection_recall(h, err)
    r_rnd = selection_recall(random_scores(256, 256, 0), err)
    assert abs(r_rnd - 0.10) < 0.02
    assert r_ent >= 3 * r_rnd
