import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellseg.errors import ConfigError, MarkerError
from cellseg.postproc import (Markers, PostprocConfig, connected_components, edt, edt_sq, instances_from_masks,
                              local_maxima, render_center_heatmap, watershed)
from cellseg.volumestore import SynthParams, gen_synthetic

from oracles import edt_bruteforce_sq, flood_naive, gaussian, offsets_26


# --- connected components -----------------------------------------------------

def test_components_two_blobs_and_empty():
    vol = np.zeros((4, 6, 6), bool)
    vol[0, 0, 0:2] = True
    vol[3, 4:6, 4:6] = True
    lab = connected_components(vol)
    assert lab.max() == 2 and lab[0, 0, 0] == 1 and lab[3, 5, 5] == 2
    assert connected_components(np.zeros((3, 3, 3))).max() == 0


def test_components_diagonal_connectivity():
    vol = np.zeros((2, 2, 1), bool)
    vol[0, 0, 0] = vol[1, 1, 0] = True
    assert connected_components(vol, 26).max() == 1
    assert connected_components(vol, 6).max() == 2


def test_components_scan_order(rng):
    vol = rng.random((5, 8, 8)) > 0.7
    lab = connected_components(vol, 6)
    firsts = [np.flatnonzero(lab.ravel() == i)[0] for i in range(1, lab.max() + 1)]
    assert firsts == sorted(firsts)


# --- EDT ----------------------------------------------------------------------

def test_edt_trivial_cases():
    assert edt(np.zeros((3, 4, 5))).max() == 0
    vol = np.zeros((3, 3, 3), bool)
    vol[1, 1, 1] = True
    d = edt(vol)
    assert d[1, 1, 1] == 1.0 and d.sum() == 1.0
    # the border counts as background
    assert edt(np.ones((1, 1, 1))).item() == 1.0
    assert edt(np.ones((5, 7, 9)))[2, 3, 4] == 3.0


@pytest.mark.parametrize("seed", range(10))
def test_edt_matches_bruteforce(seed):
    r = np.random.default_rng(seed)
    mask = r.random((6, 12, 12)) < r.uniform(0.3, 0.95)
    np.testing.assert_array_equal(edt_sq(mask), edt_bruteforce_sq(mask))


def test_edt_2d(rng):
    mask = rng.random((15, 11)) < 0.8
    np.testing.assert_array_equal(edt_sq(mask), edt_bruteforce_sq(mask))


# --- peaks and heatmaps ----------------------------------------------------------

def _blobs(centers, shape=(1, 40, 40), sigma=2.0):
    zz, yy, xx = np.indices(shape)
    field = np.zeros(shape)
    for c in centers:
        d2 = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2
        field = np.maximum(field, np.exp(-d2 / (2 * sigma ** 2)))
    return field


def test_single_peak_at_centre():
    m = local_maxima(_blobs([(0, 17, 22)]), 5, 0.3)
    assert m.as_list() == [(0, 17, 22, 1)]


def test_close_peaks_are_suppressed():
    field = _blobs([(0, 20, 20)]) + 0.9 * _blobs([(0, 20, 24)])
    assert len(local_maxima(field, 5, 0.3)) == 1
    far = np.maximum(_blobs([(0, 10, 10)]), _blobs([(0, 30, 30)]))
    assert len(local_maxima(far, 5, 0.3)) == 2


def test_equal_peaks_tie_to_scan_order():
    field = np.zeros((1, 10, 10))
    field[0, 3, 3] = field[0, 3, 6] = 1.0
    assert local_maxima(field, 5, 0.5).as_list() == [(0, 3, 3, 1)]


def test_no_peaks_below_threshold():
    assert len(local_maxima(_blobs([(0, 20, 20)]) * 0.2, 5, 0.3)) == 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_peak_count_monotone_in_threshold(seed):
    field = np.random.default_rng(seed).random((3, 14, 14))
    counts = [len(local_maxima(field, 2, t)) for t in np.linspace(0.1, 0.95, 8)]
    assert all(b <= a for a, b in zip(counts, counts[1:]))


def test_heatmap_peaks_and_values():
    lab = np.zeros((2, 30, 40), np.uint32)
    lab[0, 5:10, 5:10] = 1       # centroid (7, 7)
    lab[0, 20:25, 30:35] = 2     # centroid (22, 32)
    heat = render_center_heatmap(lab, 2.0)
    assert heat[0, 7, 7] == 1.0 and heat[0, 22, 32] == 1.0
    assert heat[1].max() == 0
    assert heat.min() >= 0 and heat.max() <= 1
    assert heat[0, 15, 20] < 1
    assert heat[0, 7, 9] == pytest.approx(gaussian(4, 2.0), rel=1e-6)
    assert render_center_heatmap(np.zeros((2, 5, 5), np.uint32)).max() == 0


# --- watershed ----------------------------------------------------------------

def _dumbbell():
    zz, yy, xx = np.indices((9, 9, 25))
    mask = ((zz - 4) ** 2 + (yy - 4) ** 2 + (xx - 5) ** 2 <= 16) | ((zz - 4) ** 2 + (yy - 4) ** 2 + (xx - 19) ** 2 <= 16)
    mask |= (abs(zz - 4) <= 1) & (abs(yy - 4) <= 1) & (xx >= 5) & (xx <= 19)
    return mask


def test_watershed_single_marker_floods_component():
    mask = _dumbbell()
    out = watershed(mask, Markers.from_list([(4, 4, 5, 3)]), -edt(mask))
    assert set(np.unique(out[mask])) == {3} and out[~mask].max() == 0


def test_watershed_splits_dumbbell_at_neck():
    mask = _dumbbell()
    dist = edt(mask)
    out = watershed(mask, Markers.from_list([(4, 4, 5, 1), (4, 4, 19, 2)]), -dist)
    assert (out[:, :, :12][mask[:, :, :12]] == 1).all()
    assert (out[:, :, 13:][mask[:, :, 13:]] == 2).all()
    ref = flood_naive(mask, [((4, 4, 5), 1), ((4, 4, 19), 2)], -dist, offsets_26())
    np.testing.assert_array_equal(out, ref)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_watershed_matches_naive_flood(seed):
    r = np.random.default_rng(seed)
    mask = r.random((4, 7, 7)) < 0.6
    fg = np.argwhere(mask)
    if len(fg) == 0:
        return
    pick = fg[r.choice(len(fg), size=min(3, len(fg)), replace=False)]
    labels = r.choice(np.arange(1, 20), size=len(pick), replace=False)
    priority = np.round(r.random(mask.shape), 1)  # coarse values force ties
    markers = Markers(pick, labels)
    out = watershed(mask, markers, priority)
    seeds = sorted((tuple(int(v) for v in c), int(l)) for c, l in zip(pick, labels))
    ref = flood_naive(mask, seeds, priority, offsets_26())
    reached = ref > 0
    np.testing.assert_array_equal(out[reached], ref[reached])


def test_watershed_unreachable_gets_fresh_labels():
    mask = np.zeros((3, 10, 10), bool)
    mask[1, 1:4, 1:4] = True
    mask[1, 6:9, 6:9] = True
    out = watershed(mask, Markers.from_list([(1, 2, 2, 5)]), np.zeros(mask.shape))
    assert out[1, 2, 2] == 5 and out[1, 7, 7] == 6


def test_watershed_marker_errors():
    mask = np.zeros((2, 4, 4), bool)
    mask[0, :2, :2] = True
    with pytest.raises(MarkerError):
        watershed(mask, Markers.from_list([(1, 3, 3, 1)]), np.zeros(mask.shape))
    with pytest.raises(MarkerError):
        watershed(mask, Markers.from_list([(0, 0, 0, 1), (0, 1, 1, 1)]), np.zeros(mask.shape))
    with pytest.raises(MarkerError):
        watershed(mask, Markers.from_list([(0, 9, 0, 1)]), np.zeros(mask.shape))


# --- pipeline -----------------------------------------------------------------

def _single_cell():
    vol, lab = gen_synthetic(SynthParams(shape=(12, 32, 32), cells=1, semi_axes_min=(5, 6, 6),
                                         semi_axes_max=(5.5, 7, 7), noise=0.0, seed=2))
    return lab.astype(np.float32), lab


def _tangent_pair():
    _, lab = gen_synthetic(SynthParams(shape=(16, 40, 56), touching=True, semi_axes_min=(6, 7, 7),
                                       semi_axes_max=(6.5, 7, 7), noise=0.0))
    return (lab > 0).astype(np.float32), lab


@pytest.mark.parametrize("mode", ["none", "distance-watershed", "marker-watershed"])
def test_single_cell_any_mode(mode):
    prob, lab = _single_cell()
    out = instances_from_masks(prob, PostprocConfig(mode=mode), heatmap=render_center_heatmap(lab))
    assert out.max() == 1 and ((out > 0) == (lab > 0)).all()


def test_tangent_pair_modes():
    prob, lab = _tangent_pair()
    assert instances_from_masks(prob, PostprocConfig(mode="none")).max() == 1
    split = instances_from_masks(prob, PostprocConfig(mode="distance-watershed"))
    assert len(np.unique(split[split > 0])) == 2
    marked = instances_from_masks(prob, PostprocConfig(mode="marker-watershed"), heatmap=render_center_heatmap(lab))
    assert len(np.unique(marked[marked > 0])) == 2


def test_marker_mode_requires_heatmap():
    prob, _ = _single_cell()
    with pytest.raises(ConfigError):
        instances_from_masks(prob, PostprocConfig(mode="marker-watershed"))
    with pytest.raises(ConfigError):
        PostprocConfig(mode="blob")
    with pytest.raises(ConfigError):
        PostprocConfig(peak_threshold=1.5)


@pytest.mark.parametrize("mode", ["distance-watershed", "marker-watershed"])
def test_flat_cells_are_not_oversegmented(mode):
    # default cells are much wider than tall, so their distance map has broad plateaus
    from cellseg.metrics import seg_score
    _, lab = gen_synthetic(SynthParams(seed=0))
    out = instances_from_masks((lab > 0).astype(np.float32), PostprocConfig(mode=mode),
                               heatmap=render_center_heatmap(lab))
    assert out.max() == 3 and seg_score(lab, out) == 1.0
