import numpy as np
import pytest

from cellseg.errors import DimensionError, FormatError, PlacementError, PlanError
from cellseg.postproc import connected_components
from cellseg.volumestore import (SynthParams, extract_windows, gen_synthetic, parse_rvf, read_ppm, read_rvf,
                                 resize_bilinear, resize_nearest, rvf_bytes, stitch, tile_plan, write_ppm,
                                 write_rvf)


# --- RVF ----------------------------------------------------------------------

@pytest.mark.parametrize("dtype", [np.uint8, np.uint16, np.float32, np.uint32])
def test_rvf_round_trip_is_bit_exact(tmp_path, rng, dtype):
    if np.issubdtype(dtype, np.integer):
        vol = rng.integers(0, np.iinfo(dtype).max, (3, 4, 5), dtype=dtype)
    else:
        vol = rng.standard_normal((3, 4, 5)).astype(dtype)
    path = tmp_path / "v.rvf"
    write_rvf(vol, path)
    back = read_rvf(path)
    assert back.dtype == vol.dtype
    np.testing.assert_array_equal(back, vol)
    write_rvf(back, tmp_path / "w.rvf")
    assert (tmp_path / "w.rvf").read_bytes() == path.read_bytes()


def test_rvf_header_layout():
    data = rvf_bytes(np.zeros((1, 2, 3), dtype=np.uint16))
    assert data.startswith(b'{"dtype":"u16","shape":[1,2,3],"order":"ZYX"}\n')
    assert len(data) == data.index(b"\n") + 1 + 12


def test_u16_values_survive(tmp_path):
    vol = np.array([[[0, 1, 65535, 4096]]], dtype=np.uint16)
    write_rvf(vol, tmp_path / "a.rvf")
    np.testing.assert_array_equal(read_rvf(tmp_path / "a.rvf"), vol)


@pytest.mark.parametrize("mutate", [
    lambda d: d[:-1],                                      # short payload
    lambda d: d + b"\x00",                                 # long payload
    lambda d: d.replace(b'"u8"', b'"i8"'),                 # unknown dtype
    lambda d: d.replace(b"[2,2,2]", b"[2,2,3]"),           # shape/payload mismatch
    lambda d: d.replace(b"[2,2,2]", b"[2,2]"),             # wrong rank
    lambda d: d.replace(b'"ZYX"', b'"XYZ"'),
    lambda d: b"RVF" + d,                                  # bad magic
    lambda d: d.replace(b"\n", b" "),                     # no header line
])
def test_rvf_rejects_corruption(mutate):
    data = rvf_bytes(np.ones((2, 2, 2), dtype=np.uint8))
    with pytest.raises(FormatError):
        parse_rvf(mutate(data))


def test_rvf_rejects_unsupported_arrays():
    with pytest.raises(FormatError):
        rvf_bytes(np.zeros((1, 1, 1), dtype=np.int64))
    with pytest.raises(DimensionError):
        rvf_bytes(np.zeros((2, 2)))


def test_ppm_round_trip(tmp_path, rng):
    img = rng.random((3, 5, 7)).astype(np.float32)
    write_ppm(img, tmp_path / "p.ppm")
    raw = (tmp_path / "p.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    back = read_ppm(tmp_path / "p.ppm")
    np.testing.assert_array_equal(back, np.rint(img * 255).astype(np.uint8))


# --- synthetic generator ----------------------------------------------------------

def test_synth_deterministic():
    p = SynthParams(seed=11)
    v1, l1 = gen_synthetic(p)
    v2, l2 = gen_synthetic(SynthParams(seed=11))
    assert v1.tobytes() == v2.tobytes() and l1.tobytes() == l2.tobytes()
    v3, _ = gen_synthetic(SynthParams(seed=12))
    assert v3.tobytes() != v1.tobytes()


def test_synth_without_cells_is_noise_only():
    vol, labels = gen_synthetic(SynthParams(cells=0, seed=1))
    assert labels.max() == 0
    assert vol.dtype == np.float32 and 0 <= vol.min() and vol.max() <= 1
    assert vol.mean() < 0.05


def test_synth_cells_are_separate_and_consistent():
    p = SynthParams(seed=4, noise=0.0)
    vol, labels = gen_synthetic(p)
    assert sorted(np.unique(labels)) == [0, 1, 2, 3]
    # non-touching: each label is its own 26-connected component
    assert connected_components(labels > 0).max() == 3
    assert (vol[labels > 0] > 0).all()
    assert (vol[labels == 0] == 0).all()


@pytest.mark.parametrize("seed", range(5))
def test_center_slice_brighter_than_top_slice(seed):
    vol, labels = gen_synthetic(SynthParams(seed=seed, noise=0.0))
    for lab in range(1, labels.max() + 1):
        zs = np.unique(np.nonzero(labels == lab)[0])
        if len(zs) < 3:
            continue
        top = zs[0]
        center = zs[len(zs) // 2]
        assert vol[center][labels[center] == lab].mean() > vol[top][labels[top] == lab].mean()


def test_synth_placement_error():
    p = SynthParams(shape=(8, 40, 40), cells=10, max_attempts=50, seed=0)
    with pytest.raises(PlacementError) as info:
        gen_synthetic(p)
    assert info.value.placed < 10


def test_synth_rejects_oversized_axes():
    with pytest.raises(DimensionError):
        SynthParams(shape=(4, 96, 96), semi_axes_max=(3.0, 16.0, 16.0))


def test_touching_pair_is_one_component():
    vol, labels = gen_synthetic(SynthParams(shape=(16, 40, 56), touching=True, semi_axes_min=(6, 7, 7),
                                            semi_axes_max=(6.5, 7, 7), noise=0.0))
    assert sorted(np.unique(labels)) == [0, 1, 2]
    assert (labels == 1).sum() == (labels == 2).sum()
    assert connected_components(labels > 0).max() == 1


# --- resizing -----------------------------------------------------------------

def test_resize_identity_and_constant(rng):
    img = rng.random((7, 9))
    np.testing.assert_array_equal(resize_bilinear(img, 7, 9), img)
    np.testing.assert_allclose(resize_bilinear(np.full((5, 6), 2.5), 13, 4), 2.5)
    with pytest.raises(DimensionError):
        resize_bilinear(img, 0, 3)
    with pytest.raises(DimensionError):
        resize_nearest(img, 3, -1)


def test_resize_bilinear_matches_upsample_convention():
    out = resize_bilinear(np.array([[0.0, 1.0]]), 1, 4)
    np.testing.assert_allclose(out[0], [0, 0.25, 0.75, 1])


def test_resize_nearest_preserves_labels(rng):
    lab = rng.integers(0, 6, (11, 13)).astype(np.uint32) * 7
    for h, w in [(5, 5), (23, 31), (11, 13)]:
        out = resize_nearest(lab, h, w)
        assert out.shape == (h, w)
        assert set(np.unique(out)) <= set(np.unique(lab))
    np.testing.assert_array_equal(resize_nearest(lab, 11, 13), lab)


# --- tiling -------------------------------------------------------------------

def test_tile_plan_small():
    plan = tile_plan(100, 100, 60, 10)
    assert plan.grid == (2, 2)
    assert plan.stride == (40, 40)
    assert sorted(plan.origins) == [(0, 0), (0, 40), (40, 0), (40, 40)]


def test_tile_plan_six_patches():
    plan = tile_plan(1745, 2440, 873)
    assert plan.grid == (2, 3) and len(plan.origins) == 6


@pytest.mark.parametrize("h,w,p,ov", [(100, 100, 60, 10), (97, 131, 40, 7), (50, 50, 50, 0), (64, 200, 64, 16)])
def test_tile_plan_covers_and_stays_inside(h, w, p, ov):
    plan = tile_plan(h, w, p, ov)
    cover = np.zeros((h, w), dtype=int)
    for y, x in plan.origins:
        assert 0 <= y <= h - p and 0 <= x <= w - p
        cover[y:y + p, x:x + p] += 1
    assert cover.min() >= 1
    assert max(plan.stride) <= p - ov


def test_tile_plan_errors():
    with pytest.raises(PlanError):
        tile_plan(50, 80, 60)
    with pytest.raises(PlanError):
        tile_plan(80, 80, 20, 20)


def test_stitch_identical_and_constant(rng):
    plan = tile_plan(70, 90, 40, 8)
    full = rng.random((70, 90))
    windows = extract_windows(full, plan)
    np.testing.assert_allclose(stitch(plan, windows), full, atol=1e-12)
    const = stitch(plan, [np.full((40, 40), 0.3) for _ in plan.origins])
    np.testing.assert_allclose(const, 0.3)
    with pytest.raises(PlanError):
        stitch(plan, windows[:-1])
