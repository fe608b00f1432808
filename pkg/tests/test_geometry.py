import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celltissue.geometry import (GeometryError, PatchGeometry, cell_to_tissue_point, crop_and_resize,
                                 crop_and_upsample, crop_window, downsample_and_pad, tissue_to_cell_point,
                                 window_on_grid)
from oracles import bilinear_reference


def small_geom(c_x=0.5, c_y=0.5, cell=8, fov=4, ds=2):
    return PatchGeometry(c_x=c_x, c_y=c_y, mpp_cell=0.5, cell_side_px=cell, fov_ratio=fov,
                         tissue_store_downsample=ds)


@pytest.mark.parametrize("c, expected", [
    ((0.5, 0.5), (384, 384, 256)),
    ((0.125, 0.125), (0, 0, 256)),
    ((0.875, 0.5), (384, 768, 256)),
])
def test_crop_window_examples(c, expected):
    geom = PatchGeometry(c_x=c[0], c_y=c[1])
    assert tuple(crop_window(geom, 1024)) == expected


def test_crop_window_errors():
    with pytest.raises(GeometryError, match="incompatible geometry"):
        crop_window(PatchGeometry(), 1022)
    with pytest.raises(GeometryError, match="cell patch outside tissue patch"):
        crop_window(PatchGeometry(c_x=0.05), 1024)
    with pytest.raises(GeometryError, match="cell patch outside tissue patch"):
        PatchGeometry(c_y=0.9).validate()


def test_translation_consistency():
    S = 1024
    for base in range(128, 1024 - 128 - 16, 37):
        ref = crop_window(PatchGeometry(c_x=base / S), S)
        for k in range(16):
            win = crop_window(PatchGeometry(c_x=(base + k) / S), S)
            assert win.left == ref.left + k
            assert win.top == ref.top


@given(st.integers(1, 8), st.integers(1, 40), st.floats(0, 1), st.floats(0, 1))
def test_window_always_inside_grid(fov, side, u, v):
    grid = fov * side
    lo = 1 / (2 * fov)
    c_x, c_y = lo + u * (1 - 2 * lo), lo + v * (1 - 2 * lo)
    win = window_on_grid(c_x, c_y, fov, grid)
    assert win.side == side
    assert 0 <= win.top and win.top + side <= grid
    assert 0 <= win.left and win.left + side <= grid


@pytest.mark.parametrize("mode", ["nearest", "bilinear"])
def test_constant_field_stays_constant(mode):
    geom = small_geom(c_x=0.375, c_y=0.625)
    field = np.full((2, 16, 16), 0.37)
    out = crop_and_upsample(field, geom, mode)
    assert out.shape == (2, 8, 8)
    np.testing.assert_allclose(out, 0.37, atol=1e-15)


def test_nearest_block_replication():
    # grid 8, fov 4 -> window side 2 at rows/cols 3..4 for a centered patch
    field = np.zeros((8, 8))
    field[3, 3], field[3, 4], field[4, 3], field[4, 4] = 1.0, 2.0, 3.0, 4.0
    out = crop_and_resize(field, 0.5, 0.5, 4, 8, mode="nearest")
    expected = np.kron(np.array([[1.0, 2.0], [3.0, 4.0]]), np.ones((4, 4)))
    np.testing.assert_array_equal(out, expected)


def test_bilinear_ramp_matches_reference():
    S = 64
    yy, xx = np.mgrid[0:S, 0:S]
    ramp = 0.3 * xx - 0.7 * yy + 2.0
    for c in [(0.5, 0.5), (0.125, 0.875), (0.3, 0.6)]:
        win = window_on_grid(c[0], c[1], 4, S)
        ours = crop_and_resize(ramp, c[0], c[1], 4, 64, mode="bilinear")
        ref = np.array(bilinear_reference(ramp.tolist(), win.top, win.left, win.side, 64))
        np.testing.assert_allclose(ours, ref, atol=1e-9, rtol=0)


@given(st.integers(0, 2 ** 31 - 1), st.sampled_from([(16, 4, 8), (32, 4, 16), (24, 3, 16), (16, 2, 12)]))
def test_bilinear_random_fields_match_reference(seed, sizes):
    grid, fov, out_side = sizes
    rng = np.random.default_rng(seed)
    field = rng.normal(size=(grid, grid))
    lo = 1 / (2 * fov)
    c = lo + rng.random(2) * (1 - 2 * lo)
    win = window_on_grid(c[0], c[1], fov, grid)
    ours = crop_and_resize(field, c[0], c[1], fov, out_side, mode="bilinear")
    ref = np.array(bilinear_reference(field.tolist(), win.top, win.left, win.side, out_side))
    np.testing.assert_allclose(ours, ref, atol=1e-9, rtol=0)


def test_labels_require_nearest():
    geom = small_geom()
    with pytest.raises(GeometryError, match="labels require nearest"):
        crop_and_upsample(np.ones((16, 16), dtype=np.uint8), geom, "bilinear")
    out = crop_and_upsample(np.ones((16, 16), dtype=np.uint8), geom, "nearest")
    assert out.dtype == np.uint8


def test_downsample_and_pad_ones():
    geom = small_geom(c_x=0.375, c_y=0.625)
    out = downsample_and_pad(np.ones((8, 8)), geom)
    win = crop_window(geom)
    inside = np.zeros((16, 16), bool)
    inside[win.slices()] = True
    assert np.all(out[inside] == 1.0)
    assert np.all(out[~inside] == 0.0)


def test_pooling_block_mean():
    geom = small_geom()  # cell 8 onto a window of 4: factor 2
    m = np.zeros((8, 8))
    m[0:2, 0:2] = [[0, 0], [0, 4]]
    out = downsample_and_pad(m, geom)
    win = crop_window(geom)
    assert out[win.top, win.left] == 1.0


def test_pooling_factor_must_be_integer():
    geom = small_geom()
    # a stored side of 12 gives a window of 3, which 8 cell pixels cannot pool onto evenly
    with pytest.raises(GeometryError, match="non-integer pooling factor"):
        downsample_and_pad(np.ones((8, 8)), geom, tissue_store_side_px=12)


@given(st.integers(0, 2 ** 31 - 1))
def test_roundtrip_equals_blockwise_mean(seed):
    rng = np.random.default_rng(seed)
    geom = small_geom(c_x=0.25 + 0.0625 * rng.integers(0, 9), c_y=0.25 + 0.0625 * rng.integers(0, 9))
    m = rng.normal(size=(8, 8))
    back = crop_and_upsample(downsample_and_pad(m, geom), geom, "nearest")
    block = m.reshape(4, 2, 4, 2).mean(axis=(1, 3))
    np.testing.assert_allclose(back, np.kron(block, np.ones((2, 2))), atol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_downsample_preserves_mass(seed):
    rng = np.random.default_rng(seed)
    geom = small_geom(c_x=0.125 + 0.0625 * rng.integers(0, 13), c_y=0.125 + 0.0625 * rng.integers(0, 13))
    m = rng.random((3, 8, 8))
    out = downsample_and_pad(m, geom)
    np.testing.assert_allclose((out * 2 ** 2).sum(axis=(1, 2)), m.sum(axis=(1, 2)), rtol=1e-12)


@given(st.integers(0, 2 ** 31 - 1))
def test_nearest_upsample_commutes_with_argmax(seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, 3, size=(16, 16))
    onehot = (np.arange(3)[:, None, None] == idx).astype(float)
    c = 0.125 + 0.0625 * rng.integers(0, 13, size=2)
    up = crop_and_resize(onehot, c[0], c[1], 4, 16, mode="nearest")
    win = window_on_grid(c[0], c[1], 4, 16)
    expected = np.kron(idx[win.slices()], np.ones((4, 4), int))
    np.testing.assert_array_equal(up.argmax(axis=0), expected)


def test_point_examples():
    geom = PatchGeometry()
    assert cell_to_tissue_point(512, 512, geom)[:2] == (512, 512)
    assert cell_to_tissue_point(0, 0, geom)[:2] == (384, 384)
    back = tissue_to_cell_point(384, 384, geom)
    assert back == (0, 0, True)


def test_point_roundtrip_error_bound(rng):
    for _ in range(1000):
        c = 0.125 + rng.random(2) * 0.75
        geom = PatchGeometry(c_x=c[0], c_y=c[1])
        x, y = rng.uniform(0, 1024, 2)
        t = cell_to_tissue_point(x, y, geom, snap=True)
        assert t.inside
        bx, by, _ = tissue_to_cell_point(t.x, t.y, geom)
        assert abs(bx - x) < geom.tissue_store_downsample and abs(by - y) < geom.tissue_store_downsample
        exact = cell_to_tissue_point(x, y, geom)
        bx, by, _ = tissue_to_cell_point(exact.x, exact.y, geom)
        assert abs(bx - x) < 1e-9 and abs(by - y) < 1e-9


def test_out_of_grid_points_are_flagged_not_clamped():
    geom = PatchGeometry()
    p = tissue_to_cell_point(10, 10, geom)
    assert not p.inside and p.x < 0 and p.y < 0
    q = cell_to_tissue_point(-3000, 10, geom)
    assert not q.inside and q.x < 0


def test_operators_are_bitwise_reproducible(rng):
    geom = small_geom(c_x=0.3125, c_y=0.5)
    field = rng.random((2, 16, 16))
    a = crop_and_upsample(field, geom)
    b = crop_and_upsample(field.copy(), geom)
    assert a.tobytes() == b.tobytes()
