import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celltissue.labels import (BC, TC, CellPoint, merge_annotations, radius_in_pixels, rasterize_label_index,
                               rasterize_points, read_points_csv, write_points_csv)
from oracles import disk_pixel_count, nearest_center_map


def test_radius_conversion():
    assert radius_in_pixels(1.4, 0.2) == 7
    assert radius_in_pixels(1.5, 0.5) == 3
    with pytest.raises(ValueError):
        radius_in_pixels(0, 0.2)


def test_empty_points_give_background():
    m = rasterize_points([], 16)
    assert m.shape == (3, 16, 16)
    assert np.all(m[0] == 1) and m[1:].sum() == 0


def test_single_disk_has_149_pixels():
    assert disk_pixel_count(7) == 149
    m = rasterize_points([CellPoint(32, 32, TC)], 64)
    assert int(m[TC].sum()) == 149
    assert int(m[BC].sum()) == 0


def test_overlap_goes_to_nearest_center():
    pts = [CellPoint(30, 32, TC), CellPoint(34, 32, BC)]
    idx = rasterize_label_index(pts, 64, 7)
    ref = np.array(nearest_center_map([(p.x, p.y, p.class_id) for p in pts], 64, 7))
    np.testing.assert_array_equal(idx, ref)
    assert (idx > 0).sum() < 2 * 149


@given(st.lists(st.tuples(st.integers(0, 23), st.integers(0, 23), st.sampled_from([1, 2])), max_size=6),
       st.integers(1, 6))
def test_rasterize_matches_brute_force(pts, radius):
    points = [CellPoint(x, y, c) for x, y, c in pts]
    idx = rasterize_label_index(points, 24, radius)
    np.testing.assert_array_equal(idx, np.array(nearest_center_map(pts, 24, radius)))


@given(st.lists(st.tuples(st.floats(0, 39.9), st.floats(0, 39.9), st.sampled_from([1, 2])), max_size=5))
def test_one_hot_invariant(pts):
    m = rasterize_points([CellPoint(x, y, c) for x, y, c in pts], 40, 1.0, 0.25)
    assert np.all(m.sum(axis=0) == 1)
    assert set(np.unique(m)) <= {0.0, 1.0}


def test_permutation_invariant_when_disks_are_apart(rng):
    pts = [CellPoint(8, 8, TC), CellPoint(30, 10, BC), CellPoint(20, 30, TC), CellPoint(40, 40, BC)]
    a = rasterize_points(pts, 48, 1.4, 0.2)
    b = rasterize_points([pts[i] for i in rng.permutation(4)], 48, 1.4, 0.2)
    np.testing.assert_array_equal(a, b)


def test_outside_points_are_reported():
    with pytest.raises(ValueError, match=r"indices \[1, 2\]"):
        rasterize_points([CellPoint(1, 1, TC), CellPoint(64, 0, TC), CellPoint(-1, 3, BC)], 64)


def test_bit_exact_reruns():
    pts = [CellPoint(10.5, 20.25, TC), CellPoint(14, 22, BC)]
    assert rasterize_points(pts, 64).tobytes() == rasterize_points(pts, 64).tobytes()


def test_points_csv_roundtrip(tmp_path):
    pts = [CellPoint(1, 2, TC), CellPoint(3.5, 4.25, BC)]
    path = tmp_path / "p.csv"
    write_points_csv(path, pts)
    assert path.read_text().splitlines()[0] == "x,y,class"
    assert read_points_csv(path) == pts


def test_consensus_examples():
    x = [CellPoint(10, 10, TC), CellPoint(40, 40, BC)]
    r = merge_annotations(x, x, 15)
    assert len(r.agreed) == 2 and not r.class_conflicts and not r.only_a and not r.only_b

    r = merge_annotations([CellPoint(0, 0, TC)], [CellPoint(100, 0, TC)], 15)
    assert len(r.only_a) == 1 and len(r.only_b) == 1 and not r.agreed

    r = merge_annotations([CellPoint(10, 10, TC)], [CellPoint(12, 10, BC)], 15)
    assert len(r.class_conflicts) == 1


def test_consensus_midpoint_and_greedy_order():
    a = [CellPoint(0, 0, TC), CellPoint(10, 0, TC)]
    b = [CellPoint(6, 0, TC)]
    r = merge_annotations(a, b, 15)
    # the closer pair (distance 4) wins
    assert r.agreed == [CellPoint(8, 0, TC)]
    assert r.only_a == [CellPoint(0, 0, TC)]


@given(st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200), st.sampled_from([1, 2])), max_size=12),
       st.lists(st.tuples(st.integers(0, 200), st.integers(0, 200), st.sampled_from([1, 2])), max_size=12))
def test_consensus_partitions_every_point(pa, pb):
    a = [CellPoint(*p) for p in pa]
    b = [CellPoint(*p) for p in pb]
    r = merge_annotations(a, b, 15)
    assert len(r.agreed) + len(r.class_conflicts) + len(r.only_a) == len(a)
    assert len(r.agreed) + len(r.class_conflicts) + len(r.only_b) == len(b)


@given(st.sets(st.tuples(st.integers(0, 300), st.integers(0, 300)), max_size=15))
def test_consensus_self_merge_is_clean(coords):
    x = [CellPoint(cx, cy, 1 + i % 2) for i, (cx, cy) in enumerate(sorted(coords))]
    r = merge_annotations(x, x, 15)
    assert not r.class_conflicts and not r.only_a and not r.only_b
