import json
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from celltissue.dataio import (DatasetValidationError, Rect, RoiSpec, load_dataset, pair_overlapping,
                               pair_roi_in_region, remap_mask, save_manifest, split_wsis, write_pair)
from celltissue.geometry import PatchGeometry
from celltissue.labels import BC, TC, CellPoint
from oracles import roi_window_oracle

GEOM = PatchGeometry(c_x=0.5, c_y=0.5, mpp_cell=0.5, cell_side_px=16, fov_ratio=4, tissue_store_downsample=4)


def make_pair(root, pid, wsi="W1", subset="train", geom=GEOM, points=None):
    rng = np.random.default_rng(int(pid))
    store = geom.tissue_store_side_px
    mask = rng.choice([1, 2, 255], size=(store, store)).astype(np.uint8)
    return write_pair(root, pid, wsi, "kidney", subset, geom, rng.random((3, geom.cell_side_px, geom.cell_side_px)),
                      rng.random((3, store, store)), mask,
                      points if points is not None else [CellPoint(3, 4, TC), CellPoint(10.5, 2, BC)])


def test_empty_manifest(tmp_path):
    save_manifest([], tmp_path)
    assert load_dataset(tmp_path) == []


def test_roundtrip(tmp_path):
    recs = [make_pair(tmp_path, "001"), make_pair(tmp_path, "002", wsi="W2", subset="test")]
    save_manifest(recs, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == 2
    for a, b in zip(recs, back):
        assert (a.pair_id, a.wsi_id, a.organ, a.subset) == (b.pair_id, b.wsi_id, b.organ, b.subset)
        assert a.geometry == b.geometry and a.cell_points == b.cell_points
        np.testing.assert_array_equal(a.load_tissue_mask(), b.load_tissue_mask())
    # saving the loaded records reproduces the manifest byte for byte
    first = (tmp_path / "manifest.json").read_text()
    save_manifest(back, tmp_path)
    assert (tmp_path / "manifest.json").read_text() == first


def test_bad_center_names_the_pair(tmp_path):
    recs = [make_pair(tmp_path, "001"), make_pair(tmp_path, "002")]
    save_manifest(recs, tmp_path)
    doc = json.loads((tmp_path / "manifest.json").read_text())
    doc["records"][1]["geometry"]["c_x"] = 0.05
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetValidationError, match="pair 002: cell patch outside tissue patch"):
        load_dataset(tmp_path)


def test_every_violation_is_listed(tmp_path):
    recs = [make_pair(tmp_path, "001"), make_pair(tmp_path, "002", wsi="W1", subset="val")]
    save_manifest(recs + [recs[0]], tmp_path)
    (tmp_path / "cell" / "002.png").unlink()
    with pytest.raises(DatasetValidationError) as exc:
        load_dataset(tmp_path)
    text = "\n".join(exc.value.problems)
    assert "duplicate pair_id" in text
    assert "appears in subsets" in text
    assert "missing files" in text


def test_size_mismatch(tmp_path):
    rec = make_pair(tmp_path, "001")
    save_manifest([rec], tmp_path)
    from PIL import Image
    Image.new("RGB", (8, 8)).save(rec.cell_image_path)
    with pytest.raises(DatasetValidationError, match="cell_image is 8x8, expected 16x16"):
        load_dataset(tmp_path)


@pytest.mark.parametrize("n, sizes", [(10, (6, 2, 2)), (5, (3, 1, 1))])
def test_split_sizes(n, sizes):
    out = split_wsis({f"W{i}": "kidney" for i in range(n)}, seed=0)
    assert tuple(list(out.values()).count(s) for s in ("train", "val", "test")) == sizes


def test_split_is_seeded():
    wsis = {f"W{i}": ("lung" if i % 3 else "kidney") for i in range(20)}
    assert split_wsis(wsis, seed=7) == split_wsis(wsis, seed=7)
    assert split_wsis(wsis, seed=7) != split_wsis(wsis, seed=8)


def test_split_rejects_bad_ratios():
    with pytest.raises(ValueError):
        split_wsis({"a": "x"}, ratios=(0.5, 0.5, 0.5))


@given(st.dictionaries(st.text("abcdef", min_size=1, max_size=4), st.sampled_from(["kidney", "lung", "breast"]),
                       max_size=40),
       st.integers(0, 1000))
def test_split_keeps_organ_ratios(wsis, seed):
    out = split_wsis(wsis, seed=seed)
    assert set(out) == set(wsis)
    for organ in set(wsis.values()):
        ids = [w for w, o in wsis.items() if o == organ]
        for name, r in zip(("train", "val", "test"), (0.6, 0.2, 0.2)):
            assert abs(sum(out[w] == name for w in ids) - r * len(ids)) <= 1


def test_pair_overlapping():
    spec = RoiSpec("fully_overlapping", Rect(100, 200, 600, 700))
    pairs = pair_overlapping(spec, 128, 512)
    assert len(pairs) == 16
    assert pairs[0].c_x == 0.125 and pairs[0].c_y == 0.125
    allowed = {0.125 + 0.25 * k for k in range(4)}
    for p in pairs:
        assert p.c_x in allowed and p.c_y in allowed
        assert p.tissue.contains(p.cell)
        PatchGeometry(c_x=p.c_x, c_y=p.c_y, cell_side_px=128, fov_ratio=4).validate()
    with pytest.raises(ValueError):
        pair_overlapping(RoiSpec("fully_overlapping", Rect(0, 0, 300, 300)), 128, 512)


def _check_roi_pairs(region, roi, cell=128, tissue=512):
    pairs = pair_roi_in_region(RoiSpec("roi_in_region", Rect(*region), [Rect(*roi)]), cell, tissue)
    assert sorted((p.tissue.top, p.tissue.left) for p in pairs) == sorted(roi_window_oracle(region, roi, cell, tissue))
    for p in pairs:
        assert Rect(*region).contains(p.tissue)
        assert p.tissue.contains(Rect(*roi)) and p.tissue.contains(p.cell)
        # the cell patch is inside the tissue patch, so the geometry is valid
        PatchGeometry(c_x=p.c_x, c_y=p.c_y, cell_side_px=cell, fov_ratio=tissue // cell).validate()
    return pairs


def test_roi_in_large_region_has_16_candidates():
    pairs = _check_roi_pairs((0, 0, 2048, 2048), (896, 896, 128, 128))
    assert len(pairs) == 16


def test_roi_in_exact_region():
    pairs = _check_roi_pairs((0, 0, 512, 512), (192, 192, 128, 128))
    assert len(pairs) == 1 and (pairs[0].c_x, pairs[0].c_y) == (0.5, 0.5)
    pairs = _check_roi_pairs((0, 0, 512, 512), (10, 300, 100, 100))
    assert len(pairs) == 1 and (pairs[0].c_x, pairs[0].c_y) != (0.5, 0.5)


def test_roi_at_corner_has_fewer():
    assert 0 < len(_check_roi_pairs((0, 0, 2048, 2048), (0, 0, 100, 100))) < 16


@given(st.integers(512, 1400), st.integers(512, 1400), st.integers(0, 1400), st.integers(0, 1400),
       st.integers(1, 128), st.integers(1, 128))
def test_roi_pairs_match_oracle(rh, rw, t, l, h, w):
    if t + h > rh or l + w > rw:
        return
    pairs = _check_roi_pairs((0, 0, rh, rw), (t, l, h, w))
    assert len(pairs) <= 16


def test_oversized_roi_is_skipped_with_warning():
    spec = RoiSpec("roi_in_region", Rect(0, 0, 1024, 1024), [Rect(0, 0, 300, 100), Rect(10, 10, 50, 50)])
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pairs = pair_roi_in_region(spec, 128, 512)
    assert any("larger than 128" in str(w.message) for w in caught)
    assert {p.roi_index for p in pairs} == {1}


def test_remap_mask():
    names = {1: "invasive tumor", 2: "tumor-associated stroma", 3: "inflamed stroma", 7: "excluded"}
    mask = np.array([[1, 2], [3, 7], [9, 1]])
    out = remap_mask(mask, names)
    np.testing.assert_array_equal(out, [[1, 2], [2, 255], [255, 1]])
