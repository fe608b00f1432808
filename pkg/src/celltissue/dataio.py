"""Dataset layout on disk, validation, WSI-level splitting and TIGER-style pairing.

A dataset root holds ``manifest.json`` plus the files it references::

    {
      "version": 1,
      "records": [
        {"pair_id": "001", "wsi_id": "W1", "organ": "kidney", "subset": "train",
         "geometry": {"c_x": 0.5, "c_y": 0.5, "mpp_cell": 0.2, "cell_side_px": 1024,
                      "fov_ratio": 4, "tissue_store_downsample": 4},
         "cell_image": "cell/001.png", "tissue_image": "tissue/001.png",
         "cell_points": "cell/001.csv", "tissue_mask": "tissue/001_mask.png"}
      ]
    }

Images are 8-bit RGB PNG; tissue masks are single-channel PNG with codes
BG=1, CA=2, UNK=255.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from PIL import Image

from .geometry import GeometryError, PatchGeometry
from .labels import CellPoint, read_points_csv, write_points_csv
from .postprocess import TISSUE_BG, TISSUE_CA, TISSUE_UNK

SUBSETS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1
VALID_MASK_CODES = (TISSUE_BG, TISSUE_CA, TISSUE_UNK)


class DatasetValidationError(ValueError):
    """Collects every violation found while loading a dataset."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__(f"{len(problems)} validation problem(s):\n  " + "\n  ".join(problems))


@dataclass
class PatchPairRecord:
    pair_id: str
    wsi_id: str
    organ: str
    subset: str
    geometry: PatchGeometry
    cell_image_path: Path
    tissue_image_path: Path
    tissue_mask_path: Path
    cell_points: list = field(default_factory=list)
    cell_points_path: Path | None = None
    meta: dict = field(default_factory=dict)

    def load_cell_image(self) -> np.ndarray:
        return read_rgb(self.cell_image_path)

    def load_tissue_image(self) -> np.ndarray:
        return read_rgb(self.tissue_image_path)

    def load_tissue_mask(self) -> np.ndarray:
        return np.asarray(Image.open(self.tissue_mask_path))


def read_rgb(path: str | Path) -> np.ndarray:
    """PNG to ``(3, H, W)`` floats in ``[0, 1]``."""
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=float) / 255.0
    return arr.transpose(2, 0, 1)


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image).transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


def _record_to_json(rec: PatchPairRecord, root: Path) -> dict:
    def rel(p):
        return Path(p).resolve().relative_to(root.resolve()).as_posix()

    return {
        "pair_id": rec.pair_id,
        "wsi_id": rec.wsi_id,
        "organ": rec.organ,
        "subset": rec.subset,
        "geometry": rec.geometry.to_dict(),
        "cell_image": rel(rec.cell_image_path),
        "tissue_image": rel(rec.tissue_image_path),
        "cell_points": rel(rec.cell_points_path),
        "tissue_mask": rel(rec.tissue_mask_path),
        **({"meta": rec.meta} if rec.meta else {}),
    }


def save_manifest(records: Sequence[PatchPairRecord], root: str | Path) -> Path:
    root = Path(root)
    doc = {"version": MANIFEST_VERSION, "records": [_record_to_json(r, root) for r in records]}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2))
    return path


def write_pair(root: str | Path, pair_id: str, wsi_id: str, organ: str, subset: str,
               geometry: PatchGeometry, cell_image: np.ndarray, tissue_image: np.ndarray,
               tissue_mask: np.ndarray, points: Sequence[CellPoint], meta: dict | None = None) -> PatchPairRecord:
    """Write the four files of one pair under ``root`` and return its record."""
    root = Path(root)
    (root / "cell").mkdir(parents=True, exist_ok=True)
    (root / "tissue").mkdir(parents=True, exist_ok=True)
    rec = PatchPairRecord(
        pair_id=pair_id, wsi_id=wsi_id, organ=organ, subset=subset, geometry=geometry,
        cell_image_path=root / "cell" / f"{pair_id}.png",
        tissue_image_path=root / "tissue" / f"{pair_id}.png",
        tissue_mask_path=root / "tissue" / f"{pair_id}_mask.png",
        cell_points=list(points),
        cell_points_path=root / "cell" / f"{pair_id}.csv",
        meta=dict(meta or {}),
    )
    write_rgb(rec.cell_image_path, cell_image)
    write_rgb(rec.tissue_image_path, tissue_image)
    write_mask(rec.tissue_mask_path, tissue_mask)
    write_points_csv(rec.cell_points_path, points)
    return rec


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def load_dataset(root: str | Path, check_files: bool = True,
                 cell_classes: Sequence[int] = (1, 2)) -> list[PatchPairRecord]:
    """Parse and validate ``root/manifest.json``.

    Raises DatasetValidationError listing every problem found (missing files,
    size mismatches, containment violations, duplicate ids, WSIs spread over
    several subsets, bad points).
    """
    root = Path(root)
    path = root / MANIFEST_NAME
    if not path.exists():
        raise DatasetValidationError([f"missing manifest {path}"])
    doc = json.loads(path.read_text())
    problems: list[str] = []
    records: list[PatchPairRecord] = []
    seen: set[str] = set()
    wsi_subset: dict[str, str] = {}
    for i, raw in enumerate(doc.get("records", [])):
        pid = str(raw.get("pair_id", f"#{i}"))
        where = f"pair {pid}"
        missing = [k for k in ("pair_id", "wsi_id", "organ", "subset", "geometry", "cell_image",
                               "tissue_image", "cell_points", "tissue_mask") if k not in raw]
        if missing:
            problems.append(f"{where}: missing fields {missing}")
            continue
        if pid in seen:
            problems.append(f"{where}: duplicate pair_id")
        seen.add(pid)
        subset = raw["subset"]
        if subset not in SUBSETS:
            problems.append(f"{where}: unknown subset {subset!r}")
        prev = wsi_subset.setdefault(raw["wsi_id"], subset)
        if prev != subset:
            problems.append(f"{where}: wsi {raw['wsi_id']} appears in subsets {prev!r} and {subset!r}")
        try:
            geom = PatchGeometry.from_dict(raw["geometry"])
            geom.validate()
            store = geom.tissue_store_side_px
        except GeometryError as exc:
            problems.append(f"{where}: {exc}")
            continue
        paths = {k: root / raw[k] for k in ("cell_image", "tissue_image", "cell_points", "tissue_mask")}
        if check_files:
            absent = [k for k, p in paths.items() if not p.exists()]
            if absent:
                problems.append(f"{where}: missing files {[str(paths[k]) for k in absent]}")
                continue
            expected = {"cell_image": geom.cell_side_px, "tissue_image": store, "tissue_mask": store}
            for key, side in expected.items():
                size = _image_size(paths[key])
                if size != (side, side):
                    problems.append(f"{where}: {key} is {size[0]}x{size[1]}, expected {side}x{side}")
        points: list[CellPoint] = []
        if paths["cell_points"].exists():
            try:
                points = read_points_csv(paths["cell_points"])
            except (ValueError, KeyError) as exc:
                problems.append(f"{where}: unreadable cell points ({exc})")
            for k, p in enumerate(points):
                if not (0 <= p.x < geom.cell_side_px and 0 <= p.y < geom.cell_side_px):
                    problems.append(f"{where}: cell point {k} at ({p.x}, {p.y}) outside the cell patch")
                if p.class_id not in cell_classes:
                    problems.append(f"{where}: cell point {k} has unknown class {p.class_id}")
        records.append(PatchPairRecord(
            pair_id=pid, wsi_id=raw["wsi_id"], organ=raw["organ"], subset=subset, geometry=geom,
            cell_image_path=paths["cell_image"], tissue_image_path=paths["tissue_image"],
            tissue_mask_path=paths["tissue_mask"], cell_points=points,
            cell_points_path=paths["cell_points"], meta=dict(raw.get("meta") or {}),
        ))
    if problems:
        raise DatasetValidationError(problems)
    return records


def validate_mask_codes(record: PatchPairRecord) -> list[str]:
    mask = record.load_tissue_mask()
    bad = sorted(set(np.unique(mask).tolist()) - set(VALID_MASK_CODES))
    return [f"pair {record.pair_id}: tissue mask has unknown codes {bad}"] if bad else []


# -- splitting ---------------------------------------------------------------

def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer sizes summing to ``n`` closest to ``n * ratios``; leftovers go to the largest fractions."""
    quotas = [round(n * r, 9) for r in ratios]
    sizes = [int(math.floor(q)) for q in quotas]
    left = n - sum(sizes)
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[:left]:
        sizes[i] += 1
    return sizes


def split_wsis(wsi_organs: Mapping[str, str], ratios: Sequence[float] = (0.6, 0.2, 0.2),
               seed: int = 0, subsets: Sequence[str] = SUBSETS) -> dict[str, str]:
    """Assign every WSI to a subset, stratified by organ.

    Within each organ (sorted by name) the WSIs are shuffled with a generator
    seeded once by ``seed`` and cut by largest-remainder sizes.
    """
    if len(ratios) != len(subsets):
        raise ValueError("one ratio per subset required")
    if any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must be non-negative and sum to 1, got {list(ratios)}")
    rng = np.random.default_rng(seed)
    by_organ: dict[str, list[str]] = {}
    for wsi, organ in wsi_organs.items():
        by_organ.setdefault(organ, []).append(wsi)
    out: dict[str, str] = {}
    for organ in sorted(by_organ):
        ids = sorted(by_organ[organ])
        ids = [ids[i] for i in rng.permutation(len(ids))]
        start = 0
        for name, size in zip(subsets, largest_remainder(len(ids), ratios)):
            for wsi in ids[start:start + size]:
                out[wsi] = name
            start += size
    return out


# -- TIGER-style pairing ------------------------------------------------------

class Rect(NamedTuple):
    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width

    def contains(self, other: "Rect") -> bool:
        return (self.top <= other.top and self.left <= other.left
                and other.bottom <= self.bottom and other.right <= self.right)


@dataclass
class RoiSpec:
    source_kind: str  # "fully_overlapping" or "roi_in_region"
    region: Rect
    cell_rois: list = field(default_factory=list)
    resolution: float = 0.5

    @classmethod
    def from_dict(cls, data: dict) -> "RoiSpec":
        return cls(
            source_kind=data["source_kind"],
            region=Rect(*data["region"]),
            cell_rois=[Rect(*r) for r in data.get("cell_rois", [])],
            resolution=float(data.get("resolution", 0.5)),
        )


class PairGeometry(NamedTuple):
    tissue: Rect
    cell: Rect
    c_x: float
    c_y: float
    roi_index: int = -1

    def to_dict(self) -> dict:
        return {"tissue": list(self.tissue), "cell": list(self.cell), "c_x": self.c_x,
                "c_y": self.c_y, "roi_index": self.roi_index}


def _fov_ratio(cell_side: int, tissue_side: int) -> int:
    ratio, rem = divmod(tissue_side, cell_side)
    if rem or ratio < 1:
        raise GeometryError(f"tissue side {tissue_side} is not a multiple of cell side {cell_side}")
    return ratio


def _pair(tissue: Rect, cell: Rect, roi_index: int) -> PairGeometry:
    side = tissue.height
    c_x = (cell.left + cell.width / 2 - tissue.left) / side
    c_y = (cell.top + cell.height / 2 - tissue.top) / side
    return PairGeometry(tissue, cell, c_x, c_y, roi_index)


def pair_overlapping(spec: RoiSpec, cell_side: int = 128, tissue_side: int = 512) -> list[PairGeometry]:
    """One tissue patch at the region's top-left corner, tiled into ``ratio**2`` cell patches."""
    ratio = _fov_ratio(cell_side, tissue_side)
    reg = spec.region
    if reg.height < tissue_side or reg.width < tissue_side:
        raise ValueError(f"region {reg.height}x{reg.width} smaller than tissue side {tissue_side}")
    tissue = Rect(reg.top, reg.left, tissue_side, tissue_side)
    out = []
    for i in range(ratio):
        for j in range(ratio):
            cell = Rect(reg.top + i * cell_side, reg.left + j * cell_side, cell_side, cell_side)
            out.append(_pair(tissue, cell, -1))
    return out


def _axis_range(roi_lo: int, roi_hi: int, reg_lo: int, reg_len: int, cell_side: int,
                tissue_side: int) -> range:
    # grid positions k: window [reg_lo + k*cs, reg_lo + k*cs + T) inside region and covering the ROI
    k_max_fit = (reg_len - tissue_side) // cell_side
    k_lo = max(0, -((tissue_side - (roi_hi - reg_lo)) // cell_side))
    k_hi = min(k_max_fit, (roi_lo - reg_lo) // cell_side)
    return range(k_lo, k_hi + 1)


def _place_cell(roi: Rect, tissue: Rect, cell_side: int) -> Rect:
    def axis(roi_lo, roi_len, t_lo):
        start = int(math.floor(roi_lo + roi_len / 2 - cell_side / 2 + 0.5))
        return min(max(start, t_lo), t_lo + tissue.height - cell_side)

    return Rect(axis(roi.top, roi.height, tissue.top), axis(roi.left, roi.width, tissue.left),
                cell_side, cell_side)


def pair_roi_in_region(spec: RoiSpec, cell_side: int = 128, tissue_side: int = 512) -> list[PairGeometry]:
    """Surround each small cell ROI with every admissible tissue window.

    Tissue windows sit on a ``cell_side``-stride grid anchored at the region's
    top-left corner; a window is admissible when it lies inside the region
    and covers the ROI.  The cell patch is centered on the ROI and shifted
    inside the window if needed.  At most ``(tissue_side / cell_side)**2``
    windows exist per ROI.
    """
    _fov_ratio(cell_side, tissue_side)
    reg = spec.region
    out = []
    for idx, roi in enumerate(spec.cell_rois):
        if roi.height > cell_side or roi.width > cell_side:
            warnings.warn(f"cell ROI {idx} is {roi.height}x{roi.width}, larger than {cell_side}; skipped")
            continue
        if not reg.contains(roi):
            warnings.warn(f"cell ROI {idx} lies outside the annotated region; skipped")
            continue
        rows = _axis_range(roi.top, roi.bottom, reg.top, reg.height, cell_side, tissue_side)
        cols = _axis_range(roi.left, roi.right, reg.left, reg.width, cell_side, tissue_side)
        for ki in rows:
            for kj in cols:
                tissue = Rect(reg.top + ki * cell_side, reg.left + kj * cell_side, tissue_side, tissue_side)
                out.append(_pair(tissue, _place_cell(roi, tissue, cell_side), idx))
    return out


# names as used by the TIGER challenge; stroma classes become ST, "excluded" is unknown
TIGER_TISSUE_REMAP = {
    "invasive tumor": "BG",
    "tumor-associated stroma": "ST",
    "in-situ tumor": "BG",
    "healthy glands": "BG",
    "necrosis not in-situ": "BG",
    "inflamed stroma": "ST",
    "rest": "BG",
    "excluded": "UNK",
}
REMAPPED_CODES = {"BG": TISSUE_BG, "ST": 2, "UNK": TISSUE_UNK}


def remap_mask(mask: np.ndarray, code_names: Mapping[int, str],
               table: Mapping[str, str] = TIGER_TISSUE_REMAP,
               codes: Mapping[str, int] = REMAPPED_CODES, default: str = "UNK") -> np.ndarray:
    """Remap a source tissue mask through ``code -> class name -> target name -> target code``."""
    mask = np.asarray(mask)
    out = np.full(mask.shape, codes[default], dtype=np.uint8)
    for code, name in code_names.items():
        target = table.get(name.lower(), default)
        out[mask == code] = codes[target]
    return out
