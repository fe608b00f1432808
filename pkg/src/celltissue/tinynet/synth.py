"""Synthetic cell/tissue pairs in which tissue context decides some cell classes.

Tissue is a smoothed Gaussian field thresholded at zero into cancer area (CA)
and background (BG), so a random location is CA with probability 1/2.  Cells
are stamped on a neutral background in the cell patch.  A fraction
``ambiguity`` of them share one appearance and take their class from the
tissue beneath (CA -> TC, BG -> BC); the rest look like their class, which is
drawn independently of the tissue.  The cell patch alone therefore carries no
information about the ambiguous cells' classes.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..geometry import PatchGeometry, cell_to_tissue_point, crop_window
from ..labels import BC, TC, CellPoint, one_hot, rasterize_label_index
from ..postprocess import TISSUE_BG, TISSUE_CA

# appearance of each cell kind: (radius px, RGB)
TC_LOOK = (3.8, (0.45, 0.10, 0.50))
BC_LOOK = (2.2, (0.10, 0.20, 0.60))
AMBIGUOUS_LOOK = (3.0, (0.30, 0.30, 0.30))
CA_COLOR = (0.55, 0.25, 0.45)
BG_COLOR = (0.90, 0.75, 0.80)
CELL_BACKGROUND = (0.92, 0.90, 0.91)


@dataclass(frozen=True)
class SynthParams:
    cell_side: int = 64
    fov_ratio: int = 4
    tissue_store_downsample: int = 4
    mpp_cell: float = 0.5
    label_radius_px: int = 3
    ambiguity: float = 0.7
    blob_sigma: float = 4.0
    n_cells: tuple = (10, 16)
    min_separation: float = 10.0
    margin: int = 4
    noise: float = 0.03


@dataclass
class SynthSample:
    cell_image: np.ndarray
    tissue_image: np.ndarray
    tissue_mask: np.ndarray
    cell_points: list
    ambiguous: list
    geometry: PatchGeometry
    wsi_id: str = ""
    organ: str = "synthetic"
    pair_id: str = ""
    subset: str = "train"
    meta: dict = field(default_factory=dict)

    def load_tissue_mask(self) -> np.ndarray:
        return self.tissue_mask


def _render_disk(img, x, y, radius, color, rng, softness=0.7):
    _, h, w = img.shape
    r0, r1 = max(int(y - radius - 2), 0), min(int(y + radius + 3), h)
    c0, c1 = max(int(x - radius - 2), 0), min(int(x + radius + 3), w)
    yy, xx = np.mgrid[r0:r1, c0:c1]
    d = np.hypot(yy - y, xx - x)
    alpha = 1.0 / (1.0 + np.exp((d - radius) / softness))
    col = np.asarray(color)[:, None, None] + rng.normal(0, 0.02, size=(3, 1, 1))
    img[:, r0:r1, c0:c1] = img[:, r0:r1, c0:c1] * (1 - alpha) + col * alpha


def _sample_positions(rng, p: SynthParams, count):
    pts = []
    lo, hi = p.margin, p.cell_side - 1 - p.margin
    for _ in range(count * 50):
        if len(pts) == count:
            break
        x, y = rng.integers(lo, hi + 1, size=2)
        if all((x - a) ** 2 + (y - b) ** 2 >= p.min_separation ** 2 for a, b in pts):
            pts.append((int(x), int(y)))
    return pts


def generate_one(rng: np.random.Generator, p: SynthParams, index: int = 0) -> SynthSample:
    store = p.cell_side * p.fov_ratio // p.tissue_store_downsample
    field_ = ndimage.gaussian_filter(rng.normal(size=(store, store)), p.blob_sigma, mode="wrap")
    ca = field_ > 0
    mask = np.where(ca, TISSUE_CA, TISSUE_BG).astype(np.uint8)

    # window offsets on a multiple-of-4 lattice keep every feature-level crop pixel aligned
    side = store // p.fov_ratio
    top, left = (rng.integers(0, (store - side) // 4 + 1, size=2) * 4).tolist()
    geom = PatchGeometry(c_x=(left + side / 2) / store, c_y=(top + side / 2) / store,
                         mpp_cell=p.mpp_cell, cell_side_px=p.cell_side, fov_ratio=p.fov_ratio,
                         tissue_store_downsample=p.tissue_store_downsample)
    assert crop_window(geom, store) == (top, left, side)

    tissue = np.where(ca[None], np.asarray(CA_COLOR)[:, None, None], np.asarray(BG_COLOR)[:, None, None])
    tissue = ndimage.gaussian_filter(tissue, (0, 0.7, 0.7)) + rng.normal(0, 0.05, size=tissue.shape)

    img = np.empty((3, p.cell_side, p.cell_side))
    img[:] = np.asarray(CELL_BACKGROUND)[:, None, None]
    count = int(rng.integers(p.n_cells[0], p.n_cells[1] + 1))
    points, ambiguous = [], []
    for x, y in _sample_positions(rng, p, count):
        is_amb = bool(rng.random() < p.ambiguity)
        if is_amb:
            tx, ty, _ = cell_to_tissue_point(x, y, geom, store, snap=True)
            cls = TC if mask[ty, tx] == TISSUE_CA else BC
            radius, color = AMBIGUOUS_LOOK
        else:
            cls = TC if rng.random() < 0.5 else BC
            radius, color = TC_LOOK if cls == TC else BC_LOOK
        _render_disk(img, x, y, radius * rng.uniform(0.9, 1.1), color, rng)
        points.append(CellPoint(float(x), float(y), cls))
        ambiguous.append(is_amb)
    img += rng.normal(0, p.noise, size=img.shape)
    return SynthSample(np.clip(img, 0, 1), np.clip(tissue, 0, 1), mask, points, ambiguous, geom,
                       wsi_id=f"SYN{index:04d}", pair_id=f"{index:04d}")


def synth_generate(n: int, params: SynthParams = SynthParams(), seed: int = 0) -> list[SynthSample]:
    """``n`` samples, fully determined by ``seed``."""
    ss = np.random.SeedSequence(seed)
    return [generate_one(np.random.default_rng(child), params, i) for i, child in enumerate(ss.spawn(n))]


def cell_target(sample: SynthSample, radius_px: int, n_classes: int = 2) -> np.ndarray:
    idx = rasterize_label_index(sample.cell_points, sample.cell_image.shape[-1], radius_px)
    return one_hot(idx, n_classes + 1)


def tissue_target(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One-hot ``(2, S, S)`` for BG/CA and a validity map that drops unknown pixels."""
    onehot = np.stack([mask == TISSUE_BG, mask == TISSUE_CA]).astype(float)
    return onehot, onehot.sum(axis=0, keepdims=True)


def mean_f1_for_guessing(p_tc: float, n_grid: int = 1001) -> float:
    """Best expected mean F1 on cells whose appearance carries no class information.

    A classifier that sees only appearance labels every such cell TC with
    some probability ``q`` independent of the truth; with a fraction ``p_tc``
    of true TC the expected per-class F1s are ``2qp/(q+p)`` and
    ``2(1-q)(1-p)/((1-q)+(1-p))``.  The bound maximizes their mean over ``q``.
    """
    p = float(p_tc)
    best = 0.0
    for q in np.linspace(0.0, 1.0, n_grid):
        f_tc = 2 * q * p / (q + p) if q + p > 0 else 0.0
        f_bc = 2 * (1 - q) * (1 - p) / (2 - q - p) if 2 - q - p > 0 else 0.0
        best = max(best, (f_tc + f_bc) / 2)
    return best
