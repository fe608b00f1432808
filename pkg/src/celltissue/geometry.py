"""Coordinate systems shared by the small cell patch and the large tissue patch.

The cell patch covers a square region of the slide at full resolution.  The
tissue patch covers ``fov_ratio`` times that side length and is stored
downsampled by ``tissue_store_downsample``.  ``(c_x, c_y)`` give the center of
the cell patch relative to the tissue extent, normalized to ``[0, 1]``.

All fields are channel-first numpy arrays of shape ``(C, H, W)``; operators
also accept extra leading axes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "GeometryError",
    "PatchGeometry",
    "WindowRect",
    "MappedPoint",
    "window_on_grid",
    "crop_window",
    "resize_matrix",
    "pool_pad_matrix",
    "crop_and_resize",
    "crop_and_upsample",
    "downsample_and_pad",
    "cell_to_tissue_point",
    "tissue_to_cell_point",
]

_EPS = 1e-9


class GeometryError(ValueError):
    """Raised when patch geometry or a field shape is inconsistent."""


@dataclass(frozen=True)
class PatchGeometry:
    """Physical layout of one cell/tissue patch pair.

    The defaults are the 0.2 MPP, 1024 px, 4x FoV, 4x downsample
    configuration of the public cell-on-tissue release.
    """

    c_x: float = 0.5
    c_y: float = 0.5
    mpp_cell: float = 0.2
    cell_side_px: int = 1024
    fov_ratio: int = 4
    tissue_store_downsample: int = 4

    def __post_init__(self):
        if self.fov_ratio < 1 or self.tissue_store_downsample < 1:
            raise GeometryError("fov_ratio and tissue_store_downsample must be >= 1")
        if self.cell_side_px <= 0:
            raise GeometryError("cell_side_px must be positive")
        if self.mpp_cell <= 0:
            raise GeometryError("mpp_cell must be positive")

    @property
    def tissue_raw_side_px(self) -> int:
        return self.cell_side_px * self.fov_ratio

    @property
    def tissue_store_side_px(self) -> int:
        side, rem = divmod(self.tissue_raw_side_px, self.tissue_store_downsample)
        if rem:
            raise GeometryError("incompatible geometry: raw tissue side not divisible by downsample")
        return side

    @property
    def mpp_tissue(self) -> float:
        return self.mpp_cell * self.tissue_store_downsample

    def contains_cell_patch(self) -> bool:
        lo = 1.0 / (2 * self.fov_ratio)
        hi = 1.0 - lo
        return all(lo - _EPS <= c <= hi + _EPS for c in (self.c_x, self.c_y))

    def validate(self) -> "PatchGeometry":
        if not self.contains_cell_patch():
            raise GeometryError(
                f"cell patch outside tissue patch: c=({self.c_x}, {self.c_y}), "
                f"allowed range [{1 / (2 * self.fov_ratio)}, {1 - 1 / (2 * self.fov_ratio)}]"
            )
        return self

    def replace(self, **changes) -> "PatchGeometry":
        values = asdict(self)
        values.update(changes)
        return PatchGeometry(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PatchGeometry":
        fields = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        return cls(**fields)


class WindowRect(NamedTuple):
    """Square window in stored-tissue pixels: rows ``top:top+side``, cols ``left:left+side``."""

    top: int
    left: int
    side: int

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.top + self.side), slice(self.left, self.left + self.side)


class MappedPoint(NamedTuple):
    x: float
    y: float
    inside: bool


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def window_on_grid(c_x: float, c_y: float, fov_ratio: int, grid_side: int) -> WindowRect:
    """Window covered by the cell patch on a tissue-aligned grid of ``grid_side`` pixels.

    Used both on the stored tissue grid and on downsampled tissue feature maps.
    """
    if grid_side <= 0:
        raise GeometryError("grid side must be positive")
    side, rem = divmod(grid_side, fov_ratio)
    if rem or side == 0:
        raise GeometryError(
            f"incompatible geometry: grid side {grid_side} not divisible by fov_ratio {fov_ratio}"
        )
    lo = 1.0 / (2 * fov_ratio)
    if not all(lo - _EPS <= c <= 1 - lo + _EPS for c in (c_x, c_y)):
        raise GeometryError(f"cell patch outside tissue patch: c=({c_x}, {c_y})")
    top = _round_half_up(c_y * grid_side - side / 2)
    left = _round_half_up(c_x * grid_side - side / 2)
    # float noise at the containment boundary must not push the window off-grid
    top = min(max(top, 0), grid_side - side)
    left = min(max(left, 0), grid_side - side)
    return WindowRect(top, left, side)


def crop_window(geom: PatchGeometry, tissue_store_side_px: int | None = None) -> WindowRect:
    """Cell-patch footprint inside the stored tissue patch.

    >>> crop_window(PatchGeometry(), 1024)
    WindowRect(top=384, left=384, side=256)
    """
    if tissue_store_side_px is None:
        tissue_store_side_px = geom.tissue_store_side_px
    return window_on_grid(geom.c_x, geom.c_y, geom.fov_ratio, tissue_store_side_px)


def resize_matrix(window_start: int, window_side: int, out_side: int, mode: str,
                  grid_side: int) -> np.ndarray:
    """Linear operator ``(out_side, grid_side)`` that crops ``[start, start+side)`` and resizes.

    ``nearest`` samples ``floor(i / f)``.  ``bilinear`` uses the pixel-center
    convention ``(i + 0.5) / f - 0.5``, clamped to the cropped window so that
    nothing outside the window contributes.
    """
    f = out_side / window_side
    mat = np.zeros((out_side, grid_side))
    idx = np.arange(out_side)
    if mode == "nearest":
        src = np.minimum((idx * window_side) // out_side, window_side - 1)
        mat[idx, window_start + src] = 1.0
    elif mode == "bilinear":
        pos = np.clip((idx + 0.5) / f - 0.5, 0.0, window_side - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, window_side - 1)
        w_hi = pos - lo
        np.add.at(mat, (idx, window_start + lo), 1.0 - w_hi)
        np.add.at(mat, (idx, window_start + hi), w_hi)
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    return mat


def pool_pad_matrix(window_start: int, window_side: int, in_side: int, grid_side: int) -> np.ndarray:
    """Linear operator ``(grid_side, in_side)``: mean-pool by ``in_side / window_side``, zero-pad."""
    factor, rem = divmod(in_side, window_side)
    if rem:
        raise GeometryError(
            f"non-integer pooling factor: {in_side} onto a window of {window_side}"
        )
    mat = np.zeros((grid_side, in_side))
    idx = np.arange(in_side)
    mat[window_start + idx // factor, idx] = 1.0 / factor
    return mat


def _is_integer_field(field: np.ndarray) -> bool:
    return np.issubdtype(field.dtype, np.integer) or field.dtype == bool


def crop_and_resize(field: np.ndarray, c_x: float, c_y: float, fov_ratio: int, out_side: int,
                    mode: str = "bilinear") -> np.ndarray:
    """Crop the cell-patch footprint from a tissue-aligned field and resize to ``out_side``."""
    field = np.asarray(field)
    if field.ndim < 2 or field.shape[-1] != field.shape[-2]:
        raise GeometryError(f"expected square field, got shape {field.shape}")
    if mode == "bilinear" and _is_integer_field(field):
        raise GeometryError("labels require nearest")
    grid = field.shape[-1]
    win = window_on_grid(c_x, c_y, fov_ratio, grid)
    if mode == "nearest":
        rows = win.top + np.minimum((np.arange(out_side) * win.side) // out_side, win.side - 1)
        cols = win.left + np.minimum((np.arange(out_side) * win.side) // out_side, win.side - 1)
        return field[..., rows[:, None], cols[None, :]]
    ry = resize_matrix(win.top, win.side, out_side, mode, grid)
    rx = resize_matrix(win.left, win.side, out_side, mode, grid)
    return np.einsum("ij,...jk,lk->...il", ry, field, rx)


def crop_and_upsample(field: np.ndarray, geom: PatchGeometry, mode: str = "bilinear") -> np.ndarray:
    """Bring a stored-tissue field onto the cell grid."""
    store = geom.tissue_store_side_px
    if field.shape[-1] != store or field.shape[-2] != store:
        raise GeometryError(
            f"field side {field.shape[-2:]} does not match stored tissue side {store}"
        )
    return crop_and_resize(field, geom.c_x, geom.c_y, geom.fov_ratio, geom.cell_side_px, mode)


def downsample_and_pad(cell_map: np.ndarray, geom: PatchGeometry,
                       tissue_store_side_px: int | None = None) -> np.ndarray:
    """Mean-pool a cell-grid field onto its window in the tissue grid; zeros elsewhere."""
    cell_map = np.asarray(cell_map, dtype=float)
    if cell_map.shape[-1] != geom.cell_side_px or cell_map.shape[-2] != geom.cell_side_px:
        raise GeometryError(
            f"cell map side {cell_map.shape[-2:]} does not match cell side {geom.cell_side_px}"
        )
    if tissue_store_side_px is None:
        tissue_store_side_px = geom.tissue_store_side_px
    win = crop_window(geom, tissue_store_side_px)
    py = pool_pad_matrix(win.top, win.side, geom.cell_side_px, tissue_store_side_px)
    px = pool_pad_matrix(win.left, win.side, geom.cell_side_px, tissue_store_side_px)
    return np.einsum("ij,...jk,lk->...il", py, cell_map, px)


def _scale(geom: PatchGeometry, tissue_store_side_px: int) -> tuple[WindowRect, float]:
    win = crop_window(geom, tissue_store_side_px)
    return win, win.side / geom.cell_side_px


def cell_to_tissue_point(x: float, y: float, geom: PatchGeometry,
                         tissue_store_side_px: int | None = None, snap: bool = False) -> MappedPoint:
    """Map a cell-grid point into stored-tissue pixels.

    With ``snap`` the result is the integer index of the stored pixel that
    contains the point.  Points landing outside the grid are flagged through
    ``inside`` and never clamped.
    """
    if tissue_store_side_px is None:
        tissue_store_side_px = geom.tissue_store_side_px
    win, s = _scale(geom, tissue_store_side_px)
    tx = win.left + x * s
    ty = win.top + y * s
    if snap:
        tx, ty = math.floor(tx), math.floor(ty)
    inside = 0 <= tx < tissue_store_side_px and 0 <= ty < tissue_store_side_px
    return MappedPoint(tx, ty, inside)


def tissue_to_cell_point(x: float, y: float, geom: PatchGeometry,
                         tissue_store_side_px: int | None = None) -> MappedPoint:
    if tissue_store_side_px is None:
        tissue_store_side_px = geom.tissue_store_side_px
    win, s = _scale(geom, tissue_store_side_px)
    cx = (x - win.left) / s
    cy = (y - win.top) / s
    inside = 0 <= cx < geom.cell_side_px and 0 <= cy < geom.cell_side_px
    return MappedPoint(cx, cy, inside)
