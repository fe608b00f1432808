"""Paired augmentation: one geometric transform for both patches, photometric jitter per image."""
from __future__ import annotations

from dataclasses import replace

import numpy as np
from scipy import ndimage

from ..labels import CellPoint


def hflip_points(points, side):
    return [CellPoint(side - 1 - p.x, p.y, p.class_id, p.confidence) for p in points]


def rot90_points(points, side, k=1):
    """Match ``np.rot90(img, k, axes=(-2, -1))``: one turn maps ``(x, y)`` to ``(y, side - 1 - x)``."""
    out = list(points)
    for _ in range(k % 4):
        out = [CellPoint(p.y, side - 1 - p.x, p.class_id, p.confidence) for p in out]
    return out


def hflip_center(c_x, c_y):
    return 1.0 - c_x, c_y


def rot90_center(c_x, c_y, k=1):
    for _ in range(k % 4):
        c_x, c_y = c_y, 1.0 - c_x
    return c_x, c_y


def geometric(sample, flip: bool, k: int):
    """Apply an optional horizontal flip then ``k`` quarter turns to every part of a sample."""
    cell, tissue, mask = sample.cell_image, sample.tissue_image, sample.tissue_mask
    side = cell.shape[-1]
    pts = list(sample.cell_points)
    c_x, c_y = sample.geometry.c_x, sample.geometry.c_y
    if flip:
        cell, tissue, mask = cell[..., ::-1], tissue[..., ::-1], mask[..., ::-1]
        pts = hflip_points(pts, side)
        c_x, c_y = hflip_center(c_x, c_y)
    if k % 4:
        cell = np.rot90(cell, k, axes=(-2, -1))
        tissue = np.rot90(tissue, k, axes=(-2, -1))
        mask = np.rot90(mask, k, axes=(-2, -1))
        pts = rot90_points(pts, side, k)
        c_x, c_y = rot90_center(c_x, c_y, k)
    return replace(sample, cell_image=np.ascontiguousarray(cell), tissue_image=np.ascontiguousarray(tissue),
                   tissue_mask=np.ascontiguousarray(mask), cell_points=pts,
                   geometry=sample.geometry.replace(c_x=c_x, c_y=c_y))


def photometric(img: np.ndarray, rng: np.random.Generator, strength: float = 1.0) -> np.ndarray:
    """Gaussian blur, Gaussian noise and color jitter, each applied with probability 1/2."""
    out = img
    if rng.random() < 0.5:
        out = ndimage.gaussian_filter(out, (0, *(2 * [rng.uniform(0.1, 0.6) * strength])))
    if rng.random() < 0.5:
        out = out + rng.normal(0, 0.02 * strength, size=out.shape)
    if rng.random() < 0.5:
        gain = 1 + rng.uniform(-0.08, 0.08, size=(3, 1, 1)) * strength
        bias = rng.uniform(-0.04, 0.04, size=(3, 1, 1)) * strength
        out = out * gain + bias
    return np.clip(out, 0, 1)


def augment_pair(sample, rng: np.random.Generator, photometric_strength: float = 1.0):
    """Random flip and rotation shared by both patches, then independent photometric jitter."""
    out = geometric(sample, bool(rng.random() < 0.5), int(rng.integers(4)))
    if photometric_strength > 0:
        out = replace(out, cell_image=photometric(out.cell_image, rng, photometric_strength),
                      tissue_image=photometric(out.tissue_image, rng, photometric_strength))
    return out
