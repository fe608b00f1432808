"""From cell probability maps to point detections, plus the TC-on-CA relabeling baseline."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from . import _kernels
from .geometry import PatchGeometry, cell_to_tissue_point
from .labels import BC, TC

# stored tissue mask codes
TISSUE_BG = 1
TISSUE_CA = 2
TISSUE_UNK = 255

DEFAULT_MIN_DISTANCE = 7
DEFAULT_THRESHOLD = 0.5


class Detection(NamedTuple):
    x: float
    y: float
    class_id: int
    confidence: float


def extract_peaks(foreground: np.ndarray, min_distance: int = DEFAULT_MIN_DISTANCE,
                  threshold: float = DEFAULT_THRESHOLD) -> list[tuple[int, int]]:
    """Local maxima of a single-channel map as ``(x, y)`` pairs.

    A candidate is a pixel ``>= threshold`` that equals the maximum of its
    ``(2 * min_distance + 1)`` square neighbourhood.  Candidates are visited
    from highest to lowest (row-major among equals) and dropped when a kept
    peak lies within Chebyshev distance ``min_distance``.
    """
    fg = np.asarray(foreground, dtype=float)
    if fg.ndim != 2:
        raise ValueError(f"expected a 2-D map, got shape {fg.shape}")
    if min_distance < 1:
        raise ValueError("min_distance must be >= 1")
    size = 2 * int(min_distance) + 1
    local_max = ndimage.maximum_filter(fg, size=size, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((fg >= threshold) & (fg == local_max))
    if rows.size == 0:
        return []
    # np.nonzero is row-major; a stable sort on -value keeps that order among ties
    order = np.argsort(-fg[rows, cols], kind="stable")
    rows, cols = rows[order], cols[order]
    kept = _kernels.greedy_nms(rows, cols, int(min_distance), fg.shape[0], fg.shape[1])
    return [(int(cols[k]), int(rows[k])) for k in kept]


def validate_probability_map(prob: np.ndarray, atol: float = 1e-5) -> None:
    if prob.ndim != 3 or prob.shape[0] < 2:
        raise ValueError(f"probability map must be (C+1, H, W), got {prob.shape}")
    if prob.min() < -atol or prob.max() > 1 + atol:
        raise ValueError("probabilities outside [0, 1]")
    if np.abs(prob.sum(axis=0) - 1).max() > atol:
        raise ValueError("channel probabilities do not sum to 1")


def detect(prob: np.ndarray, min_distance: int = DEFAULT_MIN_DISTANCE,
           threshold: float = DEFAULT_THRESHOLD, validate: bool = True) -> list[Detection]:
    """Peaks of ``1 - background``; class by argmax over cell channels, confidence its probability."""
    prob = np.asarray(prob, dtype=float)
    if validate:
        validate_probability_map(prob)
    peaks = extract_peaks(1.0 - prob[0], min_distance, threshold)
    dets = []
    for x, y in peaks:
        cls_probs = prob[1:, y, x]
        k = int(np.argmax(cls_probs))
        dets.append(Detection(float(x), float(y), k + 1, float(cls_probs[k])))
    return dets


def apply_tissue_constraint(dets: Sequence[Detection], tissue_mask: np.ndarray, geom: PatchGeometry,
                            bidirectional: bool = True) -> tuple[list[Detection], list[int]]:
    """Relabel detections by the tissue class beneath them.

    Cancer area forces TC; background tissue forces BC (only when
    ``bidirectional``); unknown tissue leaves the class alone.  Returns the new
    detections and the indices of detections that mapped outside the tissue
    grid (left unchanged).
    """
    mask = np.asarray(tissue_mask)
    if mask.ndim != 2 or mask.shape[0] != mask.shape[1]:
        raise ValueError(f"tissue mask must be square 2-D, got {mask.shape}")
    side = mask.shape[0]
    out, flagged = [], []
    for i, d in enumerate(dets):
        tx, ty, inside = cell_to_tissue_point(d.x, d.y, geom, side, snap=True)
        if not inside:
            flagged.append(i)
            out.append(d)
            continue
        code = int(mask[ty, tx])
        cls = d.class_id
        if code == TISSUE_CA:
            cls = TC
        elif code == TISSUE_BG and bidirectional:
            cls = BC
        out.append(d._replace(class_id=cls))
    return out, flagged


def read_detections_csv(path: str | Path) -> list[Detection]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(Detection(float(row["x"]), float(row["y"]), int(row["class"]),
                                 float(row.get("confidence") or 1.0)))
    return out


def write_detections_csv(path: str | Path, dets: Sequence[Detection]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "class", "confidence"])
        for d in dets:
            w.writerow([repr(float(d.x)), repr(float(d.y)), int(d.class_id), repr(float(d.confidence))])
