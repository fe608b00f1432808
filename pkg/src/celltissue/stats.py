"""Dataset analytics: cell-class x tissue-class co-occurrence, class ratios and inventories.

Records are duck-typed: anything with ``geometry``, ``cell_points`` and
``load_tissue_mask()`` works (dataset records and synthetic samples alike).
"""
from __future__ import annotations

import csv
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .dataio import SUBSETS
from .geometry import cell_to_tissue_point
from .postprocess import TISSUE_BG, TISSUE_CA, TISSUE_UNK

TISSUE_NAMES = {TISSUE_BG: "BG", TISSUE_CA: "CA", TISSUE_UNK: "UNK"}
CELL_NAMES = {1: "TC", 2: "BC"}
OUT_OF_BOUNDS = "out_of_bounds"


@dataclass
class CooccurrenceTable:
    counts: dict = field(default_factory=lambda: defaultdict(Counter))
    out_of_bounds: Counter = field(default_factory=Counter)
    tissue_names: Mapping = field(default_factory=lambda: dict(TISSUE_NAMES))
    cell_names: Mapping = field(default_factory=lambda: dict(CELL_NAMES))

    def __add__(self, other: "CooccurrenceTable") -> "CooccurrenceTable":
        out = CooccurrenceTable(tissue_names=dict(self.tissue_names), cell_names=dict(self.cell_names))
        for table in (self, other):
            for c, row in table.counts.items():
                out.counts[c].update(row)
            out.out_of_bounds.update(table.out_of_bounds)
        return out

    def fraction_outside(self, cell_class: int = 1, tissue_code: int = TISSUE_CA) -> float | None:
        """Share of a cell class's in-bounds points lying on any tissue class other than ``tissue_code``."""
        row = self.counts.get(cell_class)
        total = sum(row.values()) if row else 0
        return 1.0 - row.get(tissue_code, 0) / total if total else None

    def fractions(self) -> dict:
        """Per cell class, fraction of in-bounds points over each tissue class."""
        out = {}
        for cls, row in sorted(self.counts.items()):
            total = sum(row.values())
            out[cls] = {t: row.get(t, 0) / total for t in self.tissue_names} if total else {}
        return out

    def to_dict(self) -> dict:
        names = self.tissue_names
        return {
            "counts": {self.cell_names.get(c, str(c)): {names[t]: row.get(t, 0) for t in names}
                       for c, row in sorted(self.counts.items())},
            "fractions": {self.cell_names.get(c, str(c)): {names[t]: v for t, v in row.items()}
                          for c, row in self.fractions().items()},
            OUT_OF_BOUNDS: {self.cell_names.get(c, str(c)): n for c, n in sorted(self.out_of_bounds.items())},
        }

    def to_csv(self) -> str:
        """Rows of cell classes, columns of tissue classes, percentages as in the published table."""
        buf = io.StringIO()
        w = csv.writer(buf)
        names = self.tissue_names
        w.writerow(["cell_class"] + [names[t] for t in names] + ["total", OUT_OF_BOUNDS])
        fr = self.fractions()
        for c, row in sorted(self.counts.items()):
            w.writerow([self.cell_names.get(c, str(c))]
                       + [f"{100 * fr[c].get(t, 0.0):.2f}" for t in names]
                       + [sum(row.values()), self.out_of_bounds.get(c, 0)])
        return buf.getvalue()


def cooccurrence(records: Iterable) -> CooccurrenceTable:
    """Attribute every cell point to the stored tissue pixel containing it."""
    table = CooccurrenceTable()
    for rec in records:
        mask = np.asarray(rec.load_tissue_mask())
        side = mask.shape[0]
        for p in rec.cell_points:
            tx, ty, inside = cell_to_tissue_point(p.x, p.y, rec.geometry, side, snap=True)
            if not inside:
                table.out_of_bounds[p.class_id] += 1
                continue
            table.counts[p.class_id][int(mask[ty, tx])] += 1
    return table


def class_counts(records: Iterable) -> tuple[Counter, Counter]:
    """Cell points per class and tissue pixels per code."""
    cells: Counter = Counter()
    pixels: Counter = Counter()
    for rec in records:
        cells.update(p.class_id for p in rec.cell_points)
        codes, n = np.unique(np.asarray(rec.load_tissue_mask()), return_counts=True)
        pixels.update(dict(zip(codes.tolist(), n.tolist())))
    return cells, pixels


def ratios_from_counts(cells: Mapping, pixels: Mapping) -> dict:
    n_cells = sum(cells.values())
    n_pix = sum(pixels.values())
    return {
        "cell": {CELL_NAMES.get(c, str(c)): cells[c] / n_cells for c in sorted(cells)} if n_cells else {},
        "tissue": {TISSUE_NAMES.get(t, str(t)): pixels[t] / n_pix for t in sorted(pixels)} if n_pix else {},
        "n_cells": n_cells,
        "n_pixels": n_pix,
    }


def class_ratios(records: Iterable) -> dict:
    """Cell-class ratios by point count and tissue-class ratios by pixel count."""
    return ratios_from_counts(*class_counts(records))


def dataset_summary(records: Iterable) -> dict:
    """WSI and pair counts per organ and subset, with totals."""
    wsis: dict = defaultdict(lambda: defaultdict(set))
    pairs: dict = defaultdict(Counter)
    for rec in records:
        wsis[rec.organ][rec.subset].add(rec.wsi_id)
        pairs[rec.organ][rec.subset] += 1
    table = {}
    for organ in sorted(pairs):
        table[organ] = {
            "wsis": {s: len(wsis[organ][s]) for s in SUBSETS},
            "pairs": {s: pairs[organ][s] for s in SUBSETS},
        }
    total = {
        "wsis": {s: sum(row["wsis"][s] for row in table.values()) for s in SUBSETS},
        "pairs": {s: sum(row["pairs"][s] for row in table.values()) for s in SUBSETS},
    }
    return {"organs": table, "total": total}
