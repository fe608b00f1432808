"""Point annotations: disk rasterization, CSV I/O and two-reader consensus."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels

TC = 1
BC = 2
CELL_CLASSES = {"TC": TC, "BC": BC}
DEFAULT_RADIUS_UM = 1.4


@dataclass(frozen=True)
class CellPoint:
    x: float
    y: float
    class_id: int
    confidence: float = 1.0


def radius_in_pixels(radius_um: float, mpp: float) -> int:
    """Disk radius on the pixel grid, ``round(radius_um / mpp)`` (1.4 um at 0.2 MPP gives 7)."""
    if radius_um <= 0 or mpp <= 0:
        raise ValueError("radius_um and mpp must be positive")
    return int(math.floor(radius_um / mpp + 0.5))


def rasterize_label_index(points: Sequence[CellPoint], side_px: int, radius_px: float) -> np.ndarray:
    """Integer label map ``(side, side)``: 0 background, otherwise the class id of the nearest disk."""
    bad = [i for i, p in enumerate(points) if not (0 <= p.x < side_px and 0 <= p.y < side_px)]
    if bad:
        raise ValueError(f"points outside the {side_px}x{side_px} grid at indices {bad}")
    if not points:
        return np.zeros((side_px, side_px), dtype=np.int64)
    xs = np.array([p.x for p in points], dtype=float)
    ys = np.array([p.y for p in points], dtype=float)
    cls = np.array([p.class_id for p in points], dtype=np.int64)
    return _kernels.rasterize_disks(xs, ys, cls, side_px, float(radius_px))


def one_hot(index_map: np.ndarray, n_channels: int) -> np.ndarray:
    """``(H, W)`` integer map to ``(n_channels, H, W)`` one-hot float map."""
    if index_map.size and (index_map.min() < 0 or index_map.max() >= n_channels):
        raise ValueError("label index out of range for one-hot encoding")
    return (np.arange(n_channels)[:, None, None] == index_map[None]).astype(float)


def rasterize_points(points: Sequence[CellPoint], side_px: int, radius_um: float = DEFAULT_RADIUS_UM,
                     mpp: float = 0.2, n_classes: int = 2) -> np.ndarray:
    """Cell label map with ``n_classes + 1`` one-hot channels (channel 0 is background)."""
    r = radius_in_pixels(radius_um, mpp)
    for i, p in enumerate(points):
        if not 1 <= p.class_id <= n_classes:
            raise ValueError(f"point {i} has class {p.class_id} outside 1..{n_classes}")
    return one_hot(rasterize_label_index(points, side_px, r), n_classes + 1)


def read_points_csv(path: str | Path) -> list[CellPoint]:
    """Read ``x,y,class[,confidence]`` rows."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"x", "y", "class"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            conf = row.get("confidence")
            out.append(CellPoint(float(row["x"]), float(row["y"]), int(row["class"]),
                                 float(conf) if conf not in (None, "") else 1.0))
    return out


def write_points_csv(path: str | Path, points: Iterable, with_confidence: bool = False) -> None:
    header = ["x", "y", "class"] + (["confidence"] if with_confidence else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p in points:
            row = [_fmt(p.x), _fmt(p.y), int(p.class_id)]
            if with_confidence:
                row.append(repr(float(p.confidence)))
            w.writerow(row)


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


@dataclass
class ConsensusReport:
    agreed: list = field(default_factory=list)
    class_conflicts: list = field(default_factory=list)
    only_a: list = field(default_factory=list)
    only_b: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "agreed": [asdict(p) for p in self.agreed],
            "class_conflicts": [
                {"a": asdict(a), "b": asdict(b), "class_a": a.class_id, "class_b": b.class_id}
                for a, b in self.class_conflicts
            ],
            "only_a": [asdict(p) for p in self.only_a],
            "only_b": [asdict(p) for p in self.only_b],
            "counts": {
                "agreed": len(self.agreed),
                "class_conflicts": len(self.class_conflicts),
                "only_a": len(self.only_a),
                "only_b": len(self.only_b),
            },
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def merge_annotations(set_a: Sequence[CellPoint], set_b: Sequence[CellPoint],
                      match_radius_px: float = 15.0) -> ConsensusReport:
    """Pair up two independent annotations of the same patch for adjudication.

    Candidate pairs within ``match_radius_px`` are taken in ascending distance
    (ties by index in A, then B), each point used at most once.  Same-class
    pairs are agreed at their midpoint; different-class pairs are conflicts;
    everything else is reported as unmatched on its side.
    """
    if match_radius_px <= 0:
        raise ValueError("match radius must be positive")
    cand = []
    for i, a in enumerate(set_a):
        for j, b in enumerate(set_b):
            d = math.hypot(a.x - b.x, a.y - b.y)
            if d <= match_radius_px:
                cand.append((d, i, j))
    cand.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    report = ConsensusReport()
    for _, i, j in cand:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        a, b = set_a[i], set_b[j]
        if a.class_id == b.class_id:
            report.agreed.append(CellPoint((a.x + b.x) / 2, (a.y + b.y) / 2, a.class_id))
        else:
            report.class_conflicts.append((a, b))
    report.only_a = [p for i, p in enumerate(set_a) if i not in used_a]
    report.only_b = [p for j, p in enumerate(set_b) if j not in used_b]
    return report
