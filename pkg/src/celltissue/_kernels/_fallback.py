"""Pure Python/numpy versions of the loop-heavy kernels.

Signatures and results are identical to the compiled module ``_ckernels``.
"""
import numpy as np


def greedy_nms(rows, cols, min_distance, height, width):
    """Keep candidates (already in priority order) not within Chebyshev ``min_distance`` of a kept one.

    Returns the kept positions into ``rows``/``cols`` as an int64 array.
    """
    blocked = np.zeros((height, width), dtype=bool)
    kept = []
    d = int(min_distance)
    for k in range(len(rows)):
        r = int(rows[k])
        c = int(cols[k])
        if blocked[r, c]:
            continue
        kept.append(k)
        blocked[max(r - d, 0):r + d + 1, max(c - d, 0):c + d + 1] = True
    return np.asarray(kept, dtype=np.int64)


def greedy_match(det_x, det_y, det_cls, gt_x, gt_y, gt_cls, radius):
    """Match detections (already in priority order) to ground truth.

    Each detection looks at its nearest GT that has not been consumed by a
    true positive, within ``radius`` (inclusive).  Same class consumes the GT.

    Returns ``(target, is_tp)``: ``target[i]`` is the GT index the detection
    landed on or -1, ``is_tp[i]`` whether that was a same-class match.
    """
    n_det = len(det_x)
    n_gt = len(gt_x)
    target = np.full(n_det, -1, dtype=np.int64)
    is_tp = np.zeros(n_det, dtype=np.uint8)
    consumed = [False] * n_gt
    r2 = float(radius) * float(radius)
    for i in range(n_det):
        best = -1
        best_d2 = 0.0
        xi = float(det_x[i])
        yi = float(det_y[i])
        for j in range(n_gt):
            if consumed[j]:
                continue
            dx = xi - float(gt_x[j])
            dy = yi - float(gt_y[j])
            d2 = dx * dx + dy * dy
            if d2 <= r2 and (best < 0 or d2 < best_d2):
                best = j
                best_d2 = d2
        if best >= 0:
            target[i] = best
            if int(det_cls[i]) == int(gt_cls[best]):
                is_tp[i] = 1
                consumed[best] = True
    return target, is_tp


def rasterize_disks(xs, ys, classes, side, radius_px):
    """Label map ``(side, side)`` of disk classes; overlaps go to the nearest center, ties to the lower index."""
    label = np.zeros((side, side), dtype=np.int64)
    best = np.full((side, side), np.inf)
    r = float(radius_px)
    r2 = r * r
    for k in range(len(xs)):
        x = float(xs[k])
        y = float(ys[k])
        r0 = max(int(np.ceil(y - r)), 0)
        r1 = min(int(np.floor(y + r)), side - 1)
        c0 = max(int(np.ceil(x - r)), 0)
        c1 = min(int(np.floor(x + r)), side - 1)
        if r0 > r1 or c0 > c1:
            continue
        yy = np.arange(r0, r1 + 1)[:, None]
        xx = np.arange(c0, c1 + 1)[None, :]
        d2 = (yy - y) ** 2 + (xx - x) ** 2
        win_best = best[r0:r1 + 1, c0:c1 + 1]
        take = (d2 <= r2) & (d2 < win_best)
        win_best[take] = d2[take]
        label[r0:r1 + 1, c0:c1 + 1][take] = int(classes[k])
    return label
