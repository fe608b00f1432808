# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loop-heavy kernels; see ``_fallback`` for the contracts."""
import numpy as np
cimport numpy as cnp
from libc.math cimport ceil, floor, INFINITY

cnp.import_array()


def greedy_nms(rows, cols, long min_distance, long height, long width):
    cdef cnp.int64_t[::1] r = np.ascontiguousarray(rows, dtype=np.int64)
    cdef cnp.int64_t[::1] c = np.ascontiguousarray(cols, dtype=np.int64)
    cdef cnp.uint8_t[:, ::1] blocked = np.zeros((height, width), dtype=np.uint8)
    cdef cnp.int64_t[::1] kept = np.empty(r.shape[0], dtype=np.int64)
    cdef Py_ssize_t k, n = r.shape[0], n_kept = 0
    cdef long rr, cc, i, j, i0, i1, j0, j1
    for k in range(n):
        rr = r[k]
        cc = c[k]
        if blocked[rr, cc]:
            continue
        kept[n_kept] = k
        n_kept += 1
        i0 = rr - min_distance if rr - min_distance > 0 else 0
        i1 = rr + min_distance if rr + min_distance < height - 1 else height - 1
        j0 = cc - min_distance if cc - min_distance > 0 else 0
        j1 = cc + min_distance if cc + min_distance < width - 1 else width - 1
        for i in range(i0, i1 + 1):
            for j in range(j0, j1 + 1):
                blocked[i, j] = 1
    return np.asarray(kept[:n_kept]).copy()


def greedy_match(det_x, det_y, det_cls, gt_x, gt_y, gt_cls, double radius):
    cdef double[::1] dx_ = np.ascontiguousarray(det_x, dtype=np.float64)
    cdef double[::1] dy_ = np.ascontiguousarray(det_y, dtype=np.float64)
    cdef cnp.int64_t[::1] dc = np.ascontiguousarray(det_cls, dtype=np.int64)
    cdef double[::1] gx = np.ascontiguousarray(gt_x, dtype=np.float64)
    cdef double[::1] gy = np.ascontiguousarray(gt_y, dtype=np.float64)
    cdef cnp.int64_t[::1] gc = np.ascontiguousarray(gt_cls, dtype=np.int64)
    cdef Py_ssize_t n_det = dx_.shape[0], n_gt = gx.shape[0], i, j
    target_arr = np.full(n_det, -1, dtype=np.int64)
    tp_arr = np.zeros(n_det, dtype=np.uint8)
    cdef cnp.int64_t[::1] target = target_arr
    cdef cnp.uint8_t[::1] is_tp = tp_arr
    cdef cnp.uint8_t[::1] consumed = np.zeros(n_gt, dtype=np.uint8)
    cdef double r2 = radius * radius, best_d2, d2, ddx, ddy
    cdef Py_ssize_t best
    for i in range(n_det):
        best = -1
        best_d2 = 0.0
        for j in range(n_gt):
            if consumed[j]:
                continue
            ddx = dx_[i] - gx[j]
            ddy = dy_[i] - gy[j]
            d2 = ddx * ddx + ddy * ddy
            if d2 <= r2 and (best < 0 or d2 < best_d2):
                best = j
                best_d2 = d2
        if best >= 0:
            target[i] = best
            if dc[i] == gc[best]:
                is_tp[i] = 1
                consumed[best] = 1
    return target_arr, tp_arr


def rasterize_disks(xs, ys, classes, long side, double radius_px):
    cdef double[::1] px = np.ascontiguousarray(xs, dtype=np.float64)
    cdef double[::1] py = np.ascontiguousarray(ys, dtype=np.float64)
    cdef cnp.int64_t[::1] pc = np.ascontiguousarray(classes, dtype=np.int64)
    label_arr = np.zeros((side, side), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] label = label_arr
    best_arr = np.full((side, side), np.inf)
    cdef double[:, ::1] best = best_arr
    cdef double r2 = radius_px * radius_px, x, y, d2
    cdef long r0, r1, c0, c1, i, j
    cdef Py_ssize_t k
    for k in range(px.shape[0]):
        x = px[k]
        y = py[k]
        r0 = <long>ceil(y - radius_px)
        r1 = <long>floor(y + radius_px)
        c0 = <long>ceil(x - radius_px)
        c1 = <long>floor(x + radius_px)
        if r0 < 0:
            r0 = 0
        if c0 < 0:
            c0 = 0
        if r1 > side - 1:
            r1 = side - 1
        if c1 > side - 1:
            c1 = side - 1
        for i in range(r0, r1 + 1):
            for j in range(c0, c1 + 1):
                d2 = (i - y) * (i - y) + (j - x) * (j - x)
                if d2 <= r2 and d2 < best[i, j]:
                    best[i, j] = d2
                    label[i, j] = pc[k]
    return label_arr
