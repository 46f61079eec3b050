# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels for window accumulation and rectangle overlap."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def accumulate_windows(const cnp.int64_t[:, :] positions, Py_ssize_t window,
                       const double[:] scores, Py_ssize_t height, Py_ssize_t width):
    cdef Py_ssize_t n = positions.shape[0]
    cdef Py_ssize_t k, x0, y0, x1, y1, i, j
    cdef double s
    diff_arr = np.zeros((height + 1, width + 1), dtype=np.float64)
    cnt_arr = np.zeros((height + 1, width + 1), dtype=np.int64)
    cdef double[:, ::1] diff = diff_arr
    cdef cnp.int64_t[:, ::1] cnt = cnt_arr

    for k in range(n):
        x0 = positions[k, 0]
        y0 = positions[k, 1]
        x1 = x0 + window
        y1 = y0 + window
        s = scores[k]
        diff[y0, x0] += s
        diff[y0, x1] -= s
        diff[y1, x0] -= s
        diff[y1, x1] += s
        cnt[y0, x0] += 1
        cnt[y0, x1] -= 1
        cnt[y1, x0] -= 1
        cnt[y1, x1] += 1

    # 2D prefix sum in one row-major pass
    for i in range(height):
        for j in range(width):
            if j > 0:
                diff[i, j] += diff[i, j - 1]
                cnt[i, j] += cnt[i, j - 1]
        if i > 0:
            for j in range(width):
                diff[i, j] += diff[i - 1, j]
                cnt[i, j] += cnt[i - 1, j]

    return np.ascontiguousarray(diff_arr[:height, :width]), np.ascontiguousarray(cnt_arr[:height, :width])


def overlap_fractions(const cnp.int64_t[:, :] boxes, const cnp.int64_t[:, :] regions):
    """Fraction of each box's area covered by each region; boxes and regions are (x0, y0, x1, y1)."""
    cdef Py_ssize_t n = boxes.shape[0]
    cdef Py_ssize_t m = regions.shape[0]
    cdef Py_ssize_t a, b
    cdef cnp.int64_t w, h, area
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, :] out = out_arr

    for a in range(n):
        area = (boxes[a, 2] - boxes[a, 0]) * (boxes[a, 3] - boxes[a, 1])
        for b in range(m):
            w = min(boxes[a, 2], regions[b, 2]) - max(boxes[a, 0], regions[b, 0])
            h = min(boxes[a, 3], regions[b, 3]) - max(boxes[a, 1], regions[b, 1])
            if w > 0 and h > 0:
                out[a, b] = <double>(w * h) / <double>area
    return out_arr
