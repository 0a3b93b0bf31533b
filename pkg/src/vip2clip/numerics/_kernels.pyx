# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled image kernels.

Every function mirrors the signature of its counterpart in ``_fallback.py``;
inputs arrive as C-contiguous float64 / int arrays prepared by the caller.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    # half-sample symmetric extension: d c b a | a b c d | d c b a
    cdef Py_ssize_t period = 2 * n
    i = i % period
    if i < 0:
        i += period
    if i >= n:
        i = period - 1 - i
    return i


def upsample_bilinear(const double[:, ::1] m, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    cdef Py_ssize_t i, j
    cdef double[:, ::1] out = np.empty((out_h, out_w), dtype=np.float64)
    cdef Py_ssize_t[::1] x0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] wx = np.empty(out_w, dtype=np.float64)
    cdef double sy = <double>h / out_h, sx = <double>w / out_w
    cdef double y, x, fy, top, bottom
    cdef Py_ssize_t y0, y1
    with nogil:
        for j in range(out_w):
            x = (j + 0.5) * sx - 0.5
            if x < 0.0:
                x = 0.0
            if x > w - 1:
                x = w - 1
            x0[j] = <Py_ssize_t>floor(x)
            x1[j] = x0[j] + 1 if x0[j] + 1 < w else w - 1
            wx[j] = x - x0[j]
        for i in range(out_h):
            y = (i + 0.5) * sy - 0.5
            if y < 0.0:
                y = 0.0
            if y > h - 1:
                y = h - 1
            y0 = <Py_ssize_t>floor(y)
            y1 = y0 + 1 if y0 + 1 < h else h - 1
            fy = y - y0
            for j in range(out_w):
                top = (1.0 - wx[j]) * m[y0, x0[j]] + wx[j] * m[y0, x1[j]]
                bottom = (1.0 - wx[j]) * m[y1, x0[j]] + wx[j] * m[y1, x1[j]]
                out[i, j] = (1.0 - fy) * top + fy * bottom
    return np.asarray(out)


def gaussian_smooth(const double[:, ::1] m, const double[::1] kernel):
    cdef Py_ssize_t h = m.shape[0], w = m.shape[1]
    cdef Py_ssize_t r = (kernel.shape[0] - 1) // 2
    cdef Py_ssize_t i, j, t
    cdef double acc
    cdef double[:, ::1] tmp = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out = np.empty((h, w), dtype=np.float64)
    with nogil:
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for t in range(-r, r + 1):
                    acc = acc + kernel[t + r] * m[i, _reflect(j + t, w)]
                tmp[i, j] = acc
        for i in range(h):
            for j in range(w):
                acc = 0.0
                for t in range(-r, r + 1):
                    acc = acc + kernel[t + r] * tmp[_reflect(i + t, h), j]
                out[i, j] = acc
    return np.asarray(out)


cdef Py_ssize_t _find(Py_ssize_t[::1] parent, Py_ssize_t a) noexcept nogil:
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


def label_components(const unsigned char[:, ::1] mask):
    """4-connected labelling; labels numbered in raster order of first pixel."""
    cdef Py_ssize_t h = mask.shape[0], w = mask.shape[1]
    cdef Py_ssize_t n = h * w
    cdef Py_ssize_t i, j, p, a, b, ra, rb
    cdef Py_ssize_t[::1] parent = np.arange(n, dtype=np.intp)
    cdef Py_ssize_t[::1] remap = np.zeros(n, dtype=np.intp)
    cdef int[:, ::1] labels = np.zeros((h, w), dtype=np.int32)
    cdef Py_ssize_t count = 0
    with nogil:
        for i in range(h):
            for j in range(w):
                if not mask[i, j]:
                    continue
                p = i * w + j
                if j > 0 and mask[i, j - 1]:
                    ra = _find(parent, p)
                    rb = _find(parent, p - 1)
                    if ra != rb:
                        if ra < rb:
                            parent[rb] = ra
                        else:
                            parent[ra] = rb
                if i > 0 and mask[i - 1, j]:
                    ra = _find(parent, p)
                    rb = _find(parent, p - w)
                    if ra != rb:
                        if ra < rb:
                            parent[rb] = ra
                        else:
                            parent[ra] = rb
        for i in range(h):
            for j in range(w):
                if not mask[i, j]:
                    continue
                p = i * w + j
                a = _find(parent, p)
                if remap[a] == 0:
                    count += 1
                    remap[a] = count
                labels[i, j] = <int>remap[a]
    return np.asarray(labels), int(count)


def threshold_counts(const long[::1] group, const long[::1] bins, Py_ssize_t n_groups,
                     Py_ssize_t n_bins):
    """hist[g, b] = #{pixels with group g and bin b}; reverse-cumulated along b.

    The result ``out[g, t]`` counts pixels of group ``g`` whose bin is > t,
    i.e. pixels whose score clears threshold ``t``.
    """
    cdef Py_ssize_t n = group.shape[0]
    cdef Py_ssize_t p, g, t
    cdef long[:, ::1] hist = np.zeros((n_groups, n_bins + 1), dtype=np.int64)
    cdef long[:, ::1] out = np.zeros((n_groups, n_bins), dtype=np.int64)
    cdef long running
    with nogil:
        for p in range(n):
            hist[group[p], bins[p]] += 1
        for g in range(n_groups):
            running = 0
            for t in range(n_bins - 1, -1, -1):
                running = running + hist[g, t + 1]
                out[g, t] = running
    return np.asarray(out)
