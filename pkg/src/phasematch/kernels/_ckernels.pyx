# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``; outputs are bit-identical."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = h - k + 1, wo = w - k + 1
    cdef Py_ssize_t b, yy, xx, ch, i, j, row, col
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n * ho * wo, c * k * k), dtype=dtype)
    cdef real[:, ::1] o = out
    with nogil:
        row = 0
        for b in range(n):
            for yy in range(ho):
                for xx in range(wo):
                    col = 0
                    for ch in range(c):
                        for i in range(k):
                            for j in range(k):
                                o[row, col] = x[b, yy + i, xx + j, ch]
                                col = col + 1
                    row = row + 1
    return out


def col2im(real[:, ::1] cols, shape, int k):
    cdef Py_ssize_t n = shape[0], h = shape[1], w = shape[2], c = shape[3]
    cdef Py_ssize_t ho = h - k + 1, wo = w - k + 1
    cdef Py_ssize_t b, yy, xx, ch, i, j, row, kk = k * k
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((n, h, w, c), dtype=dtype)
    cdef real[:, :, :, ::1] o = out
    # (i, j) outermost so every output element accumulates in the same order
    # as the numpy reference
    with nogil:
        for i in range(k):
            for j in range(k):
                for b in range(n):
                    for yy in range(ho):
                        for xx in range(wo):
                            row = (b * ho + yy) * wo + xx
                            for ch in range(c):
                                o[b, yy + i, xx + j, ch] += cols[row, ch * kk + i * k + j]
    return out


def maxpool2_forward(real[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[3]
    cdef Py_ssize_t ho = x.shape[1] // 2, wo = x.shape[2] // 2
    cdef Py_ssize_t b, yy, xx, ch, off
    cdef real best, v
    cdef signed char barg
    dtype = np.float32 if real is float else np.float64
    out = np.empty((n, ho, wo, c), dtype=dtype)
    arg = np.empty((n, ho, wo, c), dtype=np.int8)
    cdef real[:, :, :, ::1] o = out
    cdef signed char[:, :, :, ::1] a = arg
    with nogil:
        for b in range(n):
            for yy in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        best = x[b, 2 * yy, 2 * xx, ch]
                        barg = 0
                        for off in range(1, 4):
                            v = x[b, 2 * yy + off // 2, 2 * xx + off % 2, ch]
                            if v > best:
                                best = v
                                barg = <signed char>off
                        o[b, yy, xx, ch] = best
                        a[b, yy, xx, ch] = barg
    return out, arg


def maxpool2_backward(real[:, :, :, ::1] dout, signed char[:, :, :, ::1] arg, shape):
    cdef Py_ssize_t n = dout.shape[0], ho = dout.shape[1], wo = dout.shape[2], c = dout.shape[3]
    cdef Py_ssize_t b, yy, xx, ch, off
    dtype = np.float32 if real is float else np.float64
    dx = np.zeros(tuple(shape), dtype=dtype)
    cdef real[:, :, :, ::1] d = dx
    with nogil:
        for b in range(n):
            for yy in range(ho):
                for xx in range(wo):
                    for ch in range(c):
                        off = arg[b, yy, xx, ch]
                        d[b, 2 * yy + off // 2, 2 * xx + off % 2, ch] = dout[b, yy, xx, ch]
    return dx


def nms_strict(values, int radius, double threshold, int border):
    cdef double[:, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t h = v.shape[0], w = v.shape[1]
    cdef Py_ssize_t y, x, yy, xx, y0, y1, x0, x1
    cdef double c
    cdef bint ok
    mask = np.zeros((h, w), dtype=bool)
    cdef cnp.npy_bool[:, ::1] m = mask
    with nogil:
        for y in range(border, h - border):
            for x in range(border, w - border):
                c = v[y, x]
                if not (c >= threshold):
                    continue
                y0 = y - radius if y >= radius else 0
                y1 = y + radius + 1 if y + radius + 1 <= h else h
                x0 = x - radius if x >= radius else 0
                x1 = x + radius + 1 if x + radius + 1 <= w else w
                ok = True
                yy = y0
                while ok and yy < y1:
                    for xx in range(x0, x1):
                        if (yy != y or xx != x) and not (c > v[yy, xx]):
                            ok = False
                            break
                    yy = yy + 1
                if ok:
                    m[y, x] = True
    return mask
