# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: windowed-sinc resampling, bilinear resizing and the
fused softmax backward pass."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, floor, ceil, fabs, M_PI

cnp.import_array()


cdef inline double _blackman(double u) nogil:
    return 0.42 + 0.5 * cos(M_PI * u) + 0.08 * cos(2.0 * M_PI * u)


def sinc_resample(x, double src_rate, double dst_rate, Py_ssize_t n_out, int n_zeros):
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n_in = xv.shape[0]
    out = np.empty(n_out, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double step = src_rate / dst_rate
    cdef double two_fc = dst_rate / src_rate
    if two_fc > 1.0:
        two_fc = 1.0
    cdef double half = n_zeros / two_fc
    cdef Py_ssize_t j, n, lo, hi
    cdef double pos, t, arg, s, w, acc, wsum
    with nogil:
        for j in range(n_out):
            pos = j * step
            lo = <Py_ssize_t>ceil(pos - half)
            hi = <Py_ssize_t>floor(pos + half)
            if lo < 0:
                lo = 0
            if hi > n_in - 1:
                hi = n_in - 1
            acc = 0.0
            wsum = 0.0
            for n in range(lo, hi + 1):
                t = pos - n
                if fabs(t) >= half:
                    continue
                arg = two_fc * t
                if arg == 0.0:
                    s = 1.0
                else:
                    s = sin(M_PI * arg) / (M_PI * arg)
                w = two_fc * s * _blackman(t / half)
                acc = acc + w * xv[n]
                wsum = wsum + w
            ov[j] = acc / wsum
    return out


cdef void _coords(Py_ssize_t n_in, Py_ssize_t n_out, Py_ssize_t* i0,
                  Py_ssize_t* i1, double* f) nogil:
    cdef Py_ssize_t i
    cdef double src
    for i in range(n_out):
        src = (i + 0.5) * (<double>n_in / n_out) - 0.5
        if src < 0.0:
            src = 0.0
        if src > n_in - 1:
            src = n_in - 1
        i0[i] = <Py_ssize_t>floor(src)
        i1[i] = i0[i] + 1 if i0[i] + 1 < n_in else n_in - 1
        f[i] = src - i0[i]


def bilinear_resize(img, Py_ssize_t out_h, Py_ssize_t out_w):
    cdef double[:, :, ::1] iv = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t in_h = iv.shape[0], in_w = iv.shape[1], nc = iv.shape[2]
    out = np.empty((out_h, out_w, nc), dtype=np.float64)
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t[::1] y0 = np.empty(out_h, dtype=np.intp)
    cdef Py_ssize_t[::1] y1 = np.empty(out_h, dtype=np.intp)
    cdef double[::1] fy = np.empty(out_h, dtype=np.float64)
    cdef Py_ssize_t[::1] x0 = np.empty(out_w, dtype=np.intp)
    cdef Py_ssize_t[::1] x1 = np.empty(out_w, dtype=np.intp)
    cdef double[::1] fx = np.empty(out_w, dtype=np.float64)
    cdef Py_ssize_t i, j, c
    cdef double a, b, cc, d, top, bottom
    with nogil:
        _coords(in_h, out_h, &y0[0], &y1[0], &fy[0])
        _coords(in_w, out_w, &x0[0], &x1[0], &fx[0])
        for i in range(out_h):
            for j in range(out_w):
                for c in range(nc):
                    a = iv[y0[i], x0[j], c]
                    b = iv[y0[i], x1[j], c]
                    cc = iv[y1[i], x0[j], c]
                    d = iv[y1[i], x1[j], c]
                    top = a + fx[j] * (b - a)
                    bottom = cc + fx[j] * (d - cc)
                    ov[i, j, c] = top + fy[i] * (bottom - top)
    return out


ctypedef fused real_t:
    float
    double


cdef void _softmax_rows_backward(real_t[:, ::1] y, real_t[:, ::1] g, real_t[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j, n = y.shape[0], m = y.shape[1]
    cdef double dot
    for i in range(n):
        dot = 0.0
        for j in range(m):
            dot = dot + <double>g[i, j] * <double>y[i, j]
        for j in range(m):
            out[i, j] = <real_t>(<double>y[i, j] * (<double>g[i, j] - dot))


def softmax_rows_backward(y, g):
    y = np.ascontiguousarray(y)
    g = np.ascontiguousarray(g, dtype=y.dtype)
    shape = y.shape
    y2 = y.reshape(-1, shape[len(shape) - 1])
    g2 = g.reshape(-1, shape[len(shape) - 1])
    out = np.empty_like(y2)
    cdef float[:, ::1] yf, gf, of
    cdef double[:, ::1] yd, gd, od
    if y2.dtype == np.float32:
        yf = y2
        gf = g2
        of = out
        _softmax_rows_backward(yf, gf, of)
    else:
        yd = y2
        gd = g2
        od = out
        _softmax_rows_backward(yd, gd, od)
    return out.reshape(shape)
