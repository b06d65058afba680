"""Pure-numpy implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation; they are selected
when the compiled extension is unavailable or ``SER_PURE_PYTHON=1``.
"""

import math

import numpy as np

_CHUNK = 4096


def _blackman(u):
    return 0.42 + 0.5 * np.cos(np.pi * u) + 0.08 * np.cos(2.0 * np.pi * u)


def sinc_resample(x, src_rate, dst_rate, n_out, n_zeros):
    x = np.ascontiguousarray(x, dtype=np.float64)
    n_in = x.shape[0]
    step = src_rate / dst_rate
    two_fc = min(1.0, dst_rate / src_rate)
    half = n_zeros / two_fc
    k = int(math.ceil(half)) + 1
    offsets = np.arange(-k + 1, k + 1)
    out = np.empty(n_out, dtype=np.float64)
    for start in range(0, n_out, _CHUNK):
        j = np.arange(start, min(start + _CHUNK, n_out), dtype=np.float64)
        pos = j * step
        idx = np.floor(pos).astype(np.int64)[:, None] + offsets[None, :]
        t = pos[:, None] - idx
        valid = (np.abs(t) < half) & (idx >= 0) & (idx < n_in)
        arg = two_fc * t
        with np.errstate(invalid="ignore", divide="ignore"):
            s = np.where(arg == 0.0, 1.0, np.sin(np.pi * arg) / (np.pi * arg))
        w = np.where(valid, two_fc * s * _blackman(t / half), 0.0)
        xs = x[np.clip(idx, 0, n_in - 1)]
        out[start:start + j.shape[0]] = (w * xs).sum(axis=1) / w.sum(axis=1)
    return out


def _axis_coords(n_in, n_out):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def bilinear_resize(img, out_h, out_w):
    img = np.ascontiguousarray(img, dtype=np.float64)
    y0, y1, fy = _axis_coords(img.shape[0], out_h)
    x0, x1, fx = _axis_coords(img.shape[1], out_w)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    top = a + fx * (b - a)
    bottom = c + fx * (d - c)
    return top + fy * (bottom - top)


def softmax_rows(x):
    z = x - x.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def softmax_rows_backward(y, g):
    return y * (g - (g * y).sum(axis=-1, keepdims=True))
