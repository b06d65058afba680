"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it was built at install time. Setting
``SER_PURE_PYTHON=1`` forces the fallback (useful for benchmarking and for
checking that both backends agree).
"""

import os

import numpy as np

from . import _fallback

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

if _ckernels is not None and os.environ.get("SER_PURE_PYTHON", "") != "1":
    BACKEND = "compiled"
    _impl = _ckernels
else:
    BACKEND = "python"
    _impl = _fallback


def available_backends():
    return ["python"] + (["compiled"] if _ckernels is not None else [])


def get_backend(name=None):
    """Module implementing the kernels; ``None`` means the active one."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        return _ckernels
    raise ValueError(f"unknown backend {name!r}")


def sinc_resample(x, src_rate, dst_rate, n_out, n_zeros=16):
    return _impl.sinc_resample(x, float(src_rate), float(dst_rate), int(n_out), int(n_zeros))


def bilinear_resize(img, out_h, out_w):
    return _impl.bilinear_resize(img, int(out_h), int(out_w))


def softmax_rows(x):
    """Softmax over the last axis.

    Always numpy: its vectorized ``exp`` beats a scalar compiled loop.
    """
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    return _fallback.softmax_rows(x)


def softmax_rows_backward(y, g):
    return _impl.softmax_rows_backward(y, g)


_allocator_tuned = False


def tune_allocator():
    """Keep large freed buffers on the heap instead of returning them to the OS.

    Training allocates and frees the same few-hundred-KB activations every
    step; with glibc's defaults each one is a fresh ``mmap`` and pays page
    faults again. Raising the mmap and trim thresholds removes that churn.
    A no-op off glibc. Returns True if the thresholds were changed.
    """
    global _allocator_tuned
    if _allocator_tuned:
        return True
    try:
        import ctypes
        import ctypes.util

        libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6")
        ok = libc.mallopt(-3, 32 << 20) == 1 and libc.mallopt(-1, 256 << 20) == 1  # M_MMAP_/M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        ok = False
    _allocator_tuned = ok
    return ok
