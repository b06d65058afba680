"""Central-difference gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad


@dataclass
class GradcheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float
    failures: list = field(default_factory=list)

    @property
    def max_rel_error(self):
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self):
        return not self.failures


def relative_error(a, n, floor=1e-3):
    """``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps near-zero gradients from turning round-off into huge
    ratios; below it the measure is an absolute error scaled by ``1/floor``.
    """
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def gradcheck(f, x, step=1e-4, tol=1e-4, floor=1e-3):
    """Compare reverse-mode ``d f / d x`` against five-point central differences.

    ``f`` maps nothing to a scalar Tensor and must read ``x`` (a leaf with
    ``requires_grad``) each time it is called; ``x.data`` is perturbed in
    place and restored. Use 64-bit data: finite differences in 32-bit are
    dominated by round-off.
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ValueError("x must be a Tensor with requires_grad=True")
    x.grad = None
    f().backward()
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            vals = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * step
                vals.append(f().item())
            flat[i] = orig
            # five-point stencil: truncation error O(step^4) instead of O(step^2)
            numeric.flat[i] = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * step)
    err = relative_error(analytic, numeric, floor)
    failures = [tuple(int(v) for v in np.unravel_index(i, x.shape)) for i in np.flatnonzero(err > tol)]
    return GradcheckReport(analytic, numeric, err, tol, failures)


def gradcheck_all(f, tensors, step=1e-4, tol=1e-4, floor=1e-3):
    """Run :func:`gradcheck` for each named tensor; returns ``{name: report}``."""
    return {name: gradcheck(f, t, step, tol, floor) for name, t in tensors.items()}
