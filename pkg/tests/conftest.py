"""Shared helpers: finite-difference oracles and tolerance rules.

Gradient comparisons accept a point when the relative error is below 1e-4,
with an absolute floor of 1e-6 so that near-zero gradients are not judged
by a meaningless ratio (central differences carry ~1e-10 of roundoff).
"""
import numpy as np

REL_TOL = 1e-4
ABS_FLOOR = 1e-6
FD_STEP = 1e-5


def numeric_gradient(fn, arr, h=FD_STEP):
    """Central-difference gradient of scalar fn() w.r.t. arr, mutated in place."""
    grad = np.zeros_like(arr)
    flat, out = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        hi = fn()
        flat[i] = saved - h
        lo = fn()
        flat[i] = saved
        out[i] = (hi - lo) / (2.0 * h)
    return grad


def gradients_close(numeric, analytic, rel=REL_TOL, floor=ABS_FLOOR):
    numeric = np.asarray(numeric, dtype=np.float64)
    analytic = np.asarray(analytic, dtype=np.float64)
    if numeric.shape != analytic.shape:
        return False
    diff = np.abs(numeric - analytic)
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    return bool(np.all((diff <= floor) | (diff <= rel * scale)))


def max_gradient_error(numeric, analytic, rel=REL_TOL, floor=ABS_FLOOR):
    """Worst violation ratio; <= 1.0 means the pair passes the tolerance."""
    diff = np.abs(np.asarray(numeric) - np.asarray(analytic))
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    allowed = np.maximum(floor, rel * scale)
    return float(np.max(diff / allowed)) if diff.size else 0.0
