"""Separable linear/nearest resampling matrices.

A 1D linear resample is a sparse linear map; as a dense (n_out, n_in) matrix
it turns trilinear interpolation into three tensordots, which keeps the
operation exactly linear, cheap to transpose for gradients, and bit-for-bit
deterministic. Sample positions follow the half-pixel (align_corners=False)
convention: output cell i reads input coordinate (i + 0.5) * n_in/n_out - 0.5,
clamped at the edges.
"""

import numpy as np


def linear_matrix(n_in, n_out, dtype=np.float64):
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for i in range(n_out):
        c = (i + 0.5) * scale - 0.5
        c0 = int(np.floor(c))
        t = c - c0
        lo = min(max(c0, 0), n_in - 1)
        hi = min(max(c0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - t
        m[i, hi] += t
    return m


def nearest_indices(n_in, n_out):
    c = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.rint(c).astype(np.intp), 0, n_in - 1)


def apply_axis(arr, m, axis):
    """Apply an (n_out, n_in) matrix along one axis of arr."""
    moved = np.tensordot(m, arr, axes=(1, axis))
    return np.ascontiguousarray(np.moveaxis(moved, 0, axis))
