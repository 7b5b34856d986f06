"""Convolution kernel backends.

Two interchangeable implementations of the hot 3D convolution kernels:

* ``compiled`` -- Cython extension (``_conv3d``), direct convolution with
  OpenMP over independent output slabs; bit-identical results for any
  thread count.
* ``numpy``    -- pure-numpy im2col + BLAS matmul fallback.

The compiled backend is selected at import when the extension built; set
``TUMORGAN_BACKEND=numpy`` (or ``compiled``) to force one. Both expose the
same three functions with identical semantics; ``benchmarks/bench_backends.py``
compares their throughput.

Direct convolution wins on large spatial extents with few channels, BLAS on
compact many-channel shapes, so the compiled backend routes calls whose
output has at most ``_GEMM_CUTOFF`` voxels to the im2col path. The routing
depends only on shapes, never on data, so results stay deterministic.
"""

import os

import numpy as np

from . import numpy_backend

try:
    from . import _conv3d as _ext
except ImportError:
    _ext = None

_forced = os.environ.get("TUMORGAN_BACKEND", "").strip().lower()
if _forced and _forced not in ("compiled", "numpy"):
    raise RuntimeError(f"TUMORGAN_BACKEND must be 'compiled' or 'numpy', got {_forced!r}")
if _forced == "compiled" and _ext is None:
    raise RuntimeError("TUMORGAN_BACKEND=compiled but the extension is not built")

BACKEND = _forced or ("compiled" if _ext is not None else "numpy")

# output-voxel count at or below which the im2col/BLAS path is faster
_GEMM_CUTOFF = 8192

_num_threads = min(os.cpu_count() or 1, 8)

out_extent = numpy_backend.out_extent


def set_num_threads(n):
    """Thread count for the compiled backend (1 = serial). Numerics never change."""
    global _num_threads
    _num_threads = max(1, int(n))


def get_num_threads():
    return _num_threads


def _check_real(*arrays):
    dt = arrays[0].dtype
    if dt not in (np.float32, np.float64):
        raise TypeError(f"kernels require float32/float64 arrays, got {dt}")
    for a in arrays[1:]:
        if a.dtype != dt:
            raise TypeError(f"mixed dtypes in kernel call: {dt} vs {a.dtype}")


def _pad(x, pad):
    px, py, pz = pad
    if px == py == pz == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (px, px), (py, py), (pz, pz)))


def conv3d_forward(x, w, stride, pad, dilation):
    """(C_in,X,Y,Z) * (C_out,C_in,kx,ky,kz) -> (C_out,OX,OY,OZ)."""
    _check_real(x, w)
    oshape = tuple(
        out_extent(x.shape[1 + a], w.shape[2 + a], stride[a], pad[a], dilation[a])
        for a in range(3)
    )
    if BACKEND == "numpy" or oshape[0] * oshape[1] * oshape[2] <= _GEMM_CUTOFF:
        return numpy_backend.conv3d_forward(x, w, stride, pad, dilation)
    xp = _pad(x, pad)
    out = np.zeros((w.shape[0],) + oshape, dtype=x.dtype)
    _ext.forward(xp, np.ascontiguousarray(w), out, *stride, *dilation, _num_threads)
    return out


def conv3d_grad_input(gy, w, x_shape, stride, pad, dilation):
    _check_real(gy, w)
    if BACKEND == "numpy" or gy.size // gy.shape[0] <= _GEMM_CUTOFF:
        return numpy_backend.conv3d_grad_input(gy, w, x_shape, stride, pad, dilation)
    px, py, pz = pad
    gxp = np.zeros(
        (x_shape[0], x_shape[1] + 2 * px, x_shape[2] + 2 * py, x_shape[3] + 2 * pz),
        dtype=gy.dtype,
    )
    _ext.grad_input(np.ascontiguousarray(gy), np.ascontiguousarray(w), gxp,
                    *stride, *dilation, _num_threads)
    if px == py == pz == 0:
        return gxp
    return np.ascontiguousarray(
        gxp[:, px : px + x_shape[1], py : py + x_shape[2], pz : pz + x_shape[3]]
    )


def conv3d_grad_weight(gy, x, w_shape, stride, pad, dilation):
    _check_real(gy, x)
    if BACKEND == "numpy" or gy.size // gy.shape[0] <= _GEMM_CUTOFF:
        return numpy_backend.conv3d_grad_weight(gy, x, w_shape, stride, pad, dilation)
    xp = _pad(x, pad)
    gw = np.zeros(w_shape, dtype=gy.dtype)
    _ext.grad_weight(np.ascontiguousarray(gy), xp, gw, *stride, *dilation, _num_threads)
    return gw
