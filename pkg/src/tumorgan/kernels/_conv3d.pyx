# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled direct 3D convolution kernels.

Each output element is accumulated by exactly one thread in a fixed loop
order, so results are bit-identical for any thread count (the serial/parallel
switch never changes numerics). Inputs arrive pre-padded from the Python
wrapper; gradients w.r.t. the input are scattered into a padded buffer the
wrapper crops, which removes all bounds handling from the hot loops.

The innermost z loops run over the contiguous last axis through raw pointers
(with a stride-1 fast path) so the compiler can vectorize them.
"""

from cython.parallel cimport prange
from libc.stdlib cimport free, malloc

ctypedef fused real:
    float
    double


cdef inline void _axpy(real* acc, const real* x, real w,
                       Py_ssize_t n, Py_ssize_t xstride) noexcept nogil:
    cdef Py_ssize_t i
    if xstride == 1:
        for i in range(n):
            acc[i] = acc[i] + w * x[i]
    else:
        for i in range(n):
            acc[i] = acc[i] + w * x[i * xstride]


cdef inline void _axpy_scatter(real* y, const real* g, real w,
                               Py_ssize_t n, Py_ssize_t ystride) noexcept nogil:
    cdef Py_ssize_t i
    if ystride == 1:
        for i in range(n):
            y[i] = y[i] + w * g[i]
    else:
        for i in range(n):
            y[i * ystride] = y[i * ystride] + w * g[i]


cdef inline real _dot(const real* g, const real* x,
                      Py_ssize_t n, Py_ssize_t xstride) noexcept nogil:
    # eight independent accumulator lanes: fixes the summation order while
    # breaking the serial reduction chain so the loop can vectorize
    cdef Py_ssize_t i, n8
    cdef real a0 = 0, a1 = 0, a2 = 0, a3 = 0, a4 = 0, a5 = 0, a6 = 0, a7 = 0
    cdef real acc = 0
    if xstride == 1:
        n8 = n - (n % 8)
        for i in range(0, n8, 8):
            a0 = a0 + g[i] * x[i]
            a1 = a1 + g[i + 1] * x[i + 1]
            a2 = a2 + g[i + 2] * x[i + 2]
            a3 = a3 + g[i + 3] * x[i + 3]
            a4 = a4 + g[i + 4] * x[i + 4]
            a5 = a5 + g[i + 5] * x[i + 5]
            a6 = a6 + g[i + 6] * x[i + 6]
            a7 = a7 + g[i + 7] * x[i + 7]
        for i in range(n8, n):
            acc = acc + g[i] * x[i]
        return ((a0 + a1) + (a2 + a3)) + ((a4 + a5) + (a6 + a7)) + acc
    for i in range(n):
        acc = acc + g[i] * x[i * xstride]
    return acc


def forward(real[:, :, :, ::1] xp, real[:, :, :, :, ::1] w,
            real[:, :, :, ::1] out,
            int sx, int sy, int sz, int dx, int dy, int dz, int nt):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t ox_n = out.shape[1], oy_n = out.shape[2], oz_n = out.shape[3]
    cdef Py_ssize_t co, ci, i, j, l, ox, oy, oz
    cdef real wv
    cdef real* acc

    for co in prange(c_out, nogil=True, num_threads=nt, schedule='static'):
        acc = <real*> malloc(oz_n * sizeof(real))
        for ox in range(ox_n):
            for oy in range(oy_n):
                for oz in range(oz_n):
                    acc[oz] = 0
                for ci in range(c_in):
                    for i in range(kx):
                        for j in range(ky):
                            for l in range(kz):
                                wv = w[co, ci, i, j, l]
                                if wv == 0:
                                    continue
                                _axpy(acc,
                                      &xp[ci, ox * sx + i * dx, oy * sy + j * dy, l * dz],
                                      wv, oz_n, sz)
                for oz in range(oz_n):
                    out[co, ox, oy, oz] = acc[oz]
        free(acc)


def grad_input(real[:, :, :, ::1] gy, real[:, :, :, :, ::1] w,
               real[:, :, :, ::1] gxp,
               int sx, int sy, int sz, int dx, int dy, int dz, int nt):
    cdef Py_ssize_t c_out = w.shape[0], c_in = w.shape[1]
    cdef Py_ssize_t kx = w.shape[2], ky = w.shape[3], kz = w.shape[4]
    cdef Py_ssize_t ox_n = gy.shape[1], oy_n = gy.shape[2], oz_n = gy.shape[3]
    cdef Py_ssize_t xp_n = gxp.shape[1], yp_n = gxp.shape[2], zp_n = gxp.shape[3]
    cdef Py_ssize_t co, ci, i, j, l, ox, oy, ix, iy, iz, t
    cdef real wv
    cdef real* acc

    # parallel over input channels: each thread owns a disjoint gxp slab.
    # each padded-input row is accumulated locally and stored once.
    for ci in prange(c_in, nogil=True, num_threads=nt, schedule='static'):
        acc = <real*> malloc(zp_n * sizeof(real))
        for ix in range(xp_n):
            for iy in range(yp_n):
                for iz in range(zp_n):
                    acc[iz] = 0
                for co in range(c_out):
                    for i in range(kx):
                        t = ix - i * dx
                        if t < 0 or t % sx != 0:
                            continue
                        ox = t // sx
                        if ox >= ox_n:
                            continue
                        for j in range(ky):
                            t = iy - j * dy
                            if t < 0 or t % sy != 0:
                                continue
                            oy = t // sy
                            if oy >= oy_n:
                                continue
                            for l in range(kz):
                                wv = w[co, ci, i, j, l]
                                if wv == 0:
                                    continue
                                # acc[oz*sz + l*dz] += wv * gy[co,ox,oy,oz]
                                _axpy_scatter(acc + l * dz,
                                              &gy[co, ox, oy, 0], wv, oz_n, sz)
                for iz in range(zp_n):
                    gxp[ci, ix, iy, iz] = acc[iz]
        free(acc)


def grad_weight(real[:, :, :, ::1] gy, real[:, :, :, ::1] xp,
                real[:, :, :, :, ::1] gw,
                int sx, int sy, int sz, int dx, int dy, int dz, int nt):
    cdef Py_ssize_t c_out = gw.shape[0], c_in = gw.shape[1]
    cdef Py_ssize_t kx = gw.shape[2], ky = gw.shape[3], kz = gw.shape[4]
    cdef Py_ssize_t ox_n = gy.shape[1], oy_n = gy.shape[2], oz_n = gy.shape[3]
    cdef Py_ssize_t kn = kx * ky * kz
    cdef Py_ssize_t co, ci, i, j, l, ox, oy, q
    cdef real* acc

    # all k^3 taps accumulated per (co, ci) pass so each gy row streams once
    for co in prange(c_out, nogil=True, num_threads=nt, schedule='static'):
        acc = <real*> malloc(kn * sizeof(real))
        for ci in range(c_in):
            for q in range(kn):
                acc[q] = 0
            for ox in range(ox_n):
                for oy in range(oy_n):
                    q = 0
                    for i in range(kx):
                        for j in range(ky):
                            for l in range(kz):
                                acc[q] = acc[q] + _dot(
                                    &gy[co, ox, oy, 0],
                                    &xp[ci, ox * sx + i * dx, oy * sy + j * dy, l * dz],
                                    oz_n, sz)
                                q = q + 1
            q = 0
            for i in range(kx):
                for j in range(ky):
                    for l in range(kz):
                        gw[co, ci, i, j, l] = acc[q]
                        q = q + 1
        free(acc)
