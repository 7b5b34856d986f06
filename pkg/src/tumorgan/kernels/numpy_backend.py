"""Pure-numpy 3D convolution kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable. The three
entry points share the layout conventions of the compiled backend:

* input  ``x``  is ``(C_in, X, Y, Z)``, C-contiguous,
* weight ``w``  is ``(C_out, C_in, kx, ky, kz)``,
* output       is ``(C_out, OX, OY, OZ)`` with
  ``O = (ext + 2*pad - dilation*(k - 1) - 1) // stride + 1`` per axis.

The im2col buffer is filled with one bulk strided copy per kernel offset
(k**3 slab copies) rather than a generic strided gather, and is built in
z-slabs so peak memory stays bounded even for wide layers on full 64**3
volumes.
"""

import numpy as np

# Cap on the transient im2col buffer, in bytes.
_COL_BYTES_LIMIT = 192 * 1024 * 1024


def out_extent(ext, k, stride, pad, dilation):
    return (ext + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _pad_input(x, pad):
    px, py, pz = pad
    if px == 0 and py == 0 and pz == 0:
        return x
    return np.pad(x, ((0, 0), (px, px), (py, py), (pz, pz)))


def _offset_slab(xp, kernel, stride, dilation, oshape, i, j, l, z0, z1):
    """Strided input slab feeding output z-range [z0, z1) at offset (i,j,l)."""
    sx, sy, sz = stride
    dx, dy, dz = dilation
    ox, oy, _ = oshape
    return xp[
        :,
        i * dx : i * dx + sx * ox : sx,
        j * dy : j * dy + sy * oy : sy,
        l * dz + z0 * sz : l * dz + z0 * sz + sz * (z1 - z0) : sz,
    ]


def _fill_col(col, xp, kernel, stride, dilation, oshape, z0, z1):
    """col: (C_in, k^3, OX, OY, z1-z0) buffer, one slab copy per offset."""
    kx, ky, kz = kernel
    q = 0
    for i in range(kx):
        for j in range(ky):
            for l in range(kz):
                col[:, q] = _offset_slab(xp, kernel, stride, dilation, oshape, i, j, l, z0, z1)
                q += 1


def _z_chunk(c_in, kernel, oshape, itemsize):
    """Output-z slab size keeping the materialized col matrix under the cap."""
    ox, oy, _ = oshape
    per_z = c_in * kernel[0] * kernel[1] * kernel[2] * ox * oy * itemsize
    return max(1, _COL_BYTES_LIMIT // max(per_z, 1))


def conv3d_forward(x, w, stride, pad, dilation, num_threads=0):
    c_out, c_in = w.shape[0], w.shape[1]
    kernel = w.shape[2:]
    if x.shape[0] != c_in:
        raise ValueError(f"input has {x.shape[0]} channels, weight expects {c_in}")
    oshape = tuple(
        out_extent(x.shape[1 + a], kernel[a], stride[a], pad[a], dilation[a])
        for a in range(3)
    )
    xp = _pad_input(x, pad)
    w_mat = np.ascontiguousarray(w.reshape(c_out, -1))

    out = np.empty((c_out,) + oshape, dtype=x.dtype)
    ox, oy, oz = oshape
    kn = kernel[0] * kernel[1] * kernel[2]
    step = _z_chunk(c_in, kernel, oshape, x.itemsize)
    col = np.empty((c_in, kn, ox, oy, min(step, oz)), dtype=x.dtype)
    for z0 in range(0, oz, step):
        z1 = min(z0 + step, oz)
        cblock = col[..., : z1 - z0]
        _fill_col(cblock, xp, kernel, stride, dilation, oshape, z0, z1)
        out[..., z0:z1] = (
            w_mat @ cblock.reshape(c_in * kn, -1)
        ).reshape(c_out, ox, oy, z1 - z0)
    return out


def conv3d_grad_input(gy, w, x_shape, stride, pad, dilation, num_threads=0):
    c_out, c_in = w.shape[0], w.shape[1]
    kx, ky, kz = w.shape[2:]
    sx, sy, sz = stride
    dx, dy, dz = dilation
    ox, oy, oz = gy.shape[1:]
    px, py, pz = pad

    padded = (
        c_in,
        x_shape[1] + 2 * px,
        x_shape[2] + 2 * py,
        x_shape[3] + 2 * pz,
    )
    gxp = np.zeros(padded, dtype=gy.dtype)
    w_mat_t = np.ascontiguousarray(w.reshape(c_out, -1).T)

    # col-space gradient in z-slabs, then k**3 strided scatter-adds per slab
    step = _z_chunk(c_in, (kx, ky, kz), (ox, oy, oz), gy.itemsize)
    for z0 in range(0, oz, step):
        z1 = min(z0 + step, oz)
        gy_block = np.ascontiguousarray(gy[..., z0:z1]).reshape(c_out, -1)
        col_grad = (w_mat_t @ gy_block).reshape(c_in, kx, ky, kz, ox, oy, z1 - z0)
        for i in range(kx):
            for j in range(ky):
                for l in range(kz):
                    gxp[
                        :,
                        i * dx : i * dx + sx * ox : sx,
                        j * dy : j * dy + sy * oy : sy,
                        l * dz + z0 * sz : l * dz + z0 * sz + sz * (z1 - z0) : sz,
                    ] += col_grad[:, i, j, l]
    if px == 0 and py == 0 and pz == 0:
        return gxp
    return np.ascontiguousarray(
        gxp[:, px : px + x_shape[1], py : py + x_shape[2], pz : pz + x_shape[3]]
    )


def conv3d_grad_weight(gy, x, w_shape, stride, pad, dilation, num_threads=0):
    c_out, c_in = w_shape[0], w_shape[1]
    kernel = w_shape[2:]
    oshape = gy.shape[1:]
    xp = _pad_input(x, pad)

    kn = kernel[0] * kernel[1] * kernel[2]
    gw = np.zeros((c_out, c_in * kn), dtype=gy.dtype)
    ox, oy, oz = oshape
    step = _z_chunk(c_in, kernel, oshape, x.itemsize)
    col = np.empty((c_in, kn, ox, oy, min(step, oz)), dtype=x.dtype)
    gy_flatxy = gy.reshape(c_out, ox * oy, oz)
    for z0 in range(0, oz, step):
        z1 = min(z0 + step, oz)
        cblock = col[..., : z1 - z0]
        _fill_col(cblock, xp, kernel, stride, dilation, oshape, z0, z1)
        gy_block = np.ascontiguousarray(gy_flatxy[..., z0:z1]).reshape(c_out, -1)
        gw += gy_block @ cblock.reshape(c_in * kn, -1).T
    return gw.reshape(w_shape)
