"""Compiled per-pixel inference for fully 1x1 networks.

Pixels are processed in fixed-size blocks with a fixed summation order and no
fused multiply-add, so a pixel's output never depends on its position, on the
image size or on how the image is tiled.
"""

import numba
import numpy as np

BLOCK = 256


@numba.njit(cache=True, boundscheck=False)
def _dense_block(src, w, b, dst, m, relu):
    nout, nin = w.shape
    j = 0
    while j + 4 <= nout:
        b0 = b[j]
        b1 = b[j + 1]
        b2 = b[j + 2]
        b3 = b[j + 3]
        for p in range(m):
            dst[j, p] = b0
            dst[j + 1, p] = b1
            dst[j + 2, p] = b2
            dst[j + 3, p] = b3
        for k in range(nin):
            w0 = w[j, k]
            w1 = w[j + 1, k]
            w2 = w[j + 2, k]
            w3 = w[j + 3, k]
            for p in range(m):
                v = src[k, p]
                dst[j, p] += w0 * v
                dst[j + 1, p] += w1 * v
                dst[j + 2, p] += w2 * v
                dst[j + 3, p] += w3 * v
        j += 4
    while j < nout:
        bj = b[j]
        for p in range(m):
            dst[j, p] = bj
        for k in range(nin):
            wj = w[j, k]
            for p in range(m):
                dst[j, p] += wj * src[k, p]
        j += 1
    if relu:
        zero = b[0] * 0
        for j in range(nout):
            for p in range(m):
                if dst[j, p] < zero:
                    dst[j, p] = zero


@numba.njit(cache=True, boundscheck=False)
def _layers(cur, nxt, dims, wflat, bflat, m):
    """Run one block through every layer; returns the buffer holding the output."""
    n_layers = dims.shape[0] - 1
    woff = 0
    boff = 0
    for layer in range(n_layers):
        nin = dims[layer]
        nout = dims[layer + 1]
        w = wflat[woff : woff + nout * nin].reshape((nout, nin))
        b = bflat[boff : boff + nout]
        _dense_block(cur, w, b, nxt, m, layer < n_layers - 1)
        woff += nout * nin
        boff += nout
        cur, nxt = nxt, cur
    return cur


@numba.njit(cache=True)
def _buffers(dims, dtype_like):
    width = 0
    for d in dims:
        if d > width:
            width = d
    return np.empty((width, BLOCK), dtype_like.dtype), np.empty((width, BLOCK), dtype_like.dtype)


@numba.njit(cache=True, boundscheck=False)
def pointwise_mlp(x, dims, wflat, bflat, out):
    """Run an ``(n, 3)`` pixel array through dense layers of widths ``dims``.

    ReLU follows every layer but the last; the last is clamped to [-1, 1].
    """
    n = x.shape[0]
    cur, nxt = _buffers(dims, bflat)
    lo = bflat[0] * 0 - 1
    hi = lo + 2
    c_in = dims[0]
    c_out = dims[dims.shape[0] - 1]
    for start in range(0, n, BLOCK):
        m = min(BLOCK, n - start)
        for p in range(m):
            for k in range(c_in):
                cur[k, p] = x[start + p, k]
        res = _layers(cur, nxt, dims, wflat, bflat, m)
        for p in range(m):
            for j in range(c_out):
                v = res[j, p]
                if v < lo:
                    v = lo
                elif v > hi:
                    v = hi
                out[start + p, j] = v


@numba.njit(cache=True, boundscheck=False)
def pointwise_mlp_u8(x, levels, dims, wflat, bflat, out):
    """8-bit pixels in, 8-bit pixels out.

    ``levels[v]`` is the scaled network input for byte ``v``.  Outputs are
    clamped to [-1, 1] and mapped back with ``floor((y + 1) * 127.5 + 0.5)``
    in double precision, the same steps as the array-level conversion.
    """
    n = x.shape[0]
    cur, nxt = _buffers(dims, bflat)
    c_in = dims[0]
    c_out = dims[dims.shape[0] - 1]
    for start in range(0, n, BLOCK):
        m = min(BLOCK, n - start)
        for p in range(m):
            for k in range(c_in):
                cur[k, p] = levels[x[start + p, k]]
        res = _layers(cur, nxt, dims, wflat, bflat, m)
        for p in range(m):
            for j in range(c_out):
                v = np.float64(res[j, p])
                if v < -1.0:
                    v = -1.0
                elif v > 1.0:
                    v = 1.0
                out[start + p, j] = np.uint8(np.floor((v + 1.0) * 127.5 + 0.5))
