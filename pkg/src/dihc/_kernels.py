"""Compiled inner loops for stride-1 3-D correlation on a flattened padded grid.

Activations are laid out channel-first and flattened over (N, D+2p, H+2p, W+2p),
so each kernel tap is a constant column shift. Offsets come in kernel order
(depth, row, column) with the column index fastest, which lets the 3x3x3
kernels read nine shifted rows per pass.
"""

import numpy as np
from numba import njit

_BLOCK = 1024
_WBLOCK = 2048


@njit(cache=True, fastmath=True)
def _correlate_generic(src, weight, offsets, out):
    n_out, length = out.shape
    n_in = src.shape[0]
    n_taps = offsets.shape[0]
    acc = np.zeros((n_out, _BLOCK), dtype=out.dtype)
    for q0 in range(0, length, _BLOCK):
        n = min(_BLOCK, length - q0)
        acc[:] = 0
        for k in range(n_taps):
            s = q0 + offsets[k]
            for c in range(n_in):
                row = src[c, s : s + n]
                for f in range(n_out):
                    wv = weight[k, f, c]
                    a = acc[f]
                    for i in range(n):
                        a[i] += wv * row[i]
        out[:, q0 : q0 + n] = acc[:, :n]


@njit(cache=True, fastmath=True)
def _correlate_k3(src, weight, offsets, out):
    # two output channels per pass so each loaded input row feeds 18 products
    n_out, length = out.shape
    n_in = src.shape[0]
    acc = np.zeros((n_out, _BLOCK), dtype=out.dtype)
    for q0 in range(0, length, _BLOCK):
        n = min(_BLOCK, length - q0)
        acc[:] = 0
        for k in range(0, 27, 9):
            s0 = q0 + offsets[k]
            s1 = q0 + offsets[k + 3]
            s2 = q0 + offsets[k + 6]
            for c in range(n_in):
                r0 = src[c, s0 : s0 + n]
                r1 = src[c, s0 + 1 : s0 + 1 + n]
                r2 = src[c, s0 + 2 : s0 + 2 + n]
                r3 = src[c, s1 : s1 + n]
                r4 = src[c, s1 + 1 : s1 + 1 + n]
                r5 = src[c, s1 + 2 : s1 + 2 + n]
                r6 = src[c, s2 : s2 + n]
                r7 = src[c, s2 + 1 : s2 + 1 + n]
                r8 = src[c, s2 + 2 : s2 + 2 + n]
                for f in range(0, n_out, 2):
                    w0 = weight[k, f, c]
                    w1 = weight[k + 1, f, c]
                    w2 = weight[k + 2, f, c]
                    w3 = weight[k + 3, f, c]
                    w4 = weight[k + 4, f, c]
                    w5 = weight[k + 5, f, c]
                    w6 = weight[k + 6, f, c]
                    w7 = weight[k + 7, f, c]
                    w8 = weight[k + 8, f, c]
                    v0 = weight[k, f + 1, c]
                    v1 = weight[k + 1, f + 1, c]
                    v2 = weight[k + 2, f + 1, c]
                    v3 = weight[k + 3, f + 1, c]
                    v4 = weight[k + 4, f + 1, c]
                    v5 = weight[k + 5, f + 1, c]
                    v6 = weight[k + 6, f + 1, c]
                    v7 = weight[k + 7, f + 1, c]
                    v8 = weight[k + 8, f + 1, c]
                    a = acc[f]
                    b = acc[f + 1]
                    for i in range(n):
                        x0 = r0[i]
                        x1 = r1[i]
                        x2 = r2[i]
                        x3 = r3[i]
                        x4 = r4[i]
                        x5 = r5[i]
                        x6 = r6[i]
                        x7 = r7[i]
                        x8 = r8[i]
                        a[i] += (
                            w0 * x0 + w1 * x1 + w2 * x2
                            + w3 * x3 + w4 * x4 + w5 * x5
                            + w6 * x6 + w7 * x7 + w8 * x8
                        )
                        b[i] += (
                            v0 * x0 + v1 * x1 + v2 * x2
                            + v3 * x3 + v4 * x4 + v5 * x5
                            + v6 * x6 + v7 * x7 + v8 * x8
                        )
        out[:, q0 : q0 + n] = acc[:, :n]


@njit(cache=True, fastmath=True)
def _weight_grad_k3(src, g, offsets, dw):
    # output channels in pairs so each loaded input row feeds 18 products
    n_out, length = g.shape
    n_in = src.shape[0]
    n_pair = n_out - n_out % 2
    zero = np.zeros(1, dtype=g.dtype)[0]
    part = np.zeros((27, n_out, n_in), dtype=np.float64)
    for q0 in range(0, length, _WBLOCK):
        n = min(_WBLOCK, length - q0)
        for k in range(0, 27, 9):
            s0 = q0 + offsets[k]
            s1 = q0 + offsets[k + 3]
            s2 = q0 + offsets[k + 6]
            for c in range(n_in):
                r0 = src[c, s0 : s0 + n]
                r1 = src[c, s0 + 1 : s0 + 1 + n]
                r2 = src[c, s0 + 2 : s0 + 2 + n]
                r3 = src[c, s1 : s1 + n]
                r4 = src[c, s1 + 1 : s1 + 1 + n]
                r5 = src[c, s1 + 2 : s1 + 2 + n]
                r6 = src[c, s2 : s2 + n]
                r7 = src[c, s2 + 1 : s2 + 1 + n]
                r8 = src[c, s2 + 2 : s2 + 2 + n]
                for f in range(0, n_pair, 2):
                    ga = g[f, q0 : q0 + n]
                    gb = g[f + 1, q0 : q0 + n]
                    a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = a8 = zero
                    b0 = b1 = b2 = b3 = b4 = b5 = b6 = b7 = b8 = zero
                    for i in range(n):
                        u = ga[i]
                        v = gb[i]
                        x0 = r0[i]
                        x1 = r1[i]
                        x2 = r2[i]
                        x3 = r3[i]
                        x4 = r4[i]
                        x5 = r5[i]
                        x6 = r6[i]
                        x7 = r7[i]
                        x8 = r8[i]
                        a0 += u * x0
                        a1 += u * x1
                        a2 += u * x2
                        a3 += u * x3
                        a4 += u * x4
                        a5 += u * x5
                        a6 += u * x6
                        a7 += u * x7
                        a8 += u * x8
                        b0 += v * x0
                        b1 += v * x1
                        b2 += v * x2
                        b3 += v * x3
                        b4 += v * x4
                        b5 += v * x5
                        b6 += v * x6
                        b7 += v * x7
                        b8 += v * x8
                    part[k, f, c] += a0
                    part[k + 1, f, c] += a1
                    part[k + 2, f, c] += a2
                    part[k + 3, f, c] += a3
                    part[k + 4, f, c] += a4
                    part[k + 5, f, c] += a5
                    part[k + 6, f, c] += a6
                    part[k + 7, f, c] += a7
                    part[k + 8, f, c] += a8
                    part[k, f + 1, c] += b0
                    part[k + 1, f + 1, c] += b1
                    part[k + 2, f + 1, c] += b2
                    part[k + 3, f + 1, c] += b3
                    part[k + 4, f + 1, c] += b4
                    part[k + 5, f + 1, c] += b5
                    part[k + 6, f + 1, c] += b6
                    part[k + 7, f + 1, c] += b7
                    part[k + 8, f + 1, c] += b8
                for f in range(n_pair, n_out):
                    gr = g[f, q0 : q0 + n]
                    a0 = a1 = a2 = a3 = a4 = a5 = a6 = a7 = a8 = zero
                    for i in range(n):
                        gv = gr[i]
                        a0 += gv * r0[i]
                        a1 += gv * r1[i]
                        a2 += gv * r2[i]
                        a3 += gv * r3[i]
                        a4 += gv * r4[i]
                        a5 += gv * r5[i]
                        a6 += gv * r6[i]
                        a7 += gv * r7[i]
                        a8 += gv * r8[i]
                    part[k, f, c] += a0
                    part[k + 1, f, c] += a1
                    part[k + 2, f, c] += a2
                    part[k + 3, f, c] += a3
                    part[k + 4, f, c] += a4
                    part[k + 5, f, c] += a5
                    part[k + 6, f, c] += a6
                    part[k + 7, f, c] += a7
                    part[k + 8, f, c] += a8
    for k in range(27):
        for f in range(n_out):
            for c in range(n_in):
                dw[k, f, c] = part[k, f, c]


def correlate(src: np.ndarray, weight: np.ndarray, offsets: np.ndarray, out: np.ndarray):
    """out[f, q] = sum_k sum_c weight[k, f, c] * src[c, q + offsets[k]].

    ``src`` must extend at least ``max(offsets)`` columns past ``out``.
    """
    if weight.shape[0] == 27 and out.shape[0] % 2 == 0:
        _correlate_k3(src, weight, offsets, out)
    else:
        _correlate_generic(src, weight, offsets, out)


def weight_grad(src: np.ndarray, g: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    """dw[k, f, c] = sum_q g[f, q] * src[c, q + offsets[k]]."""
    n_out, length = g.shape
    dw = np.empty((len(offsets), n_out, src.shape[0]), dtype=g.dtype)
    if len(offsets) == 27:
        _weight_grad_k3(src, g, offsets, dw)
    else:
        for i, off in enumerate(offsets):
            dw[i] = g @ src[:, off : off + length].T
    return dw
