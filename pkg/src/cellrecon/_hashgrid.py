"""Numba kernels for the multiresolution hash-grid lookup and its gradient.

Inputs are points already normalised to [0, 1]^3.  Gradients into the tables
are accumulated sequentially, so results are independent of batching and
bit-reproducible.
"""

from __future__ import annotations

import numba as nb
import numpy as np
import torch

P1 = np.int64(2654435761)
P2 = np.int64(805459861)


@nb.njit(cache=True, inline="always")
def _index(ix, iy, iz, n1, dense, mask):
    if dense:
        return ix + n1 * (iy + n1 * iz)
    return (ix ^ (iy * P1) ^ (iz * P2)) & mask


@nb.njit(cache=True, fastmath=True)
def hash_forward(x, res, dense, tables, k):
    P = x.shape[0]
    T = tables.shape[1]
    F = tables.shape[2]
    mask = np.int64(T - 1)
    out = np.zeros((P, k * F), dtype=tables.dtype)
    wx = np.empty(2, dtype=tables.dtype)
    wy = np.empty(2, dtype=tables.dtype)
    wz = np.empty(2, dtype=tables.dtype)
    for p in range(P):
        for l in range(k):
            r = res[l]
            n1 = r + 1
            sx = x[p, 0] * r
            sy = x[p, 1] * r
            sz = x[p, 2] * r
            bx = min(np.floor(sx), r - 1)
            by = min(np.floor(sy), r - 1)
            bz = min(np.floor(sz), r - 1)
            wx[1] = sx - bx
            wy[1] = sy - by
            wz[1] = sz - bz
            wx[0] = 1.0 - wx[1]
            wy[0] = 1.0 - wy[1]
            wz[0] = 1.0 - wz[1]
            ix0 = np.int64(bx)
            iy0 = np.int64(by)
            iz0 = np.int64(bz)
            for cx in range(2):
                for cy in range(2):
                    wxy = wx[cx] * wy[cy]
                    for cz in range(2):
                        w = wxy * wz[cz]
                        idx = _index(ix0 + cx, iy0 + cy, iz0 + cz, n1, dense[l], mask)
                        for f in range(F):
                            out[p, l * F + f] += w * tables[l, idx, f]
    return out


@nb.njit(cache=True, fastmath=True)
def hash_backward(x, res, dense, tables, k, grad_out, need_x):
    P = x.shape[0]
    T = tables.shape[1]
    F = tables.shape[2]
    mask = np.int64(T - 1)
    g_tab = np.zeros((k, T, F), dtype=tables.dtype)
    g_x = np.zeros((P, 3), dtype=tables.dtype)
    wx = np.empty(2, dtype=tables.dtype)
    wy = np.empty(2, dtype=tables.dtype)
    wz = np.empty(2, dtype=tables.dtype)
    sg = (-1.0, 1.0)
    for p in range(P):
        for l in range(k):
            r = res[l]
            n1 = r + 1
            sx = x[p, 0] * r
            sy = x[p, 1] * r
            sz = x[p, 2] * r
            bx = min(np.floor(sx), r - 1)
            by = min(np.floor(sy), r - 1)
            bz = min(np.floor(sz), r - 1)
            wx[1] = sx - bx
            wy[1] = sy - by
            wz[1] = sz - bz
            wx[0] = 1.0 - wx[1]
            wy[0] = 1.0 - wy[1]
            wz[0] = 1.0 - wz[1]
            ix0 = np.int64(bx)
            iy0 = np.int64(by)
            iz0 = np.int64(bz)
            for cx in range(2):
                for cy in range(2):
                    for cz in range(2):
                        w = wx[cx] * wy[cy] * wz[cz]
                        idx = _index(ix0 + cx, iy0 + cy, iz0 + cz, n1, dense[l], mask)
                        dot = 0.0
                        for f in range(F):
                            g = grad_out[p, l * F + f]
                            g_tab[l, idx, f] += w * g
                            dot += g * tables[l, idx, f]
                        if need_x:
                            dot *= r
                            g_x[p, 0] += dot * sg[cx] * wy[cy] * wz[cz]
                            g_x[p, 1] += dot * wx[cx] * sg[cy] * wz[cz]
                            g_x[p, 2] += dot * wx[cx] * wy[cy] * sg[cz]
    return g_tab, g_x


class HashGridFunction(torch.autograd.Function):
    """``(x_normalised (P, 3), tables (L, T, F)) -> features (P, k * F)``."""

    @staticmethod
    def forward(ctx, x, tables, res, dense, k):
        xn = x.detach().cpu().numpy()
        tab = tables.detach().cpu().numpy()
        if xn.dtype != tab.dtype:
            xn = xn.astype(tab.dtype)
        out = hash_forward(np.ascontiguousarray(xn), res, dense, tab, k)
        ctx.save_for_backward(x, tables)
        ctx.res, ctx.dense, ctx.k = res, dense, k
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out):
        x, tables = ctx.saved_tensors
        tab = tables.detach().numpy()
        xn = np.ascontiguousarray(x.detach().numpy().astype(tab.dtype))
        g = np.ascontiguousarray(grad_out.detach().numpy().astype(tab.dtype))
        g_tab, g_x = hash_backward(xn, ctx.res, ctx.dense, tab, ctx.k, g, ctx.needs_input_grad[0])
        grad_tables = None
        if ctx.needs_input_grad[1]:
            grad_tables = torch.zeros_like(tables)
            grad_tables[:ctx.k] = torch.from_numpy(g_tab)
        grad_x = torch.from_numpy(g_x).to(x.dtype) if ctx.needs_input_grad[0] else None
        return grad_x, grad_tables, None, None, None
