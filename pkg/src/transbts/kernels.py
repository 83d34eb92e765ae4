"""Numpy kernels for 3D convolution and its adjoint.

Both directions are built from two data movers: ``_gather`` copies the
``k**3`` strided windows of a padded volume into a column matrix, and
``_scatter_add`` is its exact adjoint. The work is tiled along the leading
spatial axis so the column matrix stays bounded in memory at 128^3 inputs.

Layouts: activations ``(B, C, D, H, W)``; conv weight ``(Cout, Cin, k, k, k)``;
transposed-conv weight ``(Cin, Cout, k, k, k)``. Convolution is
cross-correlation (no kernel flip).
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

# upper bound on elements held by one tile of the column matrix
_COL_BUDGET = 1 << 20


def conv_out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def deconv_out_extent(n: int, k: int, stride: int) -> int:
    return (n - 1) * stride + k


def _tile(rows_per_slice: int, n: int) -> int:
    return max(1, min(n, _COL_BUDGET // max(1, rows_per_slice)))


def _gather(src, k, s, z0, nz, ho, wo, out=None):
    """Columns ``(C, k, k, k, nz, ho, wo)`` for output slices ``z0:z0+nz``."""
    c = src.shape[0]
    if out is None:
        out = np.empty((c, k, k, k, nz, ho, wo), dtype=src.dtype)
    for a in range(k):
        za = z0 * s + a
        for b in range(k):
            for e in range(k):
                out[:, a, b, e] = src[
                    :,
                    za : za + s * (nz - 1) + 1 : s,
                    b : b + s * (ho - 1) + 1 : s,
                    e : e + s * (wo - 1) + 1 : s,
                ]
    return out


def _scatter_add(dst, cols, k, s, z0):
    """Adjoint of :func:`_gather`: accumulate ``cols`` into ``dst`` in place."""
    nz, ho, wo = cols.shape[-3:]
    for a in range(k):
        za = z0 * s + a
        for b in range(k):
            for e in range(k):
                dst[
                    :,
                    za : za + s * (nz - 1) + 1 : s,
                    b : b + s * (ho - 1) + 1 : s,
                    e : e + s * (wo - 1) + 1 : s,
                ] += cols[:, a, b, e]


def _check_conv(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d: input has {x.shape[1]} channels, weight {w.shape} expects {w.shape[1]}")


def conv3d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    _check_conv(x, w)
    bsz, cin = x.shape[:2]
    cout, _, k = w.shape[:3]
    do, ho, wo = (conv_out_extent(n, k, stride, padding) for n in x.shape[2:])
    if min(do, ho, wo) < 1:
        raise ShapeError(f"conv3d: non-positive output extent for input {x.shape}, k={k}, pad={padding}")
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    wm = w.reshape(cout, -1)
    out = np.empty((bsz, cout, do, ho, wo), dtype=x.dtype)
    tz = _tile(cin * k**3 * ho * wo, do)
    buf = np.empty((cin, k, k, k, tz, ho, wo), dtype=x.dtype)
    for n in range(bsz):
        for z0 in range(0, do, tz):
            nz = min(tz, do - z0)
            cols = _gather(xp[n], k, stride, z0, nz, ho, wo, buf[:, :, :, :, :nz])
            out[n, :, z0 : z0 + nz] = (wm @ cols.reshape(cin * k**3, -1)).reshape(cout, nz, ho, wo)
    return out


def conv3d_backward(g, x, w, stride=1, padding=0, need_x=True, need_w=True):
    """Gradients of :func:`conv3d` w.r.t. input and weight (bias is ``g.sum``)."""
    bsz, cin = x.shape[:2]
    cout, _, k = w.shape[:3]
    do, ho, wo = g.shape[2:]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
    wm = w.reshape(cout, -1)
    # stride 1: the input gradient is a full correlation with the flipped kernel
    direct = need_x and stride == 1 and p <= k - 1
    scatter = need_x and not direct
    gx = np.zeros_like(xp) if scatter else None
    gw = np.zeros_like(wm) if need_w else None
    if need_w or scatter:
        tz = _tile(cin * k**3 * ho * wo, do)
        buf = np.empty((cin, k, k, k, tz, ho, wo), dtype=x.dtype) if need_w else None
        for n in range(bsz):
            for z0 in range(0, do, tz):
                nz = min(tz, do - z0)
                gm = g[n, :, z0 : z0 + nz].reshape(cout, -1)
                if need_w:
                    cols = _gather(xp[n], k, stride, z0, nz, ho, wo, buf[:, :, :, :, :nz])
                    gw += gm @ cols.reshape(cin * k**3, -1).T
                if scatter:
                    dcols = (wm.T @ gm).reshape(cin, k, k, k, nz, ho, wo)
                    _scatter_add(gx[n], dcols, k, stride, z0)
    if direct:
        wf = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx = conv3d(g, wf, 1, k - 1 - p)
    elif scatter and p:
        gx = np.ascontiguousarray(gx[:, :, p:-p, p:-p, p:-p])
    return gx, gw.reshape(w.shape) if need_w else None


def _check_deconv(x, w):
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeError(f"conv_transpose3d expects 5-d input and weight, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeError(
            f"conv_transpose3d: input has {x.shape[1]} channels, weight {w.shape} expects {w.shape[0]}"
        )


def conv_transpose3d(x: np.ndarray, w: np.ndarray, stride: int = 2) -> np.ndarray:
    """Adjoint of an unpadded strided :func:`conv3d` sharing the same weight."""
    _check_deconv(x, w)
    bsz, cin, d, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    out = np.zeros(
        (bsz, cout) + tuple(deconv_out_extent(n, k, stride) for n in (d, h, wd)), dtype=x.dtype
    )
    wm = w.reshape(cin, -1)
    tz = _tile(cout * k**3 * h * wd, d)
    for n in range(bsz):
        for z0 in range(0, d, tz):
            nz = min(tz, d - z0)
            cols = (wm.T @ x[n, :, z0 : z0 + nz].reshape(cin, -1)).reshape(cout, k, k, k, nz, h, wd)
            _scatter_add(out[n], cols, k, stride, z0)
    return out


def conv_transpose3d_backward(g, x, w, stride=2, need_x=True, need_w=True):
    bsz, cin, d, h, wd = x.shape
    cout, k = w.shape[1], w.shape[2]
    wm = w.reshape(cin, -1)
    gx = np.empty_like(x) if need_x else None
    gw = np.zeros_like(wm) if need_w else None
    tz = _tile(cout * k**3 * h * wd, d)
    buf = np.empty((cout, k, k, k, tz, h, wd), dtype=x.dtype)
    for n in range(bsz):
        for z0 in range(0, d, tz):
            nz = min(tz, d - z0)
            cols = _gather(g[n], k, stride, z0, nz, h, wd, buf[:, :, :, :, :nz]).reshape(cout * k**3, -1)
            if need_x:
                gx[n, :, z0 : z0 + nz] = (wm @ cols).reshape(cin, nz, h, wd)
            if need_w:
                gw += x[n, :, z0 : z0 + nz].reshape(cin, -1) @ cols.T
    return gx, gw.reshape(w.shape) if need_w else None
