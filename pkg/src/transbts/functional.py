"""Differentiable neural-network primitives on :class:`~transbts.tensor.Tensor`."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError
from .tensor import Tensor, _result


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    out = kernels.conv3d(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"conv3d bias shape {bias.shape} != ({weight.shape[0]},)")
        out += bias.data.reshape(1, -1, 1, 1, 1)
    xd, wd = x.data, weight.data

    def backward(g):
        gx, gw = kernels.conv3d_backward(
            g, xd, wd, stride, padding, need_x=x.requires_grad, need_w=weight.requires_grad
        )
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv3d")


def conv_transpose3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2) -> Tensor:
    out = kernels.conv_transpose3d(x.data, weight.data, stride)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1, 1)
    xd, wd = x.data, weight.data

    def backward(g):
        gx, gw = kernels.conv_transpose3d_backward(
            g, xd, wd, stride, need_x=x.requires_grad, need_w=weight.requires_grad
        )
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv_transpose3d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` applied over the last axis of ``x``."""
    dout, din = weight.shape
    if x.shape[-1] != din:
        raise ShapeError(f"linear: input {x.shape} does not end in {din} (weight {weight.shape})")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, dout)
        gx = g @ wd if x.requires_grad else None
        gw = g2.T @ xd.reshape(-1, din) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (B, D, H, W) of a ``(B, C, D, H, W)`` input.

    Training mode uses batch statistics and updates the running buffers in
    place (unbiased variance for the running estimate). Eval mode is the
    affine map given by the running statistics.
    """
    c = x.shape[1]
    if gamma.shape != (c,):
        raise ShapeError(f"batch_norm: {c} channels but gamma has shape {gamma.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    xd = x.data
    if training:
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        count = xd.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (count / max(count - 1, 1))
    else:
        mu, var = running_mean.astype(xd.dtype), running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    gd = gamma.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            scale = (gd * inv).reshape(bshape)
            if training:
                n = xd.size // c
                gx = scale * (g - gb.reshape(bshape) / n - xhat * gg.reshape(bshape) / n)
            else:
                gx = g * scale
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward, "batch_norm")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each vector along the last axis, then apply ``gamma``/``beta``."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} but affine shapes {gamma.shape}, {beta.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat * gamma.data + beta.data
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gg = (g * xhat).sum(axis=lead)
        gb = g.sum(axis=lead)
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return _result(out.astype(xd.dtype), (x, gamma, beta), backward, "layer_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: zero with probability ``p`` and rescale survivors."""
    if not 0 <= p < 1:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
