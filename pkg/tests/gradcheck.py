"""Finite-difference gradient checks shared by the test modules."""

from __future__ import annotations

import numpy as np

from transbts.nn import (
    BatchNorm3d,
    Conv3d,
    ConvTranspose3d,
    FeedForward,
    LayerNorm,
    Linear,
    MultiHeadAttention,
    PositionEmbedding,
    ResidualBlock,
    TransformerLayer,
    init_parameters,
)
from transbts.tensor import Tensor, mul, sum_


def directional_check(fn, inputs, rng, h=1e-6, analytic_inputs=None):
    """Relative error between ``<grad f, v>`` and its central difference along a random ``v``.

    ``fn`` maps a list of Tensors to a Tensor. The scalar probed is
    ``sum(fn(inputs) * w)`` for a fixed random ``w``. When
    ``analytic_inputs`` is given (same values in another dtype) the analytic
    gradient is taken there and the finite difference on ``inputs``.
    """
    out = fn([Tensor(x) for x in inputs])
    w = rng.standard_normal(out.shape)
    dirs = [rng.standard_normal(np.shape(x)) for x in inputs]

    def objective(arrays):
        y = fn([Tensor(a) for a in arrays])
        return float(np.sum(y.data.astype(np.float64) * w))

    plus = objective([x + h * d for x, d in zip(inputs, dirs)])
    minus = objective([x - h * d for x, d in zip(inputs, dirs)])
    numeric = (plus - minus) / (2 * h)

    src = analytic_inputs if analytic_inputs is not None else inputs
    leaves = [Tensor(x, requires_grad=True) for x in src]
    y = fn(leaves)
    loss = sum_(mul(y, Tensor(w.astype(y.dtype))))
    loss.backward()
    analytic = sum(float(np.sum(t.grad.astype(np.float64) * d)) for t, d in zip(leaves, dirs))
    return rel_err(analytic, numeric)


def rel_err(a: float, b: float, floor: float = 1e-12) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def module_check(make, x, rng, h=1e-6, seed=0, analytic_dtype=None, jitter=0.1):
    """Directional check of a module over its input and all of its parameters.

    ``make(dtype)`` builds the module. Parameters are initialized from
    ``seed`` and jittered, the float64 instance gives the finite difference
    and an ``analytic_dtype`` instance (default float64) the analytic side.
    """
    ref = init_parameters(make(np.float64), seed)
    params = [p for _, p in ref.named_parameters()]
    for p in params:
        p.data = p.data + jitter * rng.standard_normal(p.shape)
    base = [p.data.copy() for p in params]
    buffers = [b.copy() for _, b in ref.named_buffers()]
    w = rng.standard_normal(ref(Tensor(x)).shape)
    dx = rng.standard_normal(x.shape)
    dirs = [rng.standard_normal(p.shape) for p in params]

    def restore_buffers(mod):
        for (_, b), saved in zip(mod.named_buffers(), buffers):
            b[...] = saved

    def objective(step):
        for p, b0, d in zip(params, base, dirs):
            p.data = b0 + step * d
        restore_buffers(ref)
        return float(np.sum(ref(Tensor(x + step * dx)).data * w))

    numeric = (objective(h) - objective(-h)) / (2 * h)

    dtype = np.dtype(analytic_dtype or np.float64)
    mod = make(dtype)
    for p, b0 in zip([p for _, p in mod.named_parameters()], base):
        p.data = b0.astype(dtype)
        p.grad = None
    restore_buffers(mod)
    xt = Tensor(x.astype(dtype), requires_grad=True)
    out = mod(xt)
    sum_(mul(out, Tensor(w.astype(dtype)))).backward()
    analytic = float(np.sum(xt.grad.astype(np.float64) * dx))
    for p, d in zip([p for _, p in mod.named_parameters()], dirs):
        if p.grad is not None:
            analytic += float(np.sum(p.grad.astype(np.float64) * d))
    return rel_err(analytic, numeric)


def best_step_error(loss, param, direction, analytic, steps=(1e-6, 1e-7)):
    """Smallest relative error over a few central-difference steps.

    Whole-network losses are piecewise smooth: large steps cross ReLU kinks
    somewhere in the volume, small ones drown in float64 rounding when the
    directional derivative is tiny. No single step suits every parameter.
    """
    base = param.data.copy()
    errs = []
    for h in steps:
        param.data = base + h * direction
        up = float(loss().data)
        param.data = base - h * direction
        down = float(loss().data)
        errs.append(rel_err(analytic, (up - down) / (2 * h)))
    param.data = base
    return min(errs)


# (name, builder taking a dtype, input shape); every input is at most 5 voxels per axis
LAYERS = [
    ("conv3", lambda dt: Conv3d(2, 3, 3, dtype=dt), (2, 2, 4, 5, 3)),
    ("conv3_stride2", lambda dt: Conv3d(2, 2, 3, stride=2, dtype=dt), (1, 2, 5, 5, 4)),
    ("conv1", lambda dt: Conv3d(3, 2, 1, dtype=dt), (1, 3, 3, 3, 3)),
    ("deconv", lambda dt: ConvTranspose3d(3, 2, dtype=dt), (1, 3, 2, 2, 3)),
    ("batchnorm", lambda dt: BatchNorm3d(3, dtype=dt), (2, 3, 3, 4, 2)),
    ("layernorm", lambda dt: LayerNorm(6, dtype=dt), (5, 6)),
    ("linear", lambda dt: Linear(4, 3, dtype=dt), (2, 5, 4)),
    ("attention", lambda dt: MultiHeadAttention(8, 2, dtype=dt), (2, 5, 8)),
    ("feedforward", lambda dt: FeedForward(4, 6, dtype=dt), (5, 4)),
    ("transformer_layer", lambda dt: TransformerLayer(8, 4, 12, dtype=dt), (1, 5, 8)),
    ("residual_block", lambda dt: ResidualBlock(2, dtype=dt), (1, 2, 3, 4, 3)),
    ("position_embedding", lambda dt: PositionEmbedding(4, 5, dtype=dt), (2, 4, 5)),
]
