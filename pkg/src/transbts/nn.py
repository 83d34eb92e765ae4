"""Parametric layers: 3D convolutions, normalizations, attention and FFN blocks."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .errors import ContractError, ShapeError
from .tensor import Tensor, add, expand, matmul, permute, relu, reshape, scale, softmax, transpose


class Parameter(Tensor):
    """A leaf tensor that a :class:`Module` owns and an optimizer updates."""

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Minimal container that discovers parameters, buffers and children from attributes.

    Buffers are plain numpy arrays registered through :meth:`register_buffer`;
    they are persisted in checkpoints but never receive gradients.
    """

    training = True

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self.__dict__.setdefault("_buffer_names", [])
        if name not in self._buffer_names:
            self._buffer_names.append(name)
        setattr(self, name, value)

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules(prefix):
            for name, value in vars(mod).items():
                if isinstance(value, Parameter):
                    yield (f"{mod_name}.{name}" if mod_name else name), value

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for mod_name, mod in self.named_modules(prefix):
            for name in getattr(mod, "_buffer_names", ()):
                yield (f"{mod_name}.{name}" if mod_name else name), getattr(mod, name)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _zeros(*shape, dtype=np.float32) -> np.ndarray:
    return np.zeros(shape, dtype=dtype)


class Conv3d(Module):
    """3D cross-correlation.

    ``gain`` is the Kaiming variance gain used by :func:`init_parameters`:
    2 for a layer reading rectified inputs, 1 for one reading linear features.
    """

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, bias=True, gain=2.0, dtype=np.float32):
        if padding is None:
            padding = kernel_size // 2
        if stride < 1 or padding < 0:
            raise ContractError(f"invalid conv geometry stride={stride} padding={padding}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding = kernel_size, stride, padding
        self.gain = gain
        k = kernel_size
        self.weight = Parameter(_zeros(out_channels, in_channels, k, k, k, dtype=dtype))
        self.bias = Parameter(_zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def fan_in(self) -> int:
        return self.in_channels * self.kernel_size**3


class ConvTranspose3d(Module):
    """Transposed convolution; with ``kernel_size == stride`` it doubles each extent."""

    def __init__(self, in_channels, out_channels, kernel_size=2, stride=2, bias=False, gain=2.0, dtype=np.float32):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride = kernel_size, stride
        self.gain = gain
        k = kernel_size
        self.weight = Parameter(_zeros(in_channels, out_channels, k, k, k, dtype=dtype))
        self.bias = Parameter(_zeros(out_channels, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose3d(x, self.weight, self.bias, self.stride)

    def fan_in(self) -> int:
        # inputs reaching one output voxel
        return self.in_channels * math.ceil(self.kernel_size / self.stride) ** 3


class BatchNorm3d(Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=np.float32):
        self.eps, self.momentum = eps, momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(_zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", _zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(_zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Element dropout; the mask stream comes from ``self.rng`` (reseed for replay)."""

    def __init__(self, p=0.0, seed=0):
        if not 0 <= p < 1:
            raise ContractError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout(x, self.p, self.training, self.rng)


class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, dtype=np.float32):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(_zeros(out_features, in_features, dtype=dtype))
        self.bias = Parameter(_zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    """Scaled dot-product self-attention over ``(N, d)`` or ``(B, N, d)`` tokens."""

    def __init__(self, dim, heads, dtype=np.float32):
        if dim % heads:
            raise ContractError(f"embedding dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Linear(dim, dim, dtype=dtype)
        self.k = Linear(dim, dim, dtype=dtype)
        self.v = Linear(dim, dim, dtype=dtype)
        self.out = Linear(dim, dim, dtype=dtype)
        self.last_attention: np.ndarray | None = None
        self.keep_attention = False

    def _split(self, t: Tensor, b: int, n: int) -> Tensor:
        return permute(reshape(t, (b, n, self.heads, self.dim // self.heads)), (0, 2, 1, 3))

    def forward(self, z: Tensor) -> Tensor:
        squeeze = z.ndim == 2
        if squeeze:
            z = reshape(z, (1,) + z.shape)
        if z.ndim != 3 or z.shape[-1] != self.dim:
            raise ShapeError(f"attention expects (B, N, {self.dim}) tokens, got {z.shape}")
        b, n, _ = z.shape
        q = self._split(self.q(z), b, n)
        k = self._split(self.k(z), b, n)
        v = self._split(self.v(z), b, n)
        scores = scale(matmul(q, transpose(k)), 1.0 / math.sqrt(self.dim // self.heads))
        attn = softmax(scores, axis=-1)
        if self.keep_attention:
            self.last_attention = attn.data
        ctx = reshape(permute(matmul(attn, v), (0, 2, 1, 3)), (b, n, self.dim))
        out = self.out(ctx)
        return reshape(out, out.shape[1:]) if squeeze else out


class FeedForward(Module):
    """Token-wise ``W2 relu(W1 z + b1) + b2``."""

    def __init__(self, dim, hidden, dtype=np.float32):
        self.fc1 = Linear(dim, hidden, dtype=dtype)
        self.fc2 = Linear(hidden, dim, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        return self.fc2(relu(self.fc1(z)))


class TransformerLayer(Module):
    """Pre-norm layer: ``z' = MHA(LN(z)) + z`` then ``FFN(LN(z')) + z'``."""

    def __init__(self, dim, heads, hidden, dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadAttention(dim, heads, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, hidden, dtype=dtype)

    def forward(self, z: Tensor) -> Tensor:
        z = add(self.attn(self.norm1(z)), z)
        return add(self.ffn(self.norm2(z)), z)


class ResidualBlock(Module):
    """``x + Conv3(ReLU(BN(Conv3(ReLU(BN(x))))))`` with constant channel count."""

    def __init__(self, channels, dtype=np.float32):
        self.bn1 = BatchNorm3d(channels, dtype=dtype)
        self.conv1 = Conv3d(channels, channels, 3, dtype=dtype)
        self.bn2 = BatchNorm3d(channels, dtype=dtype)
        self.conv2 = Conv3d(channels, channels, 3, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv1(relu(self.bn1(x)))
        y = self.conv2(relu(self.bn2(y)))
        return add(x, y)


class PositionEmbedding(Module):
    """Learnable ``(d, N)`` table added to every sample of a ``(B, d, N)`` batch."""

    def __init__(self, dim, length, dtype=np.float32):
        self.weight = Parameter(_zeros(dim, length, dtype=dtype))

    def forward(self, f: Tensor) -> Tensor:
        if f.shape[1:] != self.weight.shape:
            raise ShapeError(f"position embedding {self.weight.shape} does not match tokens {f.shape}")
        return add(f, expand(self.weight, f.shape))


def init_parameters(module: Module, seed: int) -> Module:
    """Seeded initialization, deterministic in module traversal order.

    Conv and transposed-conv weights: Kaiming normal on fan-in, variance
    ``gain / fan_in`` with the layer's own gain. Linear
    weights: Xavier uniform. Norm affines: gamma 1, beta 0. Biases: 0.
    Position embeddings: N(0, 0.02^2).
    """
    rng = np.random.default_rng(seed)
    for _, mod in module.named_modules():
        if isinstance(mod, (Conv3d, ConvTranspose3d)):
            std = math.sqrt(mod.gain / mod.fan_in())
            w = mod.weight.data
            w[...] = rng.standard_normal(w.shape) * std
            if mod.bias is not None:
                mod.bias.data[...] = 0
        elif isinstance(mod, Linear):
            bound = math.sqrt(6.0 / (mod.in_features + mod.out_features))
            w = mod.weight.data
            w[...] = rng.uniform(-bound, bound, w.shape)
            if mod.bias is not None:
                mod.bias.data[...] = 0
        elif isinstance(mod, (BatchNorm3d, LayerNorm)):
            mod.gamma.data[...] = 1
            mod.beta.data[...] = 0
            if isinstance(mod, BatchNorm3d):
                mod.running_mean[...] = 0
                mod.running_var[...] = 1
        elif isinstance(mod, PositionEmbedding):
            w = mod.weight.data
            w[...] = rng.standard_normal(w.shape) * 0.02
        elif isinstance(mod, Dropout):
            mod.rng = np.random.default_rng(rng.integers(2**63))
    return module
