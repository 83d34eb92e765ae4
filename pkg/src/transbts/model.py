"""TransBTS: 3D CNN encoder, transformer bottleneck, 3D CNN decoder.

Stage names follow the layer table of the original design (InitConv,
EnBlock1..., DownSample1..., LinearProjection, Transformer, FeatureMapping,
DeBlock1..., UpSample1..., EndConv). ``model_forward`` accepts an optional
``hook(name, tensor)`` callable that sees every stage output, which is how
the shape conformance suite instruments a pass.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .config import ModelConfig
from .errors import ShapeError
from .nn import (
    Conv3d,
    ConvTranspose3d,
    Dropout,
    Module,
    PositionEmbedding,
    ResidualBlock,
    TransformerLayer,
    init_parameters,
)
from .tensor import Tensor, concat, permute, reshape

Hook = Callable[[str, Tensor], None]

# Kaiming gain for convs fed by linear (unrectified) features; only the convs
# inside residual blocks read ReLU outputs. Gain 2 everywhere compounds a
# sqrt(2) growth per linear layer and saturates the output softmax.
LINEAR_GAIN = 1.0

# residual blocks per encoder level; level 0 is full resolution
ENCODER_BLOCKS_FIRST = 1
ENCODER_BLOCKS_DEEP = 2
BOTTLENECK_DECODER_BLOCKS = 2


class UpSample(Module):
    """Conv3 (halve channels) -> DeConv (double extent) -> concat skip -> Conv3 (fuse)."""

    def __init__(self, channels: int, dtype=np.float32):
        half = channels // 2
        self.reduce = Conv3d(channels, half, 3, gain=LINEAR_GAIN, dtype=dtype)
        self.deconv = ConvTranspose3d(half, half, 2, 2, gain=LINEAR_GAIN, dtype=dtype)
        self.fuse = Conv3d(2 * half, half, 3, gain=LINEAR_GAIN, dtype=dtype)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        y = self.deconv(self.reduce(x))
        if y.shape != skip.shape:
            raise ShapeError(f"skip connection shape {skip.shape} does not match upsampled {y.shape}")
        return self.fuse(concat([y, skip], axis=1))


class TransBTS(Module):
    def __init__(self, config: ModelConfig, dtype=np.float32):
        self.config = config
        chans = config.encoder_channels
        c0 = chans[0]
        self.init_conv = Conv3d(config.in_channels, c0, 3, gain=LINEAR_GAIN, dtype=dtype)
        self.init_dropout = Dropout(config.dropout_p)
        self.en_blocks = [[ResidualBlock(c0, dtype=dtype) for _ in range(ENCODER_BLOCKS_FIRST)]]
        self.downsamples = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.downsamples.append(Conv3d(cin, cout, 3, stride=2, gain=LINEAR_GAIN, dtype=dtype))
            self.en_blocks.append([ResidualBlock(cout, dtype=dtype) for _ in range(ENCODER_BLOCKS_DEEP)])
        # flatten nested lists so Module discovers every block
        self.en_blocks = [_Sequence(blocks) for blocks in self.en_blocks]

        self.projection = Conv3d(config.token_features, config.d, 3, gain=LINEAR_GAIN, dtype=dtype)
        self.position = PositionEmbedding(config.d, config.num_tokens, dtype=dtype)
        self.layers = [TransformerLayer(config.d, config.heads, config.ffn_hidden, dtype=dtype) for _ in range(config.L)]
        self.feature_map = Conv3d(config.d, config.token_features, 3, gain=LINEAR_GAIN, dtype=dtype)

        self.de_blocks = [_Sequence([ResidualBlock(config.K, dtype=dtype) for _ in range(BOTTLENECK_DECODER_BLOCKS)])]
        self.upsamples = []
        for c in reversed(chans[1:]):
            self.upsamples.append(UpSample(c, dtype=dtype))
            self.de_blocks.append(_Sequence([ResidualBlock(c // 2, dtype=dtype)]))
        self.end_conv = Conv3d(c0, config.num_classes, 1, gain=LINEAR_GAIN, dtype=dtype)

    @property
    def dtype(self) -> np.dtype:
        return self.init_conv.weight.dtype

    def forward(self, x: Tensor, hook: Hook | None = None) -> Tensor:
        return model_forward(self, x, hook)


class _Sequence(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def __len__(self):
        return len(self.blocks)


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> TransBTS:
    config.validate()
    model = TransBTS(config, dtype=dtype)
    init_parameters(model, seed)
    return model


def _emit(hook, name, t):
    if hook is not None:
        hook(name, t)


def encoder_forward(model: TransBTS, x: Tensor, hook: Hook | None = None):
    """Return ``(F, skips)``; skips are the EnBlock outputs above the deepest level."""
    cfg = model.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B, {cfg.in_channels}, H, W, D) input, got {x.shape}")
    step = cfg.os * cfg.patch_unfold
    if any(n % step for n in x.shape[2:]):
        raise ShapeError(f"input extents {x.shape[2:]} are not divisible by {step}")
    h = model.init_dropout(model.init_conv(x))
    _emit(hook, "InitConv", h)
    h = model.en_blocks[0](h)
    _emit(hook, "EnBlock1", h)
    skips = []
    for i, (down, blocks) in enumerate(zip(model.downsamples, model.en_blocks[1:]), start=1):
        skips.append(h)
        h = down(h)
        _emit(hook, f"DownSample{i}", h)
        h = blocks(h)
        _emit(hook, f"EnBlock{i + 1}", h)
    return h, skips


def unfold_patches(f: Tensor, p: int) -> Tensor:
    """``(B, C, D, H, W)`` -> ``(B, C*p^3, D/p, H/p, W/p)``; each p^3 patch becomes one vector."""
    if p == 1:
        return f
    b, c, d, h, w = f.shape
    t = reshape(f, (b, c, d // p, p, h // p, p, w // p, p))
    t = permute(t, (0, 1, 3, 5, 7, 2, 4, 6))
    return reshape(t, (b, c * p**3, d // p, h // p, w // p))


def fold_patches(t: Tensor, p: int) -> Tensor:
    """Inverse of :func:`unfold_patches`."""
    if p == 1:
        return t
    b, cp, d, h, w = t.shape
    c = cp // p**3
    t = reshape(t, (b, c, p, p, p, d, h, w))
    t = permute(t, (0, 1, 5, 2, 6, 3, 7, 4))
    return reshape(t, (b, c, d * p, h * p, w * p))


def embed_tokens(model: TransBTS, f: Tensor, hook: Hook | None = None) -> Tensor:
    """Linear projection + flatten + learnable position embedding; returns ``(B, N, d)``."""
    cfg = model.config
    proj = model.projection(unfold_patches(f, cfg.patch_unfold))
    b, d = proj.shape[:2]
    tokens = reshape(proj, (b, d, -1))
    z0 = model.position(tokens)
    _emit(hook, "LinearProjection", z0)
    return permute(z0, (0, 2, 1))


def transformer_forward(model: TransBTS, z: Tensor, hook: Hook | None = None) -> Tensor:
    for layer in model.layers:
        z = layer(z)
    _emit(hook, "Transformer", permute(z, (0, 2, 1)) if hook else z)
    return z


def feature_mapping(model: TransBTS, z: Tensor, hook: Hook | None = None) -> Tensor:
    """Reshape ``(B, N, d)`` tokens to ``d x grid`` and reduce channels back to ``K``."""
    cfg = model.config
    b = z.shape[0]
    grid = reshape(permute(z, (0, 2, 1)), (b, cfg.d) + cfg.token_grid)
    out = fold_patches(model.feature_map(grid), cfg.patch_unfold)
    _emit(hook, "FeatureMapping", out)
    return out


def decoder_forward(model: TransBTS, z: Tensor, skips: list[Tensor], hook: Hook | None = None) -> Tensor:
    """Progressive upsampling with skip fusion; returns class logits (no softmax)."""
    if len(skips) != len(model.upsamples):
        raise ShapeError(f"decoder needs {len(model.upsamples)} skips, got {len(skips)}")
    h = model.de_blocks[0](z)
    _emit(hook, "DeBlock1", h)
    for i, (up, blocks, skip) in enumerate(zip(model.upsamples, model.de_blocks[1:], reversed(skips)), start=1):
        h = up(h, skip)
        _emit(hook, f"UpSample{i}", h)
        h = blocks(h)
        _emit(hook, f"DeBlock{i + 1}", h)
    logits = model.end_conv(h)
    _emit(hook, "EndConv", logits)
    return logits


def model_forward(model: TransBTS, x: Tensor, hook: Hook | None = None) -> Tensor:
    f, skips = encoder_forward(model, x, hook)
    z = transformer_forward(model, embed_tokens(model, f, hook), hook)
    return decoder_forward(model, feature_mapping(model, z, hook), skips, hook)
