"""Closed-form parameter and FLOP accounting derived from a :class:`ModelConfig`.

The inventory here is written independently of :mod:`transbts.model`; the
test suite cross-checks ``count_params`` against the parameters of a built
network.

FLOP convention: everything is first counted in multiply-accumulates (MACs).
Convolutions cost ``Cin*Cout*k^3`` MACs per output voxel, transposed
convolutions ``Cin*Cout*k^3`` per *input* voxel, linear maps ``in*out`` per
token, and attention ``N^2 * d`` MACs for the score matrix plus the same
again for value aggregation. ``count_flops`` multiplies by ``flops_per_mac``
(2 by default; pass 1 to count MACs as FLOPs).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .config import ModelConfig


@dataclass(frozen=True)
class Stage:
    name: str
    params: int
    macs: int
    out_shape: tuple[int, ...]


def conv_params(cin: int, cout: int, k: int, bias: bool = True) -> int:
    return cin * cout * k**3 + (cout if bias else 0)


def _residual_block(c: int, voxels: int) -> tuple[int, int]:
    params = 2 * (2 * c) + 2 * conv_params(c, c, 3)
    macs = 2 * c * c * 27 * voxels
    return params, macs


def transformer_layer_params(d: int, h: int) -> int:
    norms = 2 * 2 * d
    attention = 4 * (d * d + d)
    ffn = d * h + h + h * d + d
    return norms + attention + ffn


def transformer_layer_macs(d: int, h: int, n: int) -> int:
    projections = 4 * n * d * d
    attention = 2 * n * n * d
    ffn = 2 * n * d * h
    return projections + attention + ffn


def stage_inventory(config: ModelConfig, input_extent=None) -> list[Stage]:
    """Per-stage parameter counts, MACs and output shapes (batch axis omitted)."""
    cfg = config
    extent = tuple(input_extent or cfg.input_extent)
    chans = [cfg.base_channels * 2**i for i in range(int(round(math.log2(cfg.os))) + 1)]
    vox = [math.prod(n // 2**i for n in extent) for i in range(len(chans))]
    dims = [tuple(n // 2**i for n in extent) for i in range(len(chans))]
    stages: list[Stage] = []

    c0 = chans[0]
    stages.append(Stage("InitConv", conv_params(cfg.in_channels, c0, 3), cfg.in_channels * c0 * 27 * vox[0], (c0,) + dims[0]))
    p, m = _residual_block(c0, vox[0])
    stages.append(Stage("EnBlock1", p * 1, m * 1, (c0,) + dims[0]))
    for i in range(1, len(chans)):
        cin, cout = chans[i - 1], chans[i]
        stages.append(Stage(f"DownSample{i}", conv_params(cin, cout, 3), cin * cout * 27 * vox[i], (cout,) + dims[i]))
        p, m = _residual_block(cout, vox[i])
        stages.append(Stage(f"EnBlock{i + 1}", 2 * p, 2 * m, (cout,) + dims[i]))

    u = cfg.patch_unfold
    tokens = math.prod(n // u for n in dims[-1])
    tok_feat = cfg.K * u**3
    d, n = cfg.d, tokens
    stages.append(
        Stage("LinearProjection", conv_params(tok_feat, d, 3) + d * n, tok_feat * d * 27 * n, (d, n))
    )
    stages.append(
        Stage(
            "Transformer",
            cfg.L * transformer_layer_params(d, cfg.ffn_hidden),
            cfg.L * transformer_layer_macs(d, cfg.ffn_hidden, n),
            (d, n),
        )
    )
    stages.append(Stage("FeatureMapping", conv_params(d, tok_feat, 3), d * tok_feat * 27 * n, (cfg.K,) + dims[-1]))

    p, m = _residual_block(cfg.K, vox[-1])
    stages.append(Stage("DeBlock1", 2 * p, 2 * m, (cfg.K,) + dims[-1]))
    for j, i in enumerate(range(len(chans) - 1, 0, -1), start=1):
        c, half = chans[i], chans[i] // 2
        params = conv_params(c, half, 3) + conv_params(half, half, 2, bias=False) + conv_params(2 * half, half, 3)
        macs = c * half * 27 * vox[i] + half * half * 8 * vox[i] + 2 * half * half * 27 * vox[i - 1]
        stages.append(Stage(f"UpSample{j}", params, macs, (half,) + dims[i - 1]))
        p, m = _residual_block(half, vox[i - 1])
        stages.append(Stage(f"DeBlock{j + 1}", p, m, (half,) + dims[i - 1]))
    stages.append(
        Stage("EndConv", conv_params(c0, cfg.num_classes, 1), c0 * cfg.num_classes * vox[0], (cfg.num_classes,) + dims[0])
    )
    return stages


def count_params(config: ModelConfig) -> int:
    """Trainable parameters: weights, biases, norm affines and the position table."""
    return sum(s.params for s in stage_inventory(config))


def count_macs(config: ModelConfig, input_extent=None) -> int:
    return sum(s.macs for s in stage_inventory(config, input_extent))


def count_flops(config: ModelConfig, input_extent=None, flops_per_mac: int = 2) -> int:
    return flops_per_mac * count_macs(config, input_extent)
