"""Model-based feature projection: a trainable generalization of slab MIP.

A slab (N, 1, d, n, n) goes through two 3x3x3 conv/BN/ReLU blocks, a 1x1x1
bottleneck, an optional spatial attention gate, and is then collapsed along
depth by maxima over centered windows of several half-widths. The result is
a 2D feature map (N, B * len(widths), n, n).
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .nnops import AttentionGate, Conv, ConvBlock, Module, windowed_max_aggregate
from .tensorcore import Tensor

DEFAULT_WIDTHS = (3, 6, 10)


@dataclass
class MbfpConfig:
    in_channels: int = 1
    conv_channels: int = 8
    bottleneck: int = 8
    widths: tuple = DEFAULT_WIDTHS
    attention: bool = False
    depth: int = 21

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths:
            raise ValueError("widths must not be empty")
        if self.bottleneck < 1 or self.conv_channels < 1:
            raise ValueError("channel counts must be positive")
        limit = (self.depth - 1) // 2
        bad = [w for w in self.widths if w < 0 or w > limit]
        if bad:
            raise ValueError(f"half-widths {bad} exceed (depth - 1) // 2 = {limit}")

    @property
    def center(self) -> int:
        return self.depth // 2

    @property
    def out_channels(self) -> int:
        return self.bottleneck * len(self.widths)


class ProjectionHead(Module):
    """Bottleneck, optional attention gate and windowed max aggregation.

    Used on its own as the P_i projections of the parallel 3D encoder, where
    the 3D features come from the encoder stage.
    """

    def __init__(self, in_ch, bottleneck, widths, attention, rng, dtype=np.float32):
        self.bottleneck = Conv(in_ch, bottleneck, 1, rng, nd=3, dtype=dtype)
        self.attention = AttentionGate(bottleneck, rng, dtype) if attention else None
        self.widths = tuple(widths)

    def features(self, x: Tensor) -> Tensor:
        m = self.bottleneck(x)
        if self.attention is not None:
            m = self.attention(m)
        return m

    def forward(self, x: Tensor) -> Tensor:
        m = self.features(x)
        return windowed_max_aggregate(m, m.shape[2] // 2, self.widths)


class MbfpBlock(Module):
    def __init__(self, cfg: MbfpConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.block1 = ConvBlock(cfg.in_channels, cfg.conv_channels, rng, nd=3, dtype=dtype)
        self.block2 = ConvBlock(cfg.conv_channels, cfg.conv_channels, rng, nd=3, dtype=dtype)
        self.head = ProjectionHead(cfg.conv_channels, cfg.bottleneck, cfg.widths,
                                   cfg.attention, rng, dtype)

    def forward(self, slab: Tensor) -> Tensor:
        return mbfp_forward(slab, self)


def mbfp_forward(slab: Tensor, block: MbfpBlock) -> Tensor:
    cfg = block.cfg
    if slab.ndim != 5 or slab.shape[1] != cfg.in_channels:
        raise ValueError(f"expected slab (N, {cfg.in_channels}, d, n, n), got {slab.shape}")
    if slab.shape[2] != cfg.depth:
        raise ValueError(f"slab depth {slab.shape[2]} != configured depth {cfg.depth}")
    m = block.head.features(block.block2(block.block1(slab)))
    return windowed_max_aggregate(m, cfg.center, cfg.widths)


def dump_features(features, path_prefix, meta: dict | None = None) -> tuple:
    """Write a feature map as ``<prefix>.bin`` (little-endian float32, C order)
    plus ``<prefix>.json`` describing shape and channel grouping."""
    arr = np.ascontiguousarray(features.data if isinstance(features, Tensor) else features,
                               dtype="<f4")
    bin_path = f"{path_prefix}.bin"
    json_path = f"{path_prefix}.json"
    arr.tofile(bin_path)
    header = {"dtype": "float32", "byte_order": "little", "order": "C",
              "shape": list(arr.shape), "data_file": bin_path.rsplit("/", 1)[-1]}
    header.update(meta or {})
    with open(json_path, "w") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    return bin_path, json_path


def load_features(path_prefix) -> np.ndarray:
    with open(f"{path_prefix}.json") as fh:
        header = json.load(fh)
    return np.fromfile(f"{path_prefix}.bin", dtype="<f4").reshape(header["shape"])
