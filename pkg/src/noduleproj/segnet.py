"""U-Net-like 2D segmentation networks fed by 3D feature projection.

Encoder levels E_1..E_L run at downsampling factors 1, 1, 2, 4, 8, ... so
that the optional parallel 3D encoder (stages T_1..T_4, 1x2x2 pooling after
the first three) lines up with E_1, E_3, E_4 and E_5.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .mbfp import MbfpBlock, MbfpConfig, ProjectionHead
from .nnops import (BatchNorm, Conv, ConvBlock, Module, concat, max_pool, relu, sigmoid,
                    upsample_concat)
from .tensorcore import Tensor, no_grad

FRONT_ENDS = ("mbfp", "naive_21ch", "static_mip_4ch")
ENCODERS = ("residual_2d", "plain_unet")


@dataclass
class Encoder3dSpec:
    stages: int = 4
    t_base: int = 32
    p_base: int = 4
    pool_stride: tuple = (1, 2, 2)
    concat_levels: tuple = (1, 3, 4, 5)
    scale_widths: bool = True

    def t_channels(self, i: int) -> int:
        return self.t_base * i

    def p_channels(self, i: int) -> int:
        return self.p_base * i


@dataclass
class NetworkSpec:
    front_end: str = "mbfp"
    attention: bool = False
    parallel_3d_encoder: bool = False
    encoder: str = "residual_2d"
    levels: int = 5
    base_channels: int = 8
    decoder_attention: bool = True
    depth: int = 21
    widths: tuple = (3, 6, 10)
    mbfp_channels: int = 8
    bottleneck: int = 8
    static_mip_mm: tuple = (5.0, 10.0, 15.0)
    spacing_mm: float = 0.8
    # initial foreground probability of the output head (bias prior)
    output_prior: float = 0.01
    encoder3d: Encoder3dSpec = field(default_factory=Encoder3dSpec)

    def __post_init__(self):
        if isinstance(self.encoder3d, dict):
            self.encoder3d = Encoder3dSpec(**self.encoder3d)
        self.widths = tuple(self.widths)
        self.static_mip_mm = tuple(self.static_mip_mm)
        self.encoder3d.pool_stride = tuple(self.encoder3d.pool_stride)
        self.encoder3d.concat_levels = tuple(self.encoder3d.concat_levels)

    def validate(self):
        if self.front_end not in FRONT_ENDS:
            raise ValueError(f"front_end must be one of {FRONT_ENDS}")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")
        if self.parallel_3d_encoder and self.front_end != "mbfp":
            raise ValueError("the parallel 3D encoder requires the mbfp front end")
        if self.levels < 2:
            raise ValueError("need at least two encoder levels")
        if not 0.0 < self.output_prior < 1.0:
            raise ValueError("output_prior must lie in (0, 1)")
        if self.parallel_3d_encoder:
            e3 = self.encoder3d
            if len(e3.concat_levels) != e3.stages:
                raise ValueError("one concat level per 3D encoder stage is required")
            factors = level_factors(self.levels)
            for i, lvl in enumerate(e3.concat_levels, start=1):
                if not 1 <= lvl <= self.levels:
                    raise ValueError(f"concat level E_{lvl} does not exist (levels={self.levels})")
                if factors[lvl - 1] != 2 ** (i - 1):
                    raise ValueError(f"P_{i} resolution does not match E_{lvl}")
        MbfpConfig(1, self.mbfp_channels, self.bottleneck, self.widths, self.attention, self.depth)
        return self

    @property
    def input_channels(self) -> int:
        return {"mbfp": 1, "naive_21ch": self.depth,
                "static_mip_4ch": 1 + len(self.static_mip_mm)}[self.front_end]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls(**json.loads(text))


VARIANTS = {
    "MaxMIP": dict(front_end="mbfp", attention=False, parallel_3d_encoder=False),
    "AttentionMIP": dict(front_end="mbfp", attention=True, parallel_3d_encoder=False),
    "MaxMIP Enc.": dict(front_end="mbfp", attention=False, parallel_3d_encoder=True),
    "AttentionMIP Enc.": dict(front_end="mbfp", attention=True, parallel_3d_encoder=True),
    "Naive": dict(front_end="naive_21ch"),
    "MIP": dict(front_end="static_mip_4ch"),
    "U-net MaxMIP": dict(front_end="mbfp", encoder="plain_unet", decoder_attention=False),
}


def variant_spec(name: str, small: bool = False, **overrides) -> NetworkSpec:
    """Spec for one of the named experiment variants.

    ``small`` shrinks channel counts for desk-scale training; the 3D encoder
    keeps the 32*i / 4*i channel laws scaled by a common factor.
    """
    kw = dict(VARIANTS[name])
    if small:
        kw.update(base_channels=4, mbfp_channels=4, bottleneck=4,
                  encoder3d=Encoder3dSpec(t_base=4, p_base=2))
    kw.update(overrides)
    return NetworkSpec(**kw).validate()


def level_factors(levels: int) -> list:
    return [1] + [2 ** (i - 1) for i in range(1, levels)]


def scaled_widths(widths, stage: int, scale: bool = True) -> tuple:
    if not scale:
        return tuple(widths)
    return tuple(max(1, int(math.floor(w / 2 ** (stage - 1) + 0.5))) for w in widths)


def static_mip_windows(thicknesses_mm, spacing_mm) -> list:
    """Odd slice counts covering each thickness: ceil(t / spacing), rounded up to odd."""
    out = []
    for t in thicknesses_mm:
        n = int(math.ceil(t / spacing_mm - 1e-9))
        out.append(n if n % 2 else n + 1)
    return out


def make_static_mip_input(slab, thicknesses_mm=(5.0, 10.0, 15.0), spacing_mm=0.8) -> np.ndarray:
    """Central slice plus classical MIPs over centered windows.

    ``slab`` is (d, n, n), (N, d, n, n) or (N, 1, d, n, n); the result is
    (1 + len(thicknesses)) channels in the matching 2D layout.
    """
    arr = np.asarray(slab)
    squeeze = arr.ndim == 3
    if arr.ndim == 5:
        arr = arr[:, 0]
    elif squeeze:
        arr = arr[None]
    d = arr.shape[1]
    c = d // 2
    chans = [arr[:, c]]
    for win in static_mip_windows(thicknesses_mm, spacing_mm):
        h = win // 2
        if c - h < 0 or c + h >= d:
            raise ValueError(f"MIP window of {win} slices exceeds slab depth {d}")
        chans.append(arr[:, c - h:c + h + 1].max(axis=1))
    out = np.stack(chans, axis=1)
    return out[0] if squeeze else out


# ------------------------------------------------------------------ blocks

class ResBlock2d(Module):
    def __init__(self, in_ch, out_ch, rng, dtype):
        self.conv1 = Conv(in_ch, out_ch, 3, rng, nd=2, dtype=dtype, bias=False)
        self.bn1 = BatchNorm(out_ch, dtype)
        self.conv2 = Conv(out_ch, out_ch, 3, rng, nd=2, dtype=dtype, bias=False)
        self.bn2 = BatchNorm(out_ch, dtype)
        self.shortcut = Conv(in_ch, out_ch, 1, rng, nd=2, dtype=dtype, bias=False) if in_ch != out_ch else None

    def forward(self, x):
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        s = self.shortcut(x) if self.shortcut is not None else x
        return relu(h + s)


class DoubleConv2d(Module):
    def __init__(self, in_ch, out_ch, rng, dtype):
        self.a = ConvBlock(in_ch, out_ch, rng, nd=2, dtype=dtype)
        self.b = ConvBlock(out_ch, out_ch, rng, nd=2, dtype=dtype)

    def forward(self, x):
        return self.b(self.a(x))


class DualGate2d(Module):
    """Channel gate (from the spatial mean) plus spatial gate on a skip tensor."""

    def __init__(self, ch, rng, dtype):
        self.channel = Conv(ch, ch, 1, rng, nd=2, dtype=dtype)
        self.spatial = Conv(ch, 1, 1, rng, nd=2, dtype=dtype)

    def forward(self, x):
        pooled = x.mean(axis=(2, 3), keepdims=True)
        return x * sigmoid(self.channel(pooled)) + x * sigmoid(self.spatial(x))


class Encoder3d(Module):
    def __init__(self, spec: NetworkSpec, rng, dtype):
        e3 = spec.encoder3d
        self.e3 = e3
        self.stages = []
        self.heads = []
        in_ch = 1
        for i in range(1, e3.stages + 1):
            ch = e3.t_channels(i)
            self.stages.append(_Stage3d(in_ch, ch, rng, dtype))
            widths = scaled_widths(spec.widths, i, e3.scale_widths)
            self.heads.append(ProjectionHead(ch, e3.p_channels(i), widths, spec.attention, rng, dtype))
            in_ch = ch

    def forward(self, slab):
        outs = []
        x = slab
        for i, (stage, head) in enumerate(zip(self.stages, self.heads)):
            if i > 0:
                x = max_pool(x, self.e3.pool_stride, self.e3.pool_stride)
            x = stage(x)
            outs.append(head(x))
        return outs


class _Stage3d(Module):
    def __init__(self, in_ch, ch, rng, dtype):
        self.a = ConvBlock(in_ch, ch, rng, nd=3, dtype=dtype)
        self.b = ConvBlock(ch, ch, rng, nd=3, dtype=dtype)

    def forward(self, x):
        return self.b(self.a(x))


class SegNet(Module):
    def __init__(self, spec: NetworkSpec, rng, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        self.front = None
        if spec.front_end == "mbfp":
            cfg = MbfpConfig(1, spec.mbfp_channels, spec.bottleneck, spec.widths,
                             spec.attention, spec.depth)
            self.front = MbfpBlock(cfg, rng, dtype)
            in_ch = cfg.out_channels
        else:
            in_ch = spec.input_channels
        self.encoder3d = Encoder3d(spec, rng, dtype) if spec.parallel_3d_encoder else None
        extra = {}
        if self.encoder3d is not None:
            e3 = spec.encoder3d
            for i, lvl in enumerate(e3.concat_levels, start=1):
                extra[lvl] = e3.p_channels(i) * len(spec.widths)
        self.factors = level_factors(spec.levels)
        self.channels = [spec.base_channels * f for f in self.factors]
        block = ResBlock2d if spec.encoder == "residual_2d" else DoubleConv2d
        self.enc = []
        self.level_inputs = []
        for lvl, ch in enumerate(self.channels, start=1):
            cin = in_ch + extra.get(lvl, 0)
            self.level_inputs.append(cin)
            self.enc.append(block(cin, ch, rng, dtype))
            in_ch = ch
        self.gates = []
        self.dec = []
        for lvl in range(spec.levels - 2, -1, -1):
            skip_ch = self.channels[lvl]
            if spec.decoder_attention:
                self.gates.append(DualGate2d(skip_ch, rng, dtype))
            self.dec.append(DoubleConv2d(in_ch + skip_ch, skip_ch, rng, dtype))
            in_ch = skip_ch
        self.head = Conv(in_ch, 1, 1, rng, nd=2, dtype=dtype)
        # nodules are a small fraction of pixels; starting at p = 0.5 everywhere
        # makes some seeds spend the whole budget unlearning the background
        self.head.bias.data[:] = math.log(spec.output_prior / (1.0 - spec.output_prior))

    @property
    def granularity(self) -> int:
        """In-plane extents must be multiples of this."""
        return self.factors[-1]

    def prepare(self, slabs) -> np.ndarray:
        """Turn raw slabs (N, 1, d, h, w) into this network's input layout."""
        slabs = np.asarray(slabs, dtype=self.dtype)
        if slabs.ndim == 4:
            slabs = slabs[:, None]
        fe = self.spec.front_end
        if fe == "mbfp":
            return slabs
        if fe == "naive_21ch":
            return np.ascontiguousarray(slabs[:, 0])
        return make_static_mip_input(slabs, self.spec.static_mip_mm, self.spec.spacing_mm).astype(self.dtype)

    def front_features(self, x: Tensor) -> Tensor:
        return self.front(x) if self.front is not None else x

    def forward(self, x: Tensor) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        expected_rank = 5 if self.spec.front_end == "mbfp" else 4
        if x.ndim != expected_rank or x.shape[1] != self.spec.input_channels:
            raise ValueError(f"input shape {x.shape} does not match front end {self.spec.front_end}")
        if any(n % self.granularity for n in x.shape[-2:]):
            raise ValueError(f"in-plane extents {x.shape[-2:]} must be multiples of {self.granularity}")
        h = self.front_features(x)
        side = {}
        if self.encoder3d is not None:
            for lvl, p in zip(self.spec.encoder3d.concat_levels, self.encoder3d(x)):
                side[lvl] = p
        skips = []
        for lvl, block in enumerate(self.enc, start=1):
            if lvl > 1 and self.factors[lvl - 1] != self.factors[lvl - 2]:
                h = max_pool(h, 2, 2)
            if lvl in side:
                h = concat([h, side[lvl]], axis=1)
            h = block(h)
            skips.append(h)
        h = skips[-1]
        for k, lvl in enumerate(range(self.spec.levels - 2, -1, -1)):
            skip = skips[lvl]
            if self.spec.decoder_attention:
                skip = self.gates[k](skip)
            ratio = self.factors[lvl + 1] // self.factors[lvl]
            h = self.dec[k](upsample_concat(h, skip, ratio))
        return sigmoid(self.head(h))


def build_network(spec: NetworkSpec, seed: int = 0, dtype=np.float32) -> SegNet:
    return SegNet(spec, np.random.default_rng(seed), dtype)


def forward_slab(model: SegNet, x) -> np.ndarray:
    """Eval-mode probability maps (N, 1, h, w) for front-end inputs ``x``.

    In-plane extents are zero-padded (air) up to the network granularity and
    the prediction is cropped back.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    h, w = x.shape[-2:]
    g = model.granularity
    ph, pw = (-h) % g, (-w) % g
    if ph or pw:
        x = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)])
    was_training = model.training
    if was_training:
        model.eval()
    try:
        with no_grad():
            out = model(Tensor(x)).data
    finally:
        if was_training:
            model.train()
    return out[..., :h, :w]


def spec_replace(spec: NetworkSpec, **kw) -> NetworkSpec:
    return replace(spec, **kw).validate()
