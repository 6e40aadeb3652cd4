"""Neural network operators and the small layer/module system built on them."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .tensorcore import Tensor, concat, make_result, relu, sigmoid

__all__ = [
    "ConvParams", "conv_nd", "batch_norm", "max_pool", "windowed_max_aggregate",
    "attention_gate", "upsample_nearest", "upsample_concat", "concat", "relu", "sigmoid",
    "Module", "Conv", "BatchNorm", "ConvBlock", "AttentionGate",
]


def _tuplify(v, n):
    if isinstance(v, (tuple, list)):
        if len(v) != n:
            raise ValueError(f"expected {n} values, got {v}")
        return tuple(int(x) for x in v)
    return (int(v),) * n


@dataclass
class ConvParams:
    """Weights and geometry of one convolution; weight is (out, in, *kernel)."""

    weight: Tensor
    bias: Tensor | None = None
    stride: tuple = 1
    padding: tuple = 0

    @property
    def kernel(self):
        return self.weight.shape[2:]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]


def conv_nd(x: Tensor, params: ConvParams) -> Tensor:
    """Batched 2D/3D cross-correlation with zero padding.

    im2col over a channels-last padded copy, then one GEMM. Columns are
    rebuilt in the backward pass instead of being kept alive on the tape.
    """
    w, b = params.weight, params.bias
    if x.ndim not in (4, 5):
        raise ValueError(f"conv_nd expects rank 4 or 5 input, got {x.ndim}")
    nd = x.ndim - 2
    if w.ndim != nd + 2:
        raise ValueError("weight rank does not match input rank")
    n, c = x.shape[:2]
    o, wc = w.shape[:2]
    if c != wc:
        raise ValueError(f"channel mismatch: input has {c}, weight expects {wc}")
    k = w.shape[2:]
    s = _tuplify(params.stride, nd)
    p = _tuplify(params.padding, nd)
    if any(si < 1 for si in s):
        raise ValueError("stride must be positive")
    in_sp = x.shape[2:]
    if any(ki > ni + 2 * pi for ki, ni, pi in zip(k, in_sp, p)):
        raise ValueError(f"kernel {k} larger than padded input {in_sp} (padding {p})")
    out_sp = tuple((ni + 2 * pi - ki) // si + 1 for ni, pi, ki, si in zip(in_sp, p, k, s))
    m = n * int(np.prod(out_sp))
    sp_axes = tuple(range(1, 1 + nd))

    xp = np.pad(np.moveaxis(x.data, 1, -1), [(0, 0)] + [(pi, pi) for pi in p] + [(0, 0)])

    def columns():
        # (n, *out, c, *k) view -> (m, c * prod(k)) copy
        v = np.lib.stride_tricks.sliding_window_view(xp, k, axis=sp_axes)
        v = v[(slice(None),) + tuple(slice(0, si * (no - 1) + 1, si) for si, no in zip(s, out_sp))]
        return v.reshape(m, -1)

    wm = w.data.reshape(o, -1)
    out = columns() @ wm.T
    if b is not None:
        out += b.data
    y = np.ascontiguousarray(np.moveaxis(out.reshape((n,) + out_sp + (o,)), -1, 1))

    def bw(g):
        g2 = np.ascontiguousarray(np.moveaxis(g, 1, -1)).reshape(m, o)
        gw = (g2.T @ columns()).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if all(si == 1 for si in s) and all(ki - 1 - pi >= 0 for ki, pi in zip(k, p)):
                # stride 1: correlate the padded output gradient with the flipped kernel
                gp = np.pad(g2.reshape((n,) + out_sp + (o,)),
                            [(0, 0)] + [(ki - 1 - pi,) * 2 for ki, pi in zip(k, p)] + [(0, 0)])
                gv = np.lib.stride_tricks.sliding_window_view(gp, k, axis=sp_axes)
                gv = gv[(slice(None),) + tuple(slice(0, ni) for ni in in_sp)]
                wf = np.flip(w.data, axis=tuple(range(2, 2 + nd))).swapaxes(0, 1).reshape(c, -1)
                gx = gv.reshape(n * int(np.prod(in_sp)), -1) @ wf.T
                gx = np.ascontiguousarray(np.moveaxis(gx.reshape((n,) + in_sp + (c,)), -1, 1))
            else:
                gxp = np.zeros_like(xp)
                for off in np.ndindex(*k):
                    sl = (slice(None),) + tuple(slice(a, a + si * (no - 1) + 1, si)
                                                for a, si, no in zip(off, s, out_sp))
                    gxp[sl] += (g2 @ w.data[(slice(None), slice(None)) + off]).reshape(
                        (n,) + out_sp + (c,))
                crop = (slice(None),) + tuple(slice(pi, pi + ni) for pi, ni in zip(p, in_sp))
                gx = np.ascontiguousarray(np.moveaxis(gxp[crop], -1, 1))
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return make_result(y, parents, bw, f"conv{nd}d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalization over (N, *spatial).

    In training mode the running buffers are updated in place with
    ``r <- (1 - momentum) * r + momentum * batch_stat``; the running variance
    takes the unbiased batch variance, normalization uses the biased one.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ValueError("batch_norm parameter length does not match channel count")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        if x.shape[0] == 0:
            raise ValueError("batch_norm in training mode needs a non-empty batch")
        cnt = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        unbiased = var * cnt / max(cnt - 1, 1)
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu.reshape(bshape).astype(x.dtype)) * inv.reshape(bshape)
    y = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def bw(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            cnt = x.size // c
            gx = (inv.reshape(bshape) / cnt) * (
                cnt * dxhat - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape))
        else:
            gx = dxhat * inv.reshape(bshape)
        return gx, gg, gb

    return make_result(y.astype(x.dtype), (x, gamma, beta), bw, "batch_norm")


def max_pool(x: Tensor, window, stride=None) -> Tensor:
    """Max pooling without padding. Ties route gradient to the first maximum."""
    nd = x.ndim - 2
    k = _tuplify(window, nd)
    s = _tuplify(stride if stride is not None else window, nd)
    if any(si <= 0 for si in s):
        raise ValueError("max_pool stride must be positive")
    in_sp = x.shape[2:]
    if any(ki > ni for ki, ni in zip(k, in_sp)):
        raise ValueError(f"pool window {k} exceeds input extents {in_sp}")
    out_sp = tuple((ni - ki) // si + 1 for ni, ki, si in zip(in_sp, k, s))
    view = np.lib.stride_tricks.sliding_window_view(x.data, k, axis=tuple(range(2, x.ndim)))
    view = view[(slice(None), slice(None)) + tuple(slice(None, None, si) for si in s)]
    view = view[(slice(None), slice(None)) + tuple(slice(0, no) for no in out_sp)]
    flat = view.reshape(view.shape[:2 + nd] + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        # absolute input index of each selected element
        koff = np.unravel_index(arg, k)
        grids = np.meshgrid(*[np.arange(no) * si for no, si in zip(out_sp, s)], indexing="ij")
        nc = x.shape[0] * x.shape[1]
        idx = np.arange(nc).reshape(x.shape[:2] + (1,) * nd)
        for d in range(nd):
            idx = idx * in_sp[d] + (grids[d] + koff[d])
        gx = np.bincount(idx.ravel(), weights=g.ravel(), minlength=x.size)
        return (gx.reshape(x.shape).astype(x.dtype),)

    return make_result(np.ascontiguousarray(y), (x,), bw, "max_pool")


def windowed_max_aggregate(m: Tensor, center: int, widths) -> Tensor:
    """Collapse the depth axis of ``m`` (N, C, D, H, W) by windowed maxima.

    For each half-width ``w`` the maximum over slices ``[center - w, center + w]``
    is taken; the per-width results are stacked group-wise on the channel axis,
    giving (N, C * len(widths), H, W).
    """
    if m.ndim != 5:
        raise ValueError("windowed_max_aggregate expects (N, C, D, H, W)")
    depth = m.shape[2]
    widths = [int(w) for w in widths]
    if not widths:
        raise ValueError("need at least one width")
    for w in widths:
        if w < 0 or center - w < 0 or center + w >= depth:
            raise ValueError(f"window [{center - w}, {center + w}] outside depth {depth}")
    outs, args = [], []
    for w in widths:
        seg = m.data[:, :, center - w:center + w + 1]
        a = seg.argmax(axis=2)
        args.append(a + (center - w))
        outs.append(np.take_along_axis(seg, a[:, :, None], axis=2)[:, :, 0])
    y = np.concatenate(outs, axis=1)
    c = m.shape[1]

    def bw(g):
        gm = np.zeros_like(m.data)
        for i, a in enumerate(args):
            gi = g[:, i * c:(i + 1) * c]
            tmp = np.zeros_like(m.data)
            np.put_along_axis(tmp, a[:, :, None], gi[:, :, None], axis=2)
            gm += tmp
        return (gm,)

    return make_result(y, (m,), bw, "windowed_max")


def attention_gate(m: Tensor, params: ConvParams) -> Tensor:
    """Spatial sigmoid gate: ``m * sigmoid(conv1x1(m))`` broadcast over channels."""
    if m.ndim != 5:
        raise ValueError("attention_gate expects a 5-rank feature map")
    if params.out_channels != 1:
        raise ValueError("attention gate conv must produce one channel")
    return m * sigmoid(conv_nd(m, params))


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    nd = x.ndim - 2
    y = x.data
    for ax in range(2, x.ndim):
        y = np.repeat(y, factor, axis=ax)

    def bw(g):
        shp = list(x.shape[:2])
        for n in x.shape[2:]:
            shp += [n, factor]
        return (g.reshape(shp).sum(axis=tuple(3 + 2 * i for i in range(nd))),)

    return make_result(y, (x,), bw, "upsample")


def upsample_concat(decoder: Tensor, skip: Tensor, factor: int = 2) -> Tensor:
    """2x nearest upsampling of ``decoder`` followed by channel concat with ``skip``."""
    up = upsample_nearest(decoder, factor) if factor != 1 else decoder
    if up.shape[2:] != skip.shape[2:]:
        raise ValueError(f"spatial mismatch after upsampling: {up.shape[2:]} vs {skip.shape[2:]}")
    return concat([up, skip], axis=1)


# ----------------------------------------------------------------- modules

class Module:
    """Parameter container. Parameters are discovered from attributes in
    assignment order, so naming and ordering are deterministic."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def children(self):
        for name, v in vars(self).items():
            if isinstance(v, Module):
                yield name, v
            elif isinstance(v, (list, tuple)) and v and all(isinstance(i, Module) for i in v):
                for i, mod in enumerate(v):
                    yield f"{name}.{i}", mod

    def named_parameters(self, prefix=""):
        for name, v in vars(self).items():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + name, v
        for name, mod in self.children():
            yield from mod.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in getattr(self, "_buffers", ()):
            yield prefix + name, getattr(self, name)
        for name, mod in self.children():
            yield from mod.named_buffers(f"{prefix}{name}.")

    def train(self, mode=True):
        self.training = mode
        for _, mod in self.children():
            mod.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        sd = OrderedDict((n, p.data) for n, p in self.named_parameters())
        sd.update((n, b) for n, b in self.named_buffers())
        return sd

    def load_state_dict(self, sd):
        own = self.state_dict()
        missing = set(own) - set(sd)
        if missing:
            raise KeyError(f"state dict lacks {sorted(missing)}")
        for name, p in self.named_parameters():
            if sd[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            p.data = np.array(sd[name], dtype=p.dtype)
        for name, b in self.named_buffers():
            b[...] = sd[name]
        return self

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for mod in self._all_modules():
            for name in getattr(mod, "_buffers", ()):
                setattr(mod, name, getattr(mod, name).astype(dtype))
        return self

    def _all_modules(self):
        yield self
        for _, mod in self.children():
            yield from mod._all_modules()


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv(Module):
    """Stride-1 "same" convolution (odd kernels) with bias."""

    def __init__(self, in_ch, out_ch, kernel, rng, nd=3, dtype=np.float32, bias=True, stride=1):
        k = _tuplify(kernel, nd)
        fan_in = in_ch * int(np.prod(k))
        self.weight = Tensor(_he_normal(rng, (out_ch, in_ch) + k, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype), requires_grad=True) if bias else None
        self.stride = stride
        self.padding = tuple(ki // 2 for ki in k)

    @property
    def params(self):
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x):
        return conv_nd(x, self.params)


class BatchNorm(Module):
    _buffers = ("running_mean", "running_var")

    def __init__(self, ch, dtype=np.float32, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(ch, dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype), requires_grad=True)
        self.running_mean = np.zeros(ch, dtype)
        self.running_var = np.ones(ch, dtype)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x):
        return batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                          self.training, self.momentum, self.eps)


class ConvBlock(Module):
    """conv -> batch norm -> ReLU."""

    def __init__(self, in_ch, out_ch, rng, nd=3, kernel=3, dtype=np.float32):
        self.conv = Conv(in_ch, out_ch, kernel, rng, nd=nd, dtype=dtype, bias=False)
        self.bn = BatchNorm(out_ch, dtype)

    def forward(self, x):
        return relu(self.bn(self.conv(x)))


class AttentionGate(Module):
    def __init__(self, ch, rng, dtype=np.float32):
        self.conv = Conv(ch, 1, 1, rng, nd=3, dtype=dtype)

    def forward(self, m):
        return attention_gate(m, self.conv.params)
