"""
Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array. Every differentiable operation
records a :class:`TapeNode` holding its parents and a closure that maps
the output gradient to parent gradients. :func:`backward` walks the tape
in reverse topological order.

Layout is row-major, channels-first (N, C, D, H, W).
"""
from __future__ import annotations

import contextlib
import struct
import threading
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

_STATE = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up where a finite value is required."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference). Thread-local."""
    prev = grad_enabled()
    _STATE.enabled = False
    try:
        yield
    finally:
        _STATE.enabled = prev


def grad_enabled() -> bool:
    return getattr(_STATE, "enabled", True)


class TapeNode:
    __slots__ = ("op", "parents", "backward_fn")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    # make numpy defer to our reflected operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    # -- basic properties
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def backward(self):
        return backward(self)

    # -- arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def clip(self, lo, hi):
        return clip(self, lo, hi)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``data`` as an op output, recording a tape node when needed.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = TapeNode(op, tuple(parents), backward_fn)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _pair(a, b):
    a = as_tensor(a, b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, a.dtype)
    return a, b


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g):
        ga = g / b.data
        return unbroadcast(ga, a.shape), unbroadcast(-ga * a.data / b.data, b.shape)

    return make_result(a.data / b.data, (a, b), bw, "div")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    # tanh form never overflows
    s = (0.5 * (1.0 + np.tanh(0.5 * x.data))).astype(x.dtype)
    return make_result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return make_result(e, (x,), lambda g: (g * e,), "exp")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return make_result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


# ------------------------------------------------------------------ reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) * (1.0 / count)


# --------------------------------------------------------------------- shaping

def reshape(x: Tensor, shape) -> Tensor:
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw, "concat")


# -------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list:
    order = []
    state = {}  # id -> 1 visiting, 2 done
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        key = id(t)
        if expanded:
            state[key] = 2
            order.append(t)
            continue
        s = state.get(key)
        if s == 2:
            continue
        if s == 1:
            raise AssertionError("cycle detected in autodiff tape")
        state[key] = 1
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                ps = state.get(id(p))
                if ps == 1:
                    raise AssertionError("cycle detected in autodiff tape")
                if ps is None and p.requires_grad:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Returns a dict mapping each leaf to its gradient array. Leaves passed in
    ``leaves`` that the loss does not depend on receive a zero gradient.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.is_finite():
        raise NonFiniteError("loss is not finite")
    grads = {id(loss): np.ones_like(loss.data)}
    result = {}
    if loss.requires_grad:
        for t in reversed(_topo_order(loss)):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                t.grad = g if t.grad is None else t.grad + g
                result[t] = t.grad
                continue
            pgrads = t.node.backward_fn(g)
            for p, pg in zip(t.node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                grads[k] = pg if k not in grads else grads[k] + pg
    if leaves is not None:
        for leaf in leaves:
            if leaf not in result:
                if leaf.grad is None:
                    leaf.grad = np.zeros_like(leaf.data)
                result[leaf] = leaf.grad
    for leaf, g in result.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {leaf.name or leaf!r}")
    return result


# ---------------------------------------------------------------- grad check

class GradCheckResult:
    def __init__(self, max_rel_error: float, resamples: int, seed: int):
        self.max_rel_error = max_rel_error
        self.resamples = resamples
        self.seed = seed

    def __repr__(self):
        return (f"GradCheckResult(max_rel_error={self.max_rel_error:.3e}, "
                f"resamples={self.resamples})")


def _rel_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def grad_check(op: Callable[..., Tensor], input_shapes: Sequence[tuple], seed: int = 0, *,
               eps: float = 1e-4, sampler: Callable | None = None, kink_check: bool = False,
               kink_tol: float = 1e-3, max_resamples: int = 20,
               reference_dtype=np.longdouble) -> GradCheckResult:
    """Compare analytic gradients of ``op`` with numeric central differences.

    The scalar probe is ``sum(op(*inputs) * R)`` for a fixed random ``R``.
    Numeric derivatives use Richardson-extrapolated central differences at
    steps ``eps`` and ``eps / 2`` (truncation O(eps**4)), which keeps roundoff
    well below the 1e-6 relative budget. The analytic pass runs in float64;
    the numeric reference runs in ``reference_dtype`` (extended precision
    where the platform has it) so that gradient entries many orders of
    magnitude smaller than the output are still resolved.

    Inputs are drawn in float64 from ``sampler(rng, shapes)`` (standard normal
    by default). With ``kink_check`` the point is redrawn whenever the forward
    and backward one-sided differences disagree, which is how ties of
    max-type ops and ReLU zero crossings show up.
    """
    rng = np.random.default_rng(seed)
    resamples = 0
    while True:
        if sampler is None:
            arrays = [rng.standard_normal(s) for s in input_shapes]
        else:
            arrays = [np.asarray(a, dtype=np.float64) for a in sampler(rng, input_shapes)]
        inputs = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        out = op(*inputs)
        if not out.is_finite():
            raise NonFiniteError("op produced non-finite output")
        probe = rng.standard_normal(out.shape)
        backward(tsum(out * probe), inputs)
        analytic = [t.grad for t in inputs]
        ref = [a.astype(reference_dtype) for a in arrays]
        probe_r = probe.astype(reference_dtype)
        with no_grad():
            y0 = op(*[Tensor(v) for v in ref]).data

        def probe_at(i, j, h):
            vals = list(ref)
            shifted = ref[i].copy()
            shifted.reshape(-1)[j] += h
            vals[i] = shifted
            with no_grad():
                return op(*[Tensor(v) for v in vals]).data

        kinked = False
        worst = 0.0
        for i, base in enumerate(arrays):
            num = np.zeros_like(base)
            for j in range(base.size):
                yp, ym = probe_at(i, j, eps), probe_at(i, j, -eps)
                if kink_check:
                    fwd = np.sum((yp - y0) * probe_r) / eps
                    bwd = np.sum((y0 - ym) * probe_r) / eps
                    if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                        kinked = True
                        break
                d_full = np.sum((yp - ym) * probe_r) / (2 * eps)
                yp2, ym2 = probe_at(i, j, eps / 2), probe_at(i, j, -eps / 2)
                d_half = np.sum((yp2 - ym2) * probe_r) / eps
                num.reshape(-1)[j] = (4 * d_half - d_full) / 3
            if kinked:
                break
            worst = max(worst, _rel_error(analytic[i], num))
        if not kinked:
            return GradCheckResult(worst, resamples, seed)
        resamples += 1
        if resamples > max_resamples:
            raise RuntimeError("grad_check could not find a differentiable sample point")


# ------------------------------------------------------------------ checkpoint

CHECKPOINT_MAGIC = b"NPRJCKPT"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, arrays: "OrderedDict[str, np.ndarray] | dict") -> None:
    """Write named arrays to the versioned little-endian container."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<BI", _DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    version, count = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        code, rank = struct.unpack_from("<BI", buf, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if pos + nbytes > len(buf):
            raise ValueError(f"{path}: truncated checkpoint")
        out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    return out
