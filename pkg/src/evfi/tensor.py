"""Dense float64 tensors with a reverse-mode gradient tape.

Every differentiable operation used by the networks is a primitive here (or in
:mod:`evfi.flow_ops`, which registers its own primitives through
:func:`make_op`).  Operations are recorded on the active :class:`Tape` only
when at least one input requires a gradient, so inference under
:func:`no_grad` costs nothing extra.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

_uids = itertools.count()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "uid", "node_id", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.uid = next(_uids)
        self.node_id: int | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method forms ----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def abs(self):
        return tabs(self)


def _raise_not_scalar(t: Tensor):
    raise ValueError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


class Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Inputs of a node are always created before the node itself, so walking
    the list backwards is a valid reverse topological order.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward) -> int:
        self.nodes.append(Node(inputs, output, backward))
        return len(self.nodes) - 1

    def clear(self) -> None:
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class _GradState:
    def __init__(self):
        self.tape = Tape()
        self.enabled = True


_state = _GradState()


def active_tape() -> Tape:
    return _state.tape


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def fresh_tape():
    """Run a block on its own tape (restores the outer one afterwards)."""
    outer = _state.tape
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = outer


def make_op(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result and record ``backward(grad) -> grads per input``."""
    out = Tensor(data)
    if _state.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = _state.tape.record(tuple(inputs), out, backward)
    return out


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns ``{uid: gradient}`` for every leaf that requires a gradient and
    accumulates into each such leaf's ``.grad``.  The tape is consumed.
    """
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    tape = _state.tape
    if loss.node_id is None or loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].output is not loss:
        raise RuntimeError("loss is detached: it was not produced on the active tape")

    grads: dict[int, np.ndarray] = {loss.uid: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = grads.pop(node.output.uid, None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if inp.node_id is None:
                leaves[inp.uid] = inp
            prev = grads.get(inp.uid)
            grads[inp.uid] = ig if prev is None else prev + ig
    tape.clear()

    out = {}
    for uid, leaf in leaves.items():
        g = grads[uid]
        out[uid] = g
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return out


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return make_op(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    return make_op(a.data ** exponent, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    out = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))

    def backward_fn(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * a.data / safe, 0.0),)

    value = out if keepdims else (np.squeeze(out, axis=axis) if axis is not None else out.reshape(()))
    return make_op(value, (a,), backward_fn)


def tabs(a: Tensor) -> Tensor:
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope)
    return make_op(a.data * scale, (a,), lambda g: (g * scale,))


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_op(out, (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Tensor, index) -> Tensor:
    def bw(g):
        full = np.zeros_like(a.data)
        if _has_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make_op(a.data[index], (a,), bw)


def _has_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def pad2d(a: Tensor, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return make_op(np.pad(a.data, widths), (a,), lambda g: (g[..., pad:-pad, pad:-pad],))


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return make_op(a.data @ b.data, (a, b), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patch array (N, C*kh*kw, ho*wo) of an already padded NCHW array."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(gcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = shape[:2]
    gcols = gcols.reshape(n, c, kh, kw, ho, wo)
    gxp = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
    return gxp


def _conv_groups1(xp, wdata, stride, ho, wo):
    n = xp.shape[0]
    o, c, kh, kw = wdata.shape
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = wdata.reshape(o, c * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, o, ho, wo)

    def bw(g):
        gm = g.reshape(n, o, ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).sum(axis=0).reshape(wdata.shape)
        gcols = np.matmul(wmat.T, gm)
        return _col2im(gcols, xp.shape, kh, kw, stride, ho, wo), gw

    return out, bw


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation over NCHW input with OIHW weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c % groups or o % groups:
        raise ValueError(f"channels ({c} in, {o} out) not divisible by groups={groups}")
    if cg != c // groups:
        raise ValueError(f"weight expects {cg} channels per group, input gives {c // groups}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    og = o // groups

    if groups == 1:
        out, bw = _conv_groups1(xp, weight.data, stride, ho, wo)
    elif cg == 1 and og == 1:
        out, bw = _depthwise(xp, weight.data, stride, ho, wo)
    else:
        per_group = [_conv_groups1(xp[:, gi * cg:(gi + 1) * cg], weight.data[gi * og:(gi + 1) * og],
                                   stride, ho, wo) for gi in range(groups)]
        out = np.concatenate([p[0] for p in per_group], axis=1)

        def bw(g):
            res = [p[1](g[:, gi * og:(gi + 1) * og]) for gi, p in enumerate(per_group)]
            return np.concatenate([r[0] for r in res], axis=1), np.concatenate([r[1] for r in res], axis=0)

    if bias is not None:
        out = out + bias.data.reshape(1, o, 1, 1)

    def backward_fn(g):
        gxp, gw = bw(g)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_op(out, inputs, backward_fn)


def _depthwise(xp, wdata, stride, ho, wo):
    kh, kw = wdata.shape[2:]
    kern = wdata[:, 0]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] * kern[None, :, i, j, None, None]

    def bw(g):
        gxp = np.zeros(xp.shape)
        gw = np.zeros(wdata.shape)
        for i in range(kh):
            for j in range(kw):
                win = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
                gw[:, 0, i, j] = (g * win).sum(axis=(0, 2, 3))
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * kern[None, :, i, j, None, None]
        return gxp, gw

    return out, bw


# ---------------------------------------------------------------------------
# normalization / attention helpers
# ---------------------------------------------------------------------------


def layer_norm(x: Tensor, axis: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize along one axis, then apply a per-feature affine map."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if n == 0:
        raise ValueError("layer_norm over an empty axis")
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape ({n},), got {gamma.shape} and {beta.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    mu = x.data.mean(axis=axis, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gam = gamma.data.reshape(bshape)
    out = xhat * gam + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gg = (g * xhat).sum(axis=red)
        gb = g.sum(axis=red)
        gx_hat = g * gam
        gx = inv * (gx_hat - gx_hat.mean(axis=axis, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=axis, keepdims=True))
        return gx, gg, gb

    return make_op(out, (x, gamma, beta), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), bw)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    # align_corners=False: centre of output i maps to (i + 0.5) * n_in / n_out - 0.5
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return x
    ry = _resize_matrix(h, out_h)
    rx = _resize_matrix(w, out_w)
    out = ry @ x.data @ rx.T
    return make_op(out, (x,), lambda g: (ry.T @ g @ rx,))


def avg_pool2d(x: Tensor, factor: int) -> Tensor:
    """Area downscaling by an integer factor over the last two axes."""
    if factor == 1:
        return x
    h, w = x.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"size {h}x{w} not divisible by {factor}")
    lead = x.shape[:-2]
    r = x.reshape(*lead, h // factor, factor, w // factor, factor)
    return r.mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
               floor: float = 1e-8, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the input tensors to a scalar.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.  ``max_coords`` limits the checked
    coordinates per input (sampled with ``rng``) for large inputs.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    inputs = list(inputs)
    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with fresh_tape():
        loss = f(*inputs)
        if not np.all(np.isfinite(loss.data)):
            raise FloatingPointError("function output is not finite")
        grads = backward(loss)
    analytic = [grads.get(t.uid, np.zeros(t.shape)) for t in inputs]
    for t, flag in zip(inputs, flags):
        t.requires_grad = flag
        t.grad = None

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    with no_grad():
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(*inputs).item()
                flat[i] = orig - eps
                fm = f(*inputs).item()
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FloatingPointError("function output is not finite under perturbation")
                num = (fp - fm) / (2.0 * eps)
                ana = ga.reshape(-1)[i]
                err = abs(ana - num) / max(abs(ana), abs(num), floor)
                worst = max(worst, err)
    return worst
