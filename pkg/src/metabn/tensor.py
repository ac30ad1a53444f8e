"""Dense float64 tensors with tape-free reverse-mode autodiff.

Every op output keeps references to its parents and a closure that maps the
output cotangent to input cotangents.  ``backward`` walks the resulting DAG in
reverse topological order.  Broadcasting is intentionally narrow: binary ops
accept identical shapes, or a right operand matching the trailing dims of the
left one (bias style).
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import NonFinite, NotScalar, ShapeMismatch

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}{flag}, op={self.op})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    def __radd__(self, other):
        return add(self, _as_tensor(other, self))

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, float(value)))


def tensor_create(shape: Sequence[int], values: Iterable[float], requires_grad: bool = False) -> Tensor:
    """Build a tensor from a shape and a flat row-major value list."""
    shape = tuple(int(s) for s in shape)
    if any(s < 0 for s in shape):
        raise ShapeMismatch(f"negative dimension in shape {list(shape)}")
    flat = np.asarray(list(values), dtype=np.float64)
    if math.prod(shape) != flat.size:
        raise ShapeMismatch(f"shape {list(shape)} holds {math.prod(shape)} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise NonFinite("tensor_create: input contains NaN or Inf")
    return Tensor(flat.reshape(shape), requires_grad=requires_grad)


def parameter(array, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64, copy=True), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# primitive machinery

PRIMITIVES: dict[str, Callable] = {}


def _primitive(name: str):
    def deco(fn):
        PRIMITIVES[name] = fn
        return fn

    return deco


def _record(name: str, out: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    # fast path: a finite sum means every entry is finite; the mask check settles overflowing sums
    if not np.isfinite(out.sum()) and not np.isfinite(out).all():
        raise NonFinite(f"{name}: produced NaN or Inf")
    track = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    if not track:
        return Tensor(out, op=name)
    return Tensor(out, requires_grad=True, _parents=tuple(inputs), _backward=vjp, op=name)


def apply_primitive(op: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Dispatch a primitive by name; the uniform entry point over all ops."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ValueError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


def _trailing_compatible(a: Tensor, b: Tensor, name: str) -> bool:
    """True when b broadcasts over leading axes of a; raise if incompatible."""
    if a.shape == b.shape:
        return False
    if b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return True
    raise ShapeMismatch(f"{name}: shapes {list(a.shape)} and {list(b.shape)} are incompatible")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


@_primitive("add")
def add(a: Tensor, b: Tensor) -> Tensor:
    _trailing_compatible(a, b, "add")
    out = a.data + b.data
    return _record("add", out, (a, b), lambda g: (g, _reduce_to(g, b.shape)))


@_primitive("sub")
def sub(a: Tensor, b: Tensor) -> Tensor:
    _trailing_compatible(a, b, "sub")
    out = a.data - b.data
    return _record("sub", out, (a, b), lambda g: (g, -_reduce_to(g, b.shape)))


@_primitive("mul")
def mul(a: Tensor, b: Tensor) -> Tensor:
    _trailing_compatible(a, b, "mul")
    out = a.data * b.data
    return _record("mul", out, (a, b), lambda g: (g * b.data, _reduce_to(g * a.data, b.shape)))


@_primitive("scale")
def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


@_primitive("matmul")
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {list(a.shape)} @ {list(b.shape)}")
    out = a.data @ b.data
    return _record("matmul", out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


@_primitive("relu")
def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def _im2col(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))  # n,c,h,w,3,3
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


@_primitive("conv2d_3x3")
def conv2d_3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1. x: [N,C,H,W], w: [O,C,3,3]."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv2d_3x3: input {list(x.shape)} with kernel {list(w.shape)}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv2d_3x3: bias {list(b.shape)} for {w.shape[0]} output channels")
    n, c, h, wd = x.shape
    o = w.shape[0]
    cols = _im2col(x.data)
    wm = w.data.reshape(o, c * 9)
    out = (cols @ wm.T).reshape(n, h, wd, o).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, o)
        dw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(n, h, wd, c, 3, 3)
            dxp = np.zeros((n, c, h + 2, wd + 2))
            for i in range(3):
                for j in range(3):
                    dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, 1:-1, 1:-1]
        grads = (dx, dw)
        if b is not None:
            grads = grads + (g.sum(axis=(0, 2, 3)),)
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d_3x3", out, inputs, vjp)


def _norm_axes(ndim: int, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


@_primitive("mean_axis")
def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(a.ndim, axis)
    count = math.prod(a.shape[i] for i in axes)
    if count == 0:
        raise ShapeMismatch("mean_axis: reduction over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gk / count, a.shape).copy(),)

    return _record("mean_axis", np.asarray(out), (a,), vjp)


@_primitive("var_axis")
def var_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Population (1/N) variance."""
    axes = _norm_axes(a.ndim, axis)
    count = math.prod(a.shape[i] for i in axes)
    if count == 0:
        raise ShapeMismatch("var_axis: reduction over an empty axis")
    centered = a.data - a.data.mean(axis=axes, keepdims=True)
    out = (centered**2).mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axes)
        return (2.0 * centered * gk / count,)

    return _record("var_axis", np.asarray(out), (a,), vjp)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


@_primitive("softmax_ce")
def softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy; labels are integer class ids."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != labels.size:
        raise ShapeMismatch(f"softmax_ce: logits {list(logits.shape)} vs {labels.size} labels")
    if labels.size == 0:
        raise ShapeMismatch("softmax_ce: empty batch")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ShapeMismatch("softmax_ce: label out of range")
    n = labels.size
    logp = _log_softmax(logits.data)
    out = -logp[np.arange(n), labels].mean()

    def vjp(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _record("softmax_ce", np.asarray(out), (logits,), vjp)


@_primitive("mse")
def mse(pred: Tensor, target: Tensor) -> Tensor:
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {list(pred.shape)} vs {list(target.shape)}")
    if pred.size == 0:
        raise ShapeMismatch("mse: empty input")
    diff = pred.data - target.data
    out = np.mean(diff**2)
    k = 2.0 / pred.size
    return _record("mse", np.asarray(out), (pred, target), lambda g: (g * k * diff, -g * k * diff))


@_primitive("l2_normalize")
def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise x / max(||x||, eps) over the last axis."""
    norm = np.sqrt((a.data**2).sum(axis=-1, keepdims=True))
    clipped = norm <= eps
    denom = np.where(clipped, eps, norm)
    y = a.data / denom

    def vjp(g):
        proj = (g * y).sum(axis=-1, keepdims=True)
        dx = np.where(clipped, g / denom, (g - y * proj) / denom)
        return (dx,)

    return _record("l2_normalize", y, (a,), vjp)


@_primitive("cosine_sim")
def cosine_sim(a: Tensor, b: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise cosine similarity of two [N, D] tensors -> [N]."""
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatch(f"cosine_sim: {list(a.shape)} vs {list(b.shape)}")
    na = np.maximum(np.sqrt((a.data**2).sum(axis=1)), eps)
    nb = np.maximum(np.sqrt((b.data**2).sum(axis=1)), eps)
    ua = a.data / na[:, None]
    ub = b.data / nb[:, None]
    cos = (ua * ub).sum(axis=1)

    def vjp(g):
        ga = g[:, None] * (ub - cos[:, None] * ua) / na[:, None]
        gb = g[:, None] * (ua - cos[:, None] * ub) / nb[:, None]
        return (ga, gb)

    return _record("cosine_sim", cos, (a, b), vjp)


@_primitive("neg_entropy")
def neg_entropy(logits: Tensor) -> Tensor:
    """Mean Shannon entropy -sum p log p of softmax(logits) over rows.

    The name follows the sign in the formula; minimizing this value sharpens
    predictions.
    """
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise ShapeMismatch(f"neg_entropy: logits {list(logits.shape)}")
    n = logits.shape[0]
    logp = _log_softmax(logits.data)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=1)

    def vjp(g):
        # dH/dz = -p * (log p + H)
        return (-(g / n) * p * (logp + h[:, None]),)

    return _record("neg_entropy", np.asarray(h.mean()), (logits,), vjp)


@_primitive("rotate90k")
def rotate90k(a: Tensor, k: int) -> Tensor:
    """Rotate counter-clockwise by k*90 degrees over the last two axes."""
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"rotate90k: needs square trailing dims, got {list(a.shape)}")
    k = int(k) % 4
    out = np.ascontiguousarray(np.rot90(a.data, k, axes=(-2, -1)))
    return _record("rotate90k", out, (a,), lambda g: (np.rot90(g, -k, axes=(-2, -1)),))


@_primitive("concat")
def concat(*tensors: Tensor, axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeMismatch("concat: no inputs")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeMismatch(f"concat: {list(t.shape)} does not match {list(ref)} off axis {ax}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=ax)))


@_primitive("reshape")
def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: {list(a.shape)} -> {list(shape)}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


@_primitive("batch_norm")
def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, mean=None, var=None, eps: float = 1e-5) -> Tensor:
    """Fused per-channel normalization and affine map over axis 1.

    With ``mean``/``var`` omitted the batch statistics (population variance)
    over every axis except 1 are used and differentiated through; otherwise
    the supplied arrays are treated as constants.
    """
    if x.ndim < 2:
        raise ShapeMismatch(f"batch_norm: input {list(x.shape)} has no channel axis")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batch_norm: {c} channels vs affine {list(gamma.shape)}/{list(beta.shape)}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    batch_stats = mean is None
    if batch_stats:
        mu = x.data.mean(axis=axes, keepdims=True)
        v = ((x.data - mu) ** 2).mean(axis=axes, keepdims=True)
    else:
        mu = np.asarray(mean, dtype=np.float64).reshape(bshape)
        v = np.asarray(var, dtype=np.float64).reshape(bshape)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - mu) * inv
    g_ = gamma.data.reshape(bshape)
    out = g_ * xhat + beta.data.reshape(bshape)

    def vjp(g):
        dbeta = g.sum(axis=axes)
        dgamma = (g * xhat).sum(axis=axes)
        dxhat = g * g_
        if batch_stats:
            dx = inv * (
                dxhat
                - dxhat.mean(axis=axes, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            dx = dxhat * inv
        return (dx, dgamma, dbeta)

    return _record("batch_norm", out, (x, gamma, beta), vjp)


# --------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls; intermediate nodes release their
    closures and parent links once visited.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is not None:
            in_grads = node._backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        node._backward = None
        node._parents = ()


def grad_of(loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Run backward from fresh zero grads and return grads for ``params``."""
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor | np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff_grad: h must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr):
        with no_grad():
            val = f(Tensor(arr))
        return float(val.data) if isinstance(val, Tensor) else float(val)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(base)
        flat[i] = orig - h
        fm = evaluate(base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------
# optimizers


def _check_pairs(params, grads):
    if len(params) != len(grads):
        raise ShapeMismatch(f"{len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if g is not None and p.shape != np.shape(g):
            raise ShapeMismatch(f"param {list(p.shape)} vs grad {list(np.shape(g))}")


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> Sequence[Tensor]:
    """In-place p <- p - lr * g."""
    _check_pairs(params, grads)
    for p, g in zip(params, grads):
        if g is not None and lr != 0.0:
            p.data = p.data - lr * g
    return params


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place."""
    _check_pairs(params, grads)
    if lr < 0:
        raise ValueError("adam_step: lr must be non-negative")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ShapeMismatch("adam_step: state was built for a different parameter list")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if state.m[i].shape != p.shape:
            raise ShapeMismatch("adam_step: moment buffer shape drifted from its parameter")
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g
        if lr == 0.0:
            continue
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state
