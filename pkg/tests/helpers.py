"""Shared test utilities: gradient checking against central differences."""

import zlib

import numpy as np

from metabn import tensor as T
from metabn.tensor import Tensor

REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def functional(shape, rng):
    """A fixed random linear functional; maps any output of ``shape`` to a scalar."""
    w = rng.normal(size=shape)

    def apply(out: Tensor) -> Tensor:
        if out.size == 1 and out.ndim == 0:
            return out
        return T.scale(T.mean_axis(T.mul(out, Tensor(w))), float(w.size))

    return apply


def grad_errors(fn, arrays, h=1e-6):
    """(analytic, numeric) gradient pairs for every input of a scalar ``fn``."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(fn(leaves))
    pairs = []
    for k, leaf in enumerate(leaves):

        def f(x, k=k):
            ins = [Tensor(a) for a in arrays]
            ins[k] = x
            return fn(ins)

        numeric = T.finite_diff_grad(f, arrays[k], h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arrays[k])
        pairs.append((analytic, numeric))
    return pairs


def assert_grads_match(fn, arrays, h=1e-6, rel=REL_TOL, floor=ABS_FLOOR):
    for k, (analytic, numeric) in enumerate(grad_errors(fn, arrays, h)):
        err = np.abs(analytic - numeric)
        bound = rel * np.maximum(np.abs(analytic), np.abs(numeric)) + floor
        bad = err > bound
        assert not bad.any(), (
            f"input {k}: max err {err.max():.3e}; analytic {analytic[bad][:3]} vs numeric {numeric[bad][:3]}"
        )


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def gradcheck_case(op: str, seed: int):
    """Random inputs and a scalar-valued closure exercising one primitive."""
    rng = np.random.default_rng([seed, zlib.crc32(op.encode())])
    n = int(rng.integers(2, 5))
    m = int(rng.integers(2, 5))
    if op == "matmul":
        k = int(rng.integers(1, 5))
        arrays = [rng.normal(size=(n, k)), rng.normal(size=(k, m))]
        f = functional((n, m), rng)
        return arrays, lambda t: f(T.matmul(*t))
    if op in ("add", "sub", "mul"):
        bias = rng.random() < 0.5
        arrays = [rng.normal(size=(n, m)), rng.normal(size=(m,) if bias else (n, m))]
        f = functional((n, m), rng)
        prim = getattr(T, op)
        return arrays, lambda t: f(prim(*t))
    if op == "scale":
        c = float(rng.normal())
        f = functional((n, m), rng)
        return [rng.normal(size=(n, m))], lambda t: f(T.scale(t[0], c))
    if op == "relu":
        f = functional((n, m), rng)
        return [_away_from_zero(rng, (n, m))], lambda t: f(T.relu(t[0]))
    if op == "conv2d_3x3":
        c, o, h = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(2, 4))
        use_bias = rng.random() < 0.5
        arrays = [rng.normal(size=(2, c, h, h)), rng.normal(size=(o, c, 3, 3))]
        if use_bias:
            arrays.append(rng.normal(size=(o,)))
        f = functional((2, o, h, h), rng)
        return arrays, lambda t: f(T.conv2d_3x3(*t))
    if op in ("mean_axis", "var_axis"):
        axis = [None, 0, 1, (0, 1)][int(rng.integers(0, 4))]
        x = rng.normal(size=(n, m))
        prim = getattr(T, op)
        out_shape = np.asarray(x.mean(axis=axis)).shape
        f = functional(out_shape, rng)
        return [x], lambda t: f(prim(t[0], axis=axis))
    if op == "softmax_ce":
        labels = rng.integers(0, m, size=n)
        return [rng.normal(size=(n, m))], lambda t: T.softmax_ce(t[0], labels)
    if op == "mse":
        return [rng.normal(size=(n, m)), rng.normal(size=(n, m))], lambda t: T.mse(*t)
    if op == "l2_normalize":
        f = functional((n, m), rng)
        return [rng.normal(size=(n, m)) + 0.5], lambda t: f(T.l2_normalize(t[0]))
    if op == "cosine_sim":
        f = functional((n,), rng)
        return [rng.normal(size=(n, m)), rng.normal(size=(n, m))], lambda t: f(T.cosine_sim(*t))
    if op == "neg_entropy":
        return [rng.normal(size=(n, m))], lambda t: T.neg_entropy(t[0])
    if op == "rotate90k":
        k = int(rng.integers(0, 4))
        f = functional((2, n, n), rng)
        return [rng.normal(size=(2, n, n))], lambda t: f(T.rotate90k(t[0], k))
    if op == "concat":
        arrays = [rng.normal(size=(int(rng.integers(1, 4)), m)) for _ in range(3)]
        f = functional((sum(a.shape[0] for a in arrays), m), rng)
        return arrays, lambda t: f(T.concat(*t, axis=0))
    if op == "reshape":
        f = functional((m, n), rng)
        return [rng.normal(size=(n, m))], lambda t: f(T.reshape(t[0], (m, n)))
    if op == "batch_norm":
        frozen = rng.random() < 0.5
        c = int(rng.integers(1, 4))
        shape = (int(rng.integers(2, 5)), c) + ((2, 2) if rng.random() < 0.5 else ())
        x = rng.normal(size=shape) * 2 + 1
        gamma, beta = rng.uniform(0.5, 1.5, size=c), rng.normal(size=c)
        stats = (rng.normal(size=c), rng.uniform(0.5, 2.0, size=c)) if frozen else (None, None)
        f = functional(shape, rng)
        return [x, gamma, beta], lambda t: f(T.batch_norm(*t, mean=stats[0], var=stats[1], eps=1e-5))
    raise KeyError(op)
