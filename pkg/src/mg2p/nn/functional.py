"""Differentiable operations over :class:`~mg2p.nn.tensor.Tensor`.

Every forward op here registers a backward rule; ``tests/test_nn.py`` checks
each one against central finite differences in float64.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)

        def backward_const(g):
            return (g * c,)

        return make_result(a.data * c, (a,), backward_const)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading dims."""
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_weight(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, (a, b), backward)


def _matmul_weight(a: Tensor, w: Tensor) -> Tensor:
    # (..., K) @ (K, N) as one flat GEMM; numpy would otherwise loop over the batch
    k, n = w.shape
    a2 = a.data.reshape(-1, k)
    out = (a2 @ w.data).reshape(a.shape[:-1] + (n,))

    def backward(g):
        g2 = g.reshape(-1, n)
        ga = (g2 @ w.data.T).reshape(a.shape) if a.requires_grad else None
        gw = a2.T @ g2 if w.requires_grad else None
        return ga, gw

    return make_result(out, (a, w), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    in_shape = x.shape

    def backward(g):
        return (g.reshape(in_shape),)

    return make_result(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return make_result(np.transpose(x.data, axes), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    in_shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, in_shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor) -> Tensor:
    return mul(sum(x), 1.0 / x.data.size)


def _check_finite(x: np.ndarray, name: str) -> None:
    if np.isnan(x).any():
        raise ValueError(f"{name}: NaN in input")


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    _check_finite(x, "softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    _check_finite(x, "log_softmax")
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = softmax_array(x.data, axis)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_result(y, (x,), backward)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true; those entries get no gradient."""
    keep = ~mask

    def backward(g):
        return (_unbroadcast(g * keep, x.shape),)

    return make_result(np.where(mask, np.asarray(value, dtype=x.dtype), x.data), (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = x.shape[-1]

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        lead = g.reshape(-1, n)
        ggamma = (lead * xhat.reshape(-1, n)).sum(axis=0)
        gbeta = lead.sum(axis=0)
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward)


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (gw,)

    return make_result(weight.data[ids], (weight,), backward)


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval mode is the identity."""
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    scale = np.asarray(1.0 / (1.0 - p), dtype=x.dtype)
    mask = (rng.random(x.shape, dtype=np.float32) >= p).astype(x.dtype) * scale

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, pad_id: int, label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions.

    ``logits`` has shape (..., V) and ``targets`` the matching leading shape.
    """
    v = logits.shape[-1]
    flat = logits.data.reshape(-1, v)
    tgt = np.asarray(targets, dtype=np.int64).reshape(-1)
    if tgt.size and tgt.max() >= v:
        raise ValueError(f"target id {int(tgt.max())} out of range for vocabulary of {v}")
    keep = tgt != pad_id
    n = int(keep.sum())
    if n == 0:
        raise ValueError("cross_entropy: every position is padding")
    logp = log_softmax_array(flat, -1)
    rows = np.nonzero(keep)[0]
    nll = -logp[rows, tgt[rows]]
    if label_smoothing > 0.0:
        smooth = -logp[rows].mean(axis=-1)
        nll = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    loss = np.asarray(nll.sum() / n, dtype=logits.dtype)

    def backward(g):
        probs = np.exp(logp)
        grad = np.zeros_like(flat)
        target_weight = 1.0 - label_smoothing
        grad[rows] = probs[rows]
        grad[rows, tgt[rows]] -= target_weight
        if label_smoothing > 0.0:
            grad[rows] -= label_smoothing / v
        grad *= g / n
        return (grad.reshape(logits.shape),)

    return make_result(loss, (logits,), backward)
