"""Differentiable operations.

Each function takes :class:`Tensor` (or array-like constants), computes the
forward value with numpy and registers a closure for the backward pass.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from ..errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor, accumulate, as_tensor, make_node

CE_CLAMP = 1e-7
BN_EPS = 1e-5
BN_MOMENTUM = 0.99


# set by gradcheck.frozen_stops: replays recorded stop-gradient values as
# constants and watches the discrete branches taken by piecewise ops
_stop_tape = None


def _branch(pattern):
    if _stop_tape is not None:
        _stop_tape.branch(pattern)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(g, b.shape))

    return make_node(a.data + b.data, (a, b), back, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        accumulate(a, _unbroadcast(g, a.shape))
        accumulate(b, _unbroadcast(-g, b.shape))

    return make_node(a.data - b.data, (a, b), back, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        accumulate(a, _unbroadcast(g * b.data, a.shape))
        accumulate(b, _unbroadcast(g * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), back, "mul")


def power(a, exponent):
    a = as_tensor(a)
    exponent = float(exponent)

    def back(g):
        accumulate(a, g * exponent * a.data ** (exponent - 1.0))

    return make_node(a.data**exponent, (a,), back, "pow")


def sum(a, axis=None):  # noqa: A001 - mirrors numpy
    a = as_tensor(a)

    def back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        accumulate(a, np.broadcast_to(g, a.shape))

    return make_node(a.data.sum(axis=axis), (a,), back, "sum")


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: left {a.shape} and right {b.shape} do not conform")

    def back(g):
        accumulate(a, g @ b.data.T)
        accumulate(b, a.data.T @ g)

    return make_node(a.data @ b.data, (a, b), back, "matmul")


def dense_forward(x, W, b=None):
    """``x @ W + b`` with ``b`` broadcast over the batch."""
    x, W = as_tensor(x), as_tensor(W)
    if x.ndim != 2:
        raise DimensionError(f"dense input x must be batch x in, got {x.shape}")
    if W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise DimensionError(f"dense: input x {x.shape} does not conform to weight W {W.shape}")
    if b is None:
        return matmul(x, W)
    b = as_tensor(b)
    if b.shape != (W.shape[1],):
        raise DimensionError(f"dense: bias b {b.shape} does not match weight W output width {W.shape[1]}")
    xd, Wd, bd = x.data, W.data, b.data

    def back(g):
        accumulate(x, g @ Wd.T)
        accumulate(W, xd.T @ g)
        accumulate(b, g.sum(axis=0))

    return make_node(xd @ Wd + bd, (x, W, b), back, "dense")


def prelu(x, slope):
    """Per-channel PReLU over the last axis: ``x`` if ``x >= 0`` else ``slope * x``."""
    if slope is None:
        raise ConfigError("prelu requires a learnable slope parameter")
    x, slope = as_tensor(x), as_tensor(slope)
    if slope.shape not in ((x.shape[-1],), (1,), ()):
        raise DimensionError(f"prelu slope {slope.shape} does not match channels {x.shape[-1]}")
    pos = x.data >= 0
    _branch(pos)

    def back(g):
        accumulate(x, g * np.where(pos, 1.0, slope.data))
        gs = g * np.where(pos, 0.0, x.data)
        accumulate(slope, _unbroadcast(gs, slope.shape))

    return make_node(np.where(pos, x.data, slope.data * x.data), (x, slope), back, "prelu")


def sigmoid(x):
    x = as_tensor(x)
    s = expit(x.data)

    def back(g):
        accumulate(x, g * s * (1.0 - s))

    return make_node(s, (x,), back, "sigmoid")


def softmax(x):
    """Softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        accumulate(x, s * (g - (g * s).sum(axis=-1, keepdims=True)))

    return make_node(s, (x,), back, "softmax")


def activation(x, kind, params=None):
    if kind == "prelu":
        return prelu(x, params)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x)
    raise ConfigError(f"unknown activation kind {kind!r}")


class BatchNormState:
    """Running statistics for one batch-norm layer (affine params live in the store)."""

    def __init__(self, width, running_mean=None, running_var=None, updates=None):
        self.running_mean = np.zeros(width) if running_mean is None else running_mean
        self.running_var = np.ones(width) if running_var is None else running_var
        # one-element counter of train-mode updates (array so a store can share it)
        self.updates = np.zeros(1) if updates is None else updates


def batch_norm(x, gamma, beta, state, training, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Normalize columns of a ``batch x f`` input, then apply the affine map.

    Train mode uses population batch statistics and updates the running
    statistics as ``running = momentum * running + (1 - momentum) * batch``.
    The first train-mode batch seeds the running statistics directly, so the
    (0, 1) placeholders never leak into eval mode.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(f"batch_norm: input {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    n = x.shape[0]
    if training:
        if n < 2:
            raise ContractError("batch_norm in train mode needs batch >= 2")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        # in place: the arrays may be shared with a ParamStore's buffers
        if state.updates[0] == 0:
            state.running_mean[...] = mu
            state.running_var[...] = var
        else:
            state.running_mean *= momentum
            state.running_mean += (1.0 - momentum) * mu
            state.running_var *= momentum
            state.running_var += (1.0 - momentum) * var
        state.updates += 1
    else:
        mu, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def back(g):
        accumulate(gamma, (g * xhat).sum(axis=0))
        accumulate(beta, g.sum(axis=0))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data
        if training:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        accumulate(x, dx)

    return make_node(gamma.data * xhat + beta.data, (x, gamma, beta), back, "batch_norm")


def stop_gradient(x):
    """Identity forward; the result is a fresh leaf so nothing flows back through it."""
    x = as_tensor(x)
    data = x.data.copy() if _stop_tape is None else _stop_tape.replay(x.data)
    return Tensor(data, requires_grad=False, op="stop_gradient")


def straight_through(live, frozen):
    """Value of ``frozen`` with the gradient routed to ``live``.

    Equivalent to ``live + stop_gradient(frozen - live)`` but returns
    ``frozen`` bit for bit instead of the rounded sum.
    """
    live, frozen = as_tensor(live), as_tensor(frozen)
    if live.shape != frozen.shape:
        raise DimensionError(f"straight_through: {live.shape} vs {frozen.shape}")

    def back(g):
        accumulate(live, g)

    data = frozen.data.copy()
    if _stop_tape is not None:
        data = _stop_tape.replay(frozen.data - live.data, offset=live.data, exact=frozen.data)
    return make_node(data, (live,), back, "straight_through")


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            accumulate(t, g[tuple(idx)])

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def take_rows(table, index):
    """Gather rows ``table[index]``; the gradient is scattered back to those rows only."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractError(f"row index out of range for table with {table.shape[0]} rows")
    _branch(index)

    def back(g):
        if not table.requires_grad:
            return
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        accumulate(table, full)

    return make_node(table.data[index], (table,), back, "take_rows")


def reshape(x, shape):
    x = as_tensor(x)

    def back(g):
        accumulate(x, g.reshape(x.shape))

    return make_node(x.data.reshape(shape), (x,), back, "reshape")


def dropout(x, rate, rng, training):
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


def routed_affine(Z, W, b, index):
    """Per-sample affine map picked by ``index``: ``out[i] = Z[i] @ W[index[i]] + b[index[i]]``.

    ``W`` is ``N x in x out`` and ``b`` is ``N x out`` (or ``None``).  Maps that
    no sample selects receive exactly zero gradient.
    """
    Z, W = as_tensor(Z), as_tensor(W)
    index = np.asarray(index, dtype=np.int64)
    n_maps = W.shape[0]
    if W.ndim != 3 or Z.ndim != 2 or Z.shape[1] != W.shape[1]:
        raise DimensionError(f"routed_affine: input {Z.shape} vs stacked weights {W.shape}")
    if index.shape != (Z.shape[0],):
        raise DimensionError(f"routed_affine: index {index.shape} vs batch {Z.shape[0]}")
    if index.size and (index.min() < 0 or index.max() >= n_maps):
        raise ContractError(f"routing index out of range [0, {n_maps})")
    _branch(index)
    parents = (Z, W) if b is None else (Z, W, as_tensor(b))
    groups = [(j, np.flatnonzero(index == j)) for j in np.unique(index)]
    out = np.empty((Z.shape[0], W.shape[2]))
    for j, rows in groups:
        out[rows] = Z.data[rows] @ W.data[j]
        if b is not None:
            out[rows] += parents[2].data[j]

    def back(g):
        gZ = np.zeros_like(Z.data) if Z.requires_grad else None
        gW = np.zeros_like(W.data) if W.requires_grad else None
        gb = np.zeros_like(parents[2].data) if b is not None and parents[2].requires_grad else None
        for j, rows in groups:
            gr = g[rows]
            if gZ is not None:
                gZ[rows] = gr @ W.data[j].T
            if gW is not None:
                gW[j] = Z.data[rows].T @ gr
            if gb is not None:
                gb[j] = gr.sum(axis=0)
        if gZ is not None:
            accumulate(Z, gZ)
        if gW is not None:
            accumulate(W, gW)
        if gb is not None:
            accumulate(parents[2], gb)

    return make_node(out, parents, back, "routed_affine")


def mixture_affine(Z, W, b, weights):
    """Weighted sum of all maps: ``out[i] = sum_j weights[i, j] * (Z[i] @ W[j] + b[j])``."""
    Z, W, weights = as_tensor(Z), as_tensor(W), as_tensor(weights)
    if W.ndim != 3 or Z.ndim != 2 or Z.shape[1] != W.shape[1]:
        raise DimensionError(f"mixture_affine: input {Z.shape} vs stacked weights {W.shape}")
    if weights.shape != (Z.shape[0], W.shape[0]):
        raise DimensionError(f"mixture_affine: weights {weights.shape} vs batch x maps {(Z.shape[0], W.shape[0])}")
    parents = (Z, W, weights) if b is None else (Z, W, weights, as_tensor(b))
    per_map = np.einsum("bi,nio->bno", Z.data, W.data)
    if b is not None:
        per_map = per_map + parents[3].data[None, :, :]
    out = np.einsum("bn,bno->bo", weights.data, per_map)

    def back(g):
        a = weights.data
        if Z.requires_grad:
            accumulate(Z, np.einsum("bn,bo,nio->bi", a, g, W.data))
        if W.requires_grad:
            accumulate(W, np.einsum("bn,bi,bo->nio", a, Z.data, g))
        if weights.requires_grad:
            accumulate(weights, np.einsum("bo,bno->bn", g, per_map))
        if b is not None and parents[3].requires_grad:
            accumulate(parents[3], np.einsum("bn,bo->no", a, g))

    return make_node(out, parents, back, "mixture_affine")


def ce_value(p, y):
    """Mean binary cross-entropy on plain arrays, probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"cross-entropy: predictions {p.shape} vs labels {y.shape}")
    pc = np.clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def loss_ce(p, y):
    p = as_tensor(p)
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"loss_ce: predictions p {p.shape} vs labels y {y.shape}")
    lo, hi = CE_CLAMP, 1.0 - CE_CLAMP
    pc = np.clip(p.data, lo, hi)
    inside = (p.data >= lo) & (p.data <= hi)
    _branch(inside)
    n = p.data.size

    def back(g):
        accumulate(p, g * inside * (-y / pc + (1.0 - y) / (1.0 - pc)) / n)

    return make_node(ce_value(p.data, y), (p,), back, "loss_ce")


def loss_mse(u, v):
    """Mean over the batch of the squared L2 distance summed over feature dims.

    A 1-D input is one sample.
    """
    u, v = as_tensor(u), as_tensor(v)
    if u.shape != v.shape:
        raise DimensionError(f"loss_mse: {u.shape} vs {v.shape}")
    n = 1 if u.ndim <= 1 else u.shape[0]
    diff = u.data - v.data

    def back(g):
        accumulate(u, g * 2.0 * diff / n)
        accumulate(v, -g * 2.0 * diff / n)

    return make_node(np.sum(diff * diff) / n, (u, v), back, "loss_mse")
