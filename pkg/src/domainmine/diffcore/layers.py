"""Parameterised building blocks registered in a :class:`ParamStore`."""

from __future__ import annotations

import numpy as np

from . import ops
from ..errors import ConfigError
from .ops import BatchNormState

PRELU_INIT = 0.25


INITS = ("uniform", "orthogonal")


def uniform_init(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal_init(rng, shape):
    """Matrix with orthonormal rows or columns (whichever is shorter); preserves geometry."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))  # unique decomposition
    return q if rows >= cols else q.T


class Dense:
    def __init__(self, store, name, d_in, d_out, rng, bias=True, init="uniform"):
        self.name, self.d_in, self.d_out = name, d_in, d_out
        if init == "orthogonal":
            W = orthogonal_init(rng, (d_in, d_out))
        elif init == "uniform":
            W = uniform_init(rng, d_in, (d_in, d_out))
        else:
            raise ConfigError(f"unknown init {init!r}; expected one of {INITS}")
        self.W = store.add(f"{name}.W", W)
        self.b = store.add(f"{name}.b", uniform_init(rng, d_in, (d_out,))) if bias else None

    def __call__(self, x):
        return ops.dense_forward(x, self.W, self.b)


class BatchNorm:
    def __init__(self, store, name, width):
        self.gamma = store.add(f"{name}.gamma", np.ones(width))
        self.beta = store.add(f"{name}.beta", np.zeros(width))
        mean = store.buffers[f"{name}.running_mean"] = np.zeros(width)
        var = store.buffers[f"{name}.running_var"] = np.ones(width)
        updates = store.buffers[f"{name}.updates"] = np.zeros(1)
        self.state = BatchNormState(width, mean, var, updates)

    def __call__(self, x, training):
        return ops.batch_norm(x, self.gamma, self.beta, self.state, training)


class FFNBlock:
    """dense -> batch_norm -> prelu."""

    def __init__(self, store, name, d_in, d_out, rng, init="uniform"):
        self.d_in, self.d_out = d_in, d_out
        self.dense = Dense(store, f"{name}.dense", d_in, d_out, rng, init=init)
        self.bn = BatchNorm(store, f"{name}.bn", d_out)
        self.slope = store.add(f"{name}.prelu", np.full(d_out, PRELU_INIT))

    def __call__(self, x, training):
        return ops.prelu(self.bn(self.dense(x), training), self.slope)


class MLPStack:
    """FFN blocks with the given output widths; ``linear_last`` makes the final layer a bare dense map."""

    def __init__(self, store, name, d_in, widths, rng, linear_last=False, init="uniform"):
        self.layers = []
        prev = d_in
        for i, w in enumerate(widths):
            if linear_last and i == len(widths) - 1:
                self.layers.append(Dense(store, f"{name}.{i}", prev, w, rng, init=init))
            else:
                self.layers.append(FFNBlock(store, f"{name}.{i}", prev, w, rng, init=init))
            prev = w
        self.d_in, self.d_out = d_in, prev

    def __call__(self, x, training):
        for layer in self.layers:
            x = layer(x) if isinstance(layer, Dense) else layer(x, training)
        return x
