"""Parameter storage and the AdamW optimizer."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        # lr == 0 is accepted so a run can be replayed without moving parameters
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(f"{key} must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def to_dict(self):
        return asdict(self)


class ParamStore:
    """Named learnable tensors plus non-learnable buffers and AdamW moments."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self, prefix=None):
        if prefix is None:
            return list(self.params)
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_scalars(self, prefix=None):
        return int(sum(self.params[n].data.size for n in self.names(prefix)))

    def state_dict(self, include_optimizer=True):
        """Flat ``name -> array`` copy of everything needed to resume."""
        state = {f"param/{k}": p.data.copy() for k, p in self.params.items()}
        state.update({f"buffer/{k}": np.array(b, copy=True) for k, b in self.buffers.items()})
        if include_optimizer:
            state.update({f"adam_m/{k}": a.copy() for k, a in self.m.items()})
            state.update({f"adam_v/{k}": a.copy() for k, a in self.v.items()})
            state["adam_step"] = np.array([self.step_count], dtype=np.int64)
        return state

    def load_state_dict(self, state):
        """Copy arrays in place so existing references to the parameter tensors stay valid."""
        for key, arr in state.items():
            kind, _, name = key.partition("/")
            if kind == "param":
                target = self.params[name].data
            elif kind == "buffer":
                if name not in self.buffers:
                    raise ContractError(f"unknown buffer {name!r}")
                target = self.buffers[name]
            elif kind == "adam_m":
                target = self.m[name]
            elif kind == "adam_v":
                target = self.v[name]
            elif key == "adam_step":
                self.step_count = int(arr[0])
                continue
            else:
                raise ContractError(f"unrecognised state key {key!r}")
            if target.shape != arr.shape:
                raise DimensionError(f"{key}: stored shape {arr.shape} vs model shape {target.shape}")
            target[...] = arr
        missing = [k for k in self.params if f"param/{k}" not in state]
        if missing:
            raise ContractError(f"state is missing parameters: {missing[:5]}")


def adamw_step(store, cfg, names=None):
    """One AdamW update with decoupled weight decay over ``names`` (default: all).

    Every updated parameter must carry a gradient.
    """
    names = store.names() if names is None else list(names)
    return adamw_step_groups(store, [(names, cfg)])


def adamw_step_groups(store, groups):
    """One AdamW step over ``[(names, cfg), ...]`` groups sharing a single step counter."""
    groups = [(list(names), cfg) for names, cfg in groups]
    missing = [n for names, _ in groups for n in names if store.params[n].grad is None]
    if missing:
        raise ContractError(f"no gradient for parameters {missing[:5]}")
    store.step_count += 1
    t = store.step_count
    for names, cfg in groups:
        lr, wd, b1, b2, eps = cfg.learning_rate, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.epsilon
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        step = lr / bc1
        root_bc2 = np.sqrt(bc2)
        for n in names:
            p = store.params[n]
            g = p.grad
            if wd:
                p.data *= 1.0 - lr * wd
            m = store.m[n]
            v = store.v[n]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            # in-place form of lr * m_hat / (sqrt(v_hat) + eps)
            denom = np.sqrt(v)
            denom /= root_bc2
            denom += eps
            np.divide(m, denom, out=denom)
            denom *= step
            p.data -= denom
    return store
