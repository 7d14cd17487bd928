"""Minimal reverse-mode differentiation engine and AdamW optimizer."""

from .checkpoint import FORMAT_VERSION, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, ReplayTape, finite_diff_check, frozen_stops, grad_check_report, numeric_grad, relative_error
from .ops import (
    BatchNormState,
    activation,
    batch_norm,
    ce_value,
    concat,
    dense_forward,
    dropout,
    loss_ce,
    loss_mse,
    mixture_affine,
    prelu,
    reshape,
    routed_affine,
    sigmoid,
    softmax,
    stop_gradient,
    straight_through,
    take_rows,
)
from .optim import OptimizerConfig, ParamStore, adamw_step, adamw_step_groups
from .tensor import Tensor, backward, topo_order

__all__ = [
    "FORMAT_VERSION",
    "BatchNormState",
    "OptimizerConfig",
    "ParamStore",
    "GradCheckReport",
    "ReplayTape",
    "Tensor",
    "activation",
    "adamw_step",
    "adamw_step_groups",
    "backward",
    "batch_norm",
    "ce_value",
    "concat",
    "dense_forward",
    "dropout",
    "finite_diff_check",
    "frozen_stops",
    "grad_check_report",
    "load_checkpoint",
    "loss_ce",
    "loss_mse",
    "mixture_affine",
    "numeric_grad",
    "prelu",
    "relative_error",
    "reshape",
    "routed_affine",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "stop_gradient",
    "straight_through",
    "take_rows",
    "topo_order",
]
