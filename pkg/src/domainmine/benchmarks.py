"""Named synthetic benchmarks with the model and training settings tuned for them.

``recovery`` asks whether latent domains can be mined at all: 4 domains that
differ in which field values they use.  ``conflict`` asks whether routing by
mined domains pays off: 12 domains whose labels depend on a few shared fields
with opposite signs in paired domains, so a single network has to infer the
domain before it can use those fields.

Both use a wider miner than the library defaults, linear latent outputs on the
encoder/decoder, a small main learning rate and a larger one for the miner.
These settings make the mined partition of ``z`` track the true domains
within a five-epoch budget.
"""

from __future__ import annotations

from dataclasses import dataclass

from .admm import ModelConfig
from .data import SplitSpec, SyntheticConfig
from .diffcore import OptimizerConfig
from .errors import ConfigError
from .trainer import TrainConfig

MINER = dict(
    hidden=128,
    latent_dim=128,
    encoder_widths=(128, 128, 128),
    linear_encoder_output=True,
    linear_decoder_output=True,
    usage_rebalance=True,
    rebalance_patience=20,
)


@dataclass
class Benchmark:
    name: str
    data: SyntheticConfig
    split: SplitSpec
    model: ModelConfig
    training: TrainConfig


def _training(seed):
    return TrainConfig(
        epochs=5,
        batch_size=128,
        patience=5,
        seed=seed,
        optimizer=OptimizerConfig(learning_rate=1e-4),
        dmm_learning_rate=1e-2,
    )


def recovery(seed=0):
    data = SyntheticConfig(K=4, F=8, V=50, concentration=0.05, n=20000, seed=seed)
    return Benchmark("recovery", data, SplitSpec(seed=seed), ModelConfig(m=4, **MINER), _training(seed))


def conflict(seed=0):
    data = SyntheticConfig(
        K=12,
        F=14,
        V=50,
        concentration=0.02,
        n=20000,
        seed=seed,
        weight_scale=1.0,
        shared_fields=4,
        shared_weight_scale=2.0,
        conflict=True,
        conflict_fields=(10, 11, 12, 13),
    )
    return Benchmark("conflict", data, SplitSpec(seed=seed), ModelConfig(m=12, **MINER), _training(seed))


BENCHMARKS = {"recovery": recovery, "conflict": conflict}


def get(name, seed=0):
    try:
        return BENCHMARKS[name](seed)
    except KeyError:
        raise ConfigError(f"unknown benchmark {name!r}; expected one of {sorted(BENCHMARKS)}") from None
