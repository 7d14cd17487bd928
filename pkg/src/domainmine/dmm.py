"""Domain mining: a vector-quantized autoencoder that assigns latent-domain indices.

The module only ever sees a gradient-stopped copy of the projected input, so
its loss trains the encoder, decoder and codebook and nothing else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import ops
from .diffcore.layers import INITS, MLPStack
from .errors import ConfigError, ContractError, DimensionError

METRICS = ("squared_euclidean", "cosine")


@dataclass
class DMMConfig:
    m: int = 8
    beta: float = 0.25
    metric: str = "squared_euclidean"
    latent_dim: int | None = None  # d_c; defaults to H // 4
    encoder_widths: tuple | None = None  # defaults to (H, H // 2, d_c)
    decoder_widths: tuple | None = None  # defaults to (H // 2, H, H)
    straight_through: bool = True
    linear_encoder_output: bool = False
    linear_decoder_output: bool = False
    init: str = "uniform"  # encoder/decoder weight init
    usage_rebalance: bool = False
    rebalance_patience: int = 100

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("dmm.m must be >= 1")
        if self.beta < 0:
            raise ConfigError("dmm.beta must be >= 0")
        if self.metric not in METRICS:
            raise ConfigError(f"dmm.metric must be one of {METRICS}")
        if self.rebalance_patience < 0:
            raise ConfigError("dmm.rebalance_patience must be >= 0")
        if self.init not in INITS:
            raise ConfigError(f"dmm.init must be one of {INITS}")

    def resolve(self, hidden):
        """Concrete ``(encoder_widths, decoder_widths)`` for projection width ``hidden``."""
        d_c = self.latent_dim or max(1, hidden // 4)
        enc = tuple(self.encoder_widths) if self.encoder_widths else (hidden, max(1, hidden // 2), d_c)
        dec = tuple(self.decoder_widths) if self.decoder_widths else (max(1, hidden // 2), hidden, hidden)
        if enc[-1] != d_c:
            raise ConfigError(f"encoder output width {enc[-1]} must equal codebook width {d_c}")
        if dec[-1] != hidden:
            raise ConfigError(f"decoder output width {dec[-1]} must equal the projection width {hidden}")
        return enc, dec


def _sq_distances(z_e, codebook):
    diff = z_e[:, None, :] - codebook[None, :, :]
    return np.einsum("bmd,bmd->bm", diff, diff)


def _cosine(z_e, codebook):
    zn = np.linalg.norm(z_e, axis=1)
    en = np.linalg.norm(codebook, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = (z_e @ codebook.T) / (zn[:, None] * en[None, :])
    degenerate = (zn == 0) | np.any(en == 0)
    return sim, degenerate


def quantize(z_e, codebook, metric="squared_euclidean"):
    """Nearest code per row: ``(k, z_q)`` with ties going to the lowest index.

    Under ``cosine`` a sample whose similarity is undefined (zero norm) falls
    back to squared Euclidean distance.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if z_e.ndim != 2 or codebook.ndim != 2 or z_e.shape[1] != codebook.shape[1]:
        raise DimensionError(f"quantize: latents {z_e.shape} vs codebook {codebook.shape}")
    k = np.argmin(_sq_distances(z_e, codebook), axis=1)
    if metric == "cosine":
        sim, degenerate = _cosine(z_e, codebook)
        ok = ~degenerate
        if np.any(ok):
            k[ok] = np.argmax(sim[ok], axis=1)
    elif metric != "squared_euclidean":
        raise ConfigError(f"unknown metric {metric!r}")
    return k, codebook[k]


def similarity(z_e, codebook, kind="neg_squared_distance"):
    """Row-wise similarity to every code, used for soft routing weights."""
    if kind == "neg_squared_distance":
        return -_sq_distances(z_e, codebook)
    if kind == "cosine":
        sim, degenerate = _cosine(z_e, codebook)
        if np.any(degenerate):
            sim[degenerate] = -_sq_distances(z_e[degenerate], codebook)
        return sim
    raise ConfigError(f"unknown similarity {kind!r}")


def dmm_loss(z, z_hat, z_e, e_k, beta):
    """Reconstruction + codebook + commitment terms, each a batch mean.

    Returns ``(total, (reconstruction, codebook, commitment))``.  ``z`` must
    already be gradient-stopped.
    """
    rec = ops.loss_mse(z_hat, z)
    cb = ops.loss_mse(ops.stop_gradient(z_e), e_k)
    commit = ops.loss_mse(z_e, ops.stop_gradient(e_k))
    total = rec + cb + beta * commit
    return total, (rec, cb, commit)


@dataclass
class UsageUpdate:
    histogram: np.ndarray
    reinitialised: list


def usage_stats(k, m, staleness, codebook=None, z_e=None, rebalance=False, patience=100, rng=None):
    """Per-code histogram for a batch and in-place staleness bookkeeping.

    With ``rebalance`` on, any code unselected for more than ``patience``
    batches is overwritten by a random latent from the current batch.
    """
    k = np.asarray(k, dtype=np.int64)
    if k.size and (k.min() < 0 or k.max() >= m):
        raise ContractError(f"domain index out of range [0, {m})")
    hist = np.bincount(k, minlength=m)
    used = hist > 0
    staleness[used] = 0
    staleness[~used] += 1
    reinit = []
    if rebalance:
        if codebook is None or z_e is None or rng is None:
            raise ContractError("rebalancing needs the codebook, current latents and an rng")
        for j in np.flatnonzero(staleness > patience):
            codebook[j] = z_e[rng.integers(len(z_e))]
            staleness[j] = 0
            reinit.append(int(j))
    return UsageUpdate(hist, reinit)


def init_codebook(z_e, m, rng):
    """Pick ``m`` distinct latents from a batch, spread out by D^2 sampling.

    Falls back to N(0, 1/sqrt(d_c)) draws when the batch has fewer than ``m``
    distinct rows.
    """
    d_c = z_e.shape[1]
    distinct = np.unique(z_e, axis=0)
    if len(distinct) < m:
        return rng.normal(0.0, 1.0 / np.sqrt(d_c), size=(m, d_c))
    chosen = [int(rng.integers(len(distinct)))]
    d2 = np.sum((distinct - distinct[chosen[0]]) ** 2, axis=1)
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.arange(len(distinct)), chosen)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(len(distinct), p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, np.sum((distinct - distinct[nxt]) ** 2, axis=1))
    return distinct[chosen].copy()


@dataclass
class DMMOutput:
    k: np.ndarray
    z: object  # gradient-stopped input
    z_e: object
    e_k: object
    z_hat: object
    loss: object
    terms: tuple
    reinitialised: list


class DomainMiner:
    """Encoder, codebook and decoder registered under ``dmm.*`` in the store."""

    def __init__(self, store, cfg, hidden, rng):
        self.cfg = cfg
        enc_w, dec_w = cfg.resolve(hidden)
        self.hidden = hidden
        self.latent_dim = enc_w[-1]
        self.encoder = MLPStack(store, "dmm.enc", hidden, enc_w, rng, cfg.linear_encoder_output, cfg.init)
        self.decoder = MLPStack(store, "dmm.dec", self.latent_dim, dec_w, rng, cfg.linear_decoder_output, cfg.init)
        self.codebook = store.add("dmm.codebook", rng.normal(0.0, 1.0 / np.sqrt(self.latent_dim), (cfg.m, self.latent_dim)))
        self.staleness = store.buffers["dmm.staleness"] = np.zeros(cfg.m)
        self.initialised = store.buffers["dmm.initialised"] = np.zeros(1)
        self.rng = rng

    def encode(self, z, training):
        if z.shape[-1] != self.hidden:
            raise DimensionError(f"encoder expects width {self.hidden}, got {z.shape[-1]}")
        return self.encoder(z, training)

    def decode(self, z_e, z_q, training):
        dec_in = ops.straight_through(z_e, z_q) if self.cfg.straight_through else z_q
        return self.decoder(dec_in, training)

    def assign(self, z_e_values):
        return quantize(z_e_values, self.codebook.data, self.cfg.metric)[0]

    def __call__(self, z, training):
        """Mine domains for a batch of projected inputs ``z`` (gradient is stopped here)."""
        z = ops.stop_gradient(z)
        z_e = self.encode(z, training)
        if training and not self.initialised[0]:
            self.codebook.data[...] = init_codebook(z_e.data, self.cfg.m, self.rng)
            self.initialised[0] = 1.0
        k = self.assign(z_e.data)
        e_k = ops.take_rows(self.codebook, k)
        z_hat = self.decode(z_e, e_k, training)
        loss, terms = dmm_loss(z, z_hat, z_e, e_k, self.cfg.beta)
        reinit = []
        if training:
            upd = usage_stats(
                k,
                self.cfg.m,
                self.staleness,
                self.codebook.data,
                z_e.data,
                self.cfg.usage_rebalance,
                self.cfg.rebalance_patience,
                self.rng,
            )
            reinit = upd.reinitialised
        return DMMOutput(k, z, z_e, e_k, z_hat, loss, terms, reinit)
