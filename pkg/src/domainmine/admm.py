"""Shared/domain-specific fusion network routed by the mined domain index."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .diffcore import ParamStore, Tensor, ops
from .diffcore.layers import Dense, FFNBlock, MLPStack, uniform_init
from .dmm import DMMConfig, DomainMiner, similarity
from .errors import ConfigError, ContractError, DimensionError
from .features import EmbeddingTables, FeatureSchema, InputProjection

ROUTE_SOURCES = ("dmm", "field", "truth", "random")
# multipliers for the deterministic "random domain id" hash of a record
_RANDOM_ROUTE_MULT = np.array([0x9E3779B1, 0x85EBCA77, 0xC2B2AE3D, 0x27D4EB2F, 0x165667B1], dtype=np.uint64)


@dataclass
class ModelConfig:
    kind: str = "domain_routed"  # or "mlp"
    hidden: int = 64
    projection_widths: tuple | None = None  # defaults to (hidden,)
    fusion_layers: int = 3
    m: int = 8
    beta: float = 0.25
    metric: str = "squared_euclidean"
    latent_dim: int | None = None
    encoder_widths: tuple | None = None
    decoder_widths: tuple | None = None
    straight_through: bool = True
    linear_encoder_output: bool = False
    linear_decoder_output: bool = False
    dmm_init: str = "uniform"
    usage_rebalance: bool = False
    rebalance_patience: int = 100
    routing: str = "hard"
    similarity: str = "neg_squared_distance"
    route_source: str = "dmm"
    hd_field: str | None = None
    specific_bias: bool = True
    mlp_widths: tuple | None = None  # hidden widths of the plain MLP baseline
    init_seed: int | None = None

    def __post_init__(self):
        for key in ("projection_widths", "encoder_widths", "decoder_widths", "mlp_widths"):
            val = getattr(self, key)
            if val is not None:
                setattr(self, key, tuple(int(v) for v in val))
        if self.kind not in ("domain_routed", "mlp"):
            raise ConfigError("model.kind must be 'domain_routed' or 'mlp'")
        if self.hidden < 1 or self.fusion_layers < 1 or self.m < 1:
            raise ConfigError("model.hidden, model.fusion_layers and model.m must be >= 1")
        if self.routing not in ("hard", "soft"):
            raise ConfigError("model.routing must be 'hard' or 'soft'")
        if self.similarity not in ("neg_squared_distance", "cosine"):
            raise ConfigError("model.similarity must be 'neg_squared_distance' or 'cosine'")
        if self.route_source not in ROUTE_SOURCES:
            raise ConfigError(f"model.route_source must be one of {ROUTE_SOURCES}")
        if self.route_source == "field" and not self.hd_field:
            raise ConfigError("model.hd_field is required when route_source = 'field'")
        if self.routing == "soft" and self.route_source != "dmm":
            raise ConfigError("soft routing needs mined domains (route_source = 'dmm')")
        self.dmm_config()

    @property
    def proj_widths(self):
        return self.projection_widths or (self.hidden,)

    @property
    def uses_dmm(self):
        return self.kind == "domain_routed" and self.route_source == "dmm"

    def dmm_config(self):
        return DMMConfig(
            m=self.m,
            beta=self.beta,
            metric=self.metric,
            latent_dim=self.latent_dim,
            encoder_widths=self.encoder_widths,
            decoder_widths=self.decoder_widths,
            straight_through=self.straight_through,
            linear_encoder_output=self.linear_encoder_output,
            linear_decoder_output=self.linear_decoder_output,
            init=self.dmm_init,
            usage_rebalance=self.usage_rebalance,
            rebalance_patience=self.rebalance_patience,
        )

    def to_dict(self):
        out = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in out.items()}

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**data)


class FusionLayer:
    """Shared FFN block plus ``N`` domain-specific affine maps, summed."""

    def __init__(self, store, index, hidden, n_domains, rng, bias=True):
        self.hidden = hidden
        self.shared = FFNBlock(store, f"fusion.{index}.shared", hidden, hidden, rng)
        self.W = store.add(f"fusion.{index}.specific.W", uniform_init(rng, hidden, (n_domains, hidden, hidden)))
        self.b = store.add(f"fusion.{index}.specific.b", uniform_init(rng, hidden, (n_domains, hidden))) if bias else None

    def shared_forward(self, Z, training):
        if Z.shape[-1] != self.hidden:
            raise DimensionError(f"fusion layer expects width {self.hidden}, got {Z.shape[-1]}")
        return self.shared(Z, training)

    def specific_hard(self, Z, k):
        return ops.routed_affine(Z, self.W, self.b, k)

    def specific_soft(self, Z, weights):
        return ops.mixture_affine(Z, self.W, self.b, weights)


def fuse(o_sh, o_sp):
    if o_sh.shape != o_sp.shape:
        raise DimensionError(f"fuse: shared {o_sh.shape} vs specific {o_sp.shape}")
    return o_sh + o_sp


def soft_weights(z_e, codebook, kind):
    """Softmax routing weights from gradient-free similarities to every code."""
    return ops.softmax(ops.stop_gradient(Tensor(similarity(z_e, codebook, kind))))


class Head:
    """Affine map to one logit followed by a sigmoid."""

    def __init__(self, store, hidden, rng):
        self.hidden = hidden
        self.dense = Dense(store, "head", hidden, 1, rng)

    def __call__(self, O):
        if O.shape[-1] != self.hidden:
            raise DimensionError(f"head expects width {self.hidden}, got {O.shape[-1]}")
        return ops.reshape(ops.sigmoid(self.dense(O)), (-1,))


@dataclass
class ForwardOutput:
    y_hat: object
    k: np.ndarray | None = None
    dmm: object = None
    z: object = None
    layer_outputs: list = field(default_factory=list)

    @property
    def l_d(self):
        return None if self.dmm is None else self.dmm.loss


def random_domain_ids(index, n):
    """A fixed pseudo-random domain id per record, independent of any true domain."""
    idx = np.asarray(index, dtype=np.uint64)
    mult = np.resize(_RANDOM_ROUTE_MULT, idx.shape[1])
    with np.errstate(over="ignore"):
        h = (idx * mult).sum(axis=1, dtype=np.uint64)
        h ^= h >> np.uint64(15)
        h *= np.uint64(0x2C1B3C6D)
        h ^= h >> np.uint64(12)
    return (h % np.uint64(n)).astype(np.int64)


class DomainRoutedModel:
    """Embeddings -> projection -> (mined domain) -> L fusion layers -> head."""

    kind = "domain_routed"

    def __init__(self, schema: FeatureSchema, cfg: ModelConfig, seed=0):
        if cfg.kind != "domain_routed":
            raise ConfigError("DomainRoutedModel needs model.kind = 'domain_routed'")
        self.schema, self.cfg = schema, cfg
        rng = np.random.default_rng(seed if cfg.init_seed is None else cfg.init_seed)
        self.rng = rng
        self.dropout = 0.0  # set by the trainer; applies to shared/specific outputs only
        self.store = ParamStore()
        self.embeddings = EmbeddingTables(self.store, schema, rng)
        self.projection = InputProjection(self.store, schema.input_width, cfg.proj_widths, rng)
        H = self.projection.d_out
        if H != cfg.hidden:
            raise ConfigError(f"projection output width {H} must equal model.hidden {cfg.hidden}")
        self.miner = DomainMiner(self.store, cfg.dmm_config(), H, rng) if cfg.uses_dmm else None
        self.layers = [FusionLayer(self.store, i, H, cfg.m, rng, cfg.specific_bias) for i in range(cfg.fusion_layers)]
        self.head = Head(self.store, H, rng)
        self.hd_index = schema.index_of(cfg.hd_field) if cfg.route_source == "field" else None

    @property
    def n_domains(self):
        return self.cfg.m

    def dmm_param_names(self):
        return self.store.names("dmm.")

    def main_param_names(self):
        return [n for n in self.store.names() if not n.startswith("dmm.")]

    def route(self, index, truth=None):
        """Domain index for non-mined sources."""
        src = self.cfg.route_source
        if src == "field":
            return np.asarray(index)[:, self.hd_index] % self.cfg.m
        if src == "truth":
            if truth is None:
                raise ContractError("route_source = 'truth' needs ground-truth domains")
            truth = np.asarray(truth, dtype=np.int64)
            if truth.min() < 0 or truth.max() >= self.cfg.m:
                raise ContractError(f"truth domains must lie in [0, {self.cfg.m})")
            return truth
        if src == "random":
            return random_domain_ids(index, self.cfg.m)
        raise ContractError("mined domains come from the miner")

    def forward(self, index, training, truth=None, route_override=None):
        x = self.embeddings(index)
        z = self.projection(x, training)
        mined = None
        if self.miner is not None:
            mined = self.miner(z, training)
            k = mined.k
        else:
            k = self.route(index, truth)
        if route_override is not None:
            k = np.asarray(route_override, dtype=np.int64)
        weights = None
        if self.cfg.routing == "soft" and route_override is None:
            weights = soft_weights(mined.z_e.data, self.miner.codebook.data, self.cfg.similarity)
        Z = z
        outs = []
        for layer in self.layers:
            o_sh = ops.dropout(layer.shared_forward(Z, training), self.dropout, self.rng, training)
            o_sp = layer.specific_hard(Z, k) if weights is None else layer.specific_soft(Z, weights)
            o_sp = ops.dropout(o_sp, self.dropout, self.rng, training)
            Z = fuse(o_sh, o_sp)
            outs.append((o_sh, o_sp, Z))
        return ForwardOutput(self.head(Z), k, mined, z, outs)


class MLPBaseline:
    """Embeddings -> projection -> FFN blocks -> head, with no domain routing."""

    kind = "mlp"
    miner = None

    def __init__(self, schema: FeatureSchema, cfg: ModelConfig, seed=0):
        self.schema, self.cfg = schema, cfg
        rng = np.random.default_rng(seed if cfg.init_seed is None else cfg.init_seed)
        self.rng = rng
        self.dropout = 0.0
        self.store = ParamStore()
        self.embeddings = EmbeddingTables(self.store, schema, rng)
        self.projection = InputProjection(self.store, schema.input_width, cfg.proj_widths, rng)
        widths = cfg.mlp_widths or (cfg.hidden,) * cfg.fusion_layers
        self.hidden = MLPStack(self.store, "mlp", self.projection.d_out, widths, rng)
        self.head = Head(self.store, self.hidden.d_out, rng)

    def dmm_param_names(self):
        return []

    def main_param_names(self):
        return self.store.names()

    def forward(self, index, training, truth=None, route_override=None):
        z = self.projection(self.embeddings(index), training)
        h = ops.dropout(self.hidden(z, training), self.dropout, self.rng, training)
        return ForwardOutput(self.head(h), None, None, z)


def build_model(schema, cfg, seed=0):
    return MLPBaseline(schema, cfg, seed) if cfg.kind == "mlp" else DomainRoutedModel(schema, cfg, seed)
