"""Synthetic multi-domain CTR data, CSV log ingestion and dataset splitting."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import ConfigError, ContractError, DataError
from .features import FeatureRecord, FeatureSchema, FieldSpec, hash_columns


@dataclass
class SyntheticConfig:
    """Generator settings.

    Each domain draws every field value from its own Dirichlet-sampled
    categorical (concentration ``concentration``); the last ``shared_fields``
    fields instead share one categorical across all domains.  Labels follow
    ``Bernoulli(sigmoid(b_d + sum_f w_d[f, value_f]))``.  With ``conflict`` on,
    each odd domain negates the preceding even domain's weights (and bias) on
    ``conflict_fields`` (default: every field).
    """

    K: int = 4
    F: int = 8
    V: int = 50
    concentration: float = 0.05
    n: int = 20000
    seed: int = 0
    weight_scale: float = 1.0
    bias_scale: float = 0.0
    shared_fields: int = 0
    shared_concentration: float = 1.0
    shared_weight_scale: float | None = None  # label-weight scale on shared fields; None uses weight_scale
    conflict: bool = False
    conflict_fields: tuple | None = None
    buckets: int = 1000
    embedding_dim: int = 32
    weights: object = None  # optional K x F x V override
    bias: object = None  # optional length-K override

    def __post_init__(self):
        if self.K < 1 or self.F < 1 or self.V < 1 or self.n < 1:
            raise ConfigError("synthetic K, F, V and n must be >= 1")
        if self.concentration <= 0 or self.shared_concentration <= 0:
            raise ConfigError("Dirichlet concentrations must be positive")
        if not 0 <= self.shared_fields <= self.F:
            raise ConfigError("shared_fields must lie in [0, F]")
        if self.conflict_fields is not None:
            self.conflict_fields = tuple(int(f) for f in self.conflict_fields)
        if self.weights is not None:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.K, self.F, self.V):
                raise ConfigError(f"weights override must be K x F x V = {(self.K, self.F, self.V)}")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(self.K)

    def schema(self):
        # first half user-side, second half item-side
        return FeatureSchema(
            tuple(
                FieldSpec(f"f{i}", "user" if i < (self.F + 1) // 2 else "item", self.buckets, self.embedding_dim)
                for i in range(self.F)
            )
        )

    def to_dict(self):
        out = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("weights", "bias")}
        if out["conflict_fields"] is not None:
            out["conflict_fields"] = list(out["conflict_fields"])
        return out

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Dataset:
    """Columnar records: raw tokens, hashed indices, labels and optional truth domains."""

    schema: FeatureSchema
    tokens: np.ndarray  # n x fields, dtype object (str)
    index: np.ndarray  # n x fields, int64 hashed rows
    labels: np.ndarray  # n, float64 in {0, 1}
    truth: np.ndarray | None = None
    provenance: str = "synthetic"
    sample_ids: np.ndarray | None = None
    generator: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if self.index.shape != (n, len(self.schema.fields)):
            raise ContractError("index matrix does not match schema / record count")
        if (self.truth is not None) != (self.provenance == "synthetic"):
            raise ContractError("truth domains must be present iff the dataset is synthetic")
        if self.sample_ids is None:
            self.sample_ids = np.arange(n, dtype=np.int64)

    def __len__(self):
        return len(self.labels)

    def subset(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        return Dataset(
            self.schema,
            self.tokens[rows],
            self.index[rows],
            self.labels[rows],
            None if self.truth is None else self.truth[rows],
            self.provenance,
            self.sample_ids[rows],
            self.generator,
        )

    def record(self, i):
        return FeatureRecord(
            list(self.tokens[i]),
            int(self.labels[i]),
            None if self.truth is None else int(self.truth[i]),
        )

    def records(self):
        return [self.record(i) for i in range(len(self))]

    def to_csv(self, path, label_column="label"):
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = list(self.schema.names) + [label_column]
            if self.truth is not None:
                header.append("truth_domain")
            w.writerow(header)
            for i in range(len(self)):
                row = list(self.tokens[i]) + [int(self.labels[i])]
                if self.truth is not None:
                    row.append(int(self.truth[i]))
                w.writerow(row)
        return path


def _categorical_draws(rng, cdf_rows, n_values):
    u = rng.random(len(cdf_rows))
    v = (u[:, None] > cdf_rows).sum(axis=1)
    return np.minimum(v, n_values - 1)


def generator_tables(cfg: SyntheticConfig):
    """Per-domain field distributions, weights and biases implied by ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    K, F, V = cfg.K, cfg.F, cfg.V
    probs = np.empty((K, F, V))
    n_own = F - cfg.shared_fields
    for f in range(F):
        if f < n_own:
            probs[:, f, :] = rng.dirichlet(np.full(V, cfg.concentration), size=K)
        else:
            probs[:, f, :] = rng.dirichlet(np.full(V, cfg.shared_concentration))
    scales = np.full(F, float(cfg.weight_scale))
    if cfg.shared_weight_scale is not None:
        scales[n_own:] = cfg.shared_weight_scale
    w = rng.standard_normal(size=(K, F, V)) * scales[None, :, None]
    b = rng.normal(0.0, cfg.bias_scale, size=K) if cfg.bias_scale > 0 else np.zeros(K)
    if cfg.conflict:
        cf = list(cfg.conflict_fields) if cfg.conflict_fields is not None else list(range(F))
        for d in range(1, K, 2):
            w[d, cf, :] = -w[d - 1, cf, :]
            b[d] = -b[d - 1]
    if cfg.weights is not None:
        w = cfg.weights.copy()
    if cfg.bias is not None:
        b = cfg.bias.copy()
    return probs, w, b, rng


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    probs, w, b, rng = generator_tables(cfg)
    n = cfg.n
    d = rng.integers(cfg.K, size=n)
    cdf = np.cumsum(probs, axis=2)
    values = np.empty((n, cfg.F), dtype=np.int64)
    for f in range(cfg.F):
        values[:, f] = _categorical_draws(rng, cdf[d, f, :], cfg.V)
    logit = b[d] + w[d[:, None], np.arange(cfg.F)[None, :], values].sum(axis=1)
    labels = (rng.random(n) < expit(logit)).astype(np.float64)
    schema = cfg.schema()
    tokens = values.astype(str).astype(object)
    index = hash_columns(schema, [tokens[:, f] for f in range(cfg.F)])
    return Dataset(schema, tokens, index, labels, d.astype(np.int64), "synthetic", generator=cfg.to_dict())


def conflict_diagnostics(ds: Dataset, field_index: int, min_count=50):
    """Pooled vs per-domain CTR for each value of one field.

    Returns ``{value: (pooled_ctr, {domain: ctr})}`` for values seen at least
    ``min_count`` times in every domain that uses them.
    """
    if ds.truth is None:
        raise ContractError("conflict diagnostics need truth domains")
    out = {}
    col = ds.tokens[:, field_index]
    for value in np.unique(col):
        rows = col == value
        if rows.sum() < min_count:
            continue
        per = {}
        for dom in np.unique(ds.truth[rows]):
            sel = rows & (ds.truth == dom)
            if sel.sum() >= min_count:
                per[int(dom)] = float(ds.labels[sel].mean())
        out[value] = (float(ds.labels[rows].mean()), per)
    return out


def load_csv(path, schema: FeatureSchema, label_column="label", max_rows=None, truth_column=None):
    """Read a header-first CSV into a :class:`Dataset`; errors name the file line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such CSV file: {path}")
    columns = [[] for _ in schema.fields]
    labels, truth = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file, header row expected", line=1) from None
        pos = {name: i for i, name in enumerate(header)}
        wanted = list(schema.names) + [label_column] + ([truth_column] if truth_column else [])
        missing = [c for c in wanted if c not in pos]
        if missing:
            raise DataError(f"missing column(s) {missing}", line=1)
        for line_no, row in enumerate(reader, start=2):
            if max_rows is not None and len(labels) >= max_rows:
                break
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} columns, found {len(row)}", line=line_no)
            raw = row[pos[label_column]].strip()
            if raw not in ("0", "1"):
                raise DataError(f"label must be 0 or 1, got {raw!r}", line=line_no)
            labels.append(float(raw))
            for i, name in enumerate(schema.names):
                columns[i].append(row[pos[name]])
            if truth_column:
                try:
                    truth.append(int(row[pos[truth_column]]))
                except ValueError:
                    raise DataError(f"truth domain must be an integer, got {row[pos[truth_column]]!r}", line=line_no) from None
    tokens = np.empty((len(labels), len(schema.fields)), dtype=object)
    for i, col in enumerate(columns):
        tokens[:, i] = col
    index = hash_columns(schema, columns)
    labels = np.asarray(labels, dtype=np.float64)
    if truth_column:
        return Dataset(schema, tokens, index, labels, np.asarray(truth, dtype=np.int64), "synthetic")
    return Dataset(schema, tokens, index, labels, None, "csv")


@dataclass
class SplitSpec:
    train: float = 0.8
    val: float = 0.1
    test: float = 0.1
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must be positive and sum to 1, got {fr}")

    def to_dict(self):
        return asdict(self)


def split(ds: Dataset, spec: SplitSpec):
    """Seeded shuffle into (train, val, test); floor sizes, remainder to train."""
    n = len(ds)
    if n == 0:
        raise ContractError("cannot split an empty dataset")
    n_val = int(np.floor(spec.val * n))
    n_test = int(np.floor(spec.test * n))
    n_train = n - n_val - n_test
    perm = np.random.default_rng(spec.seed).permutation(n)
    return (
        ds.subset(np.sort(perm[:n_train])),
        ds.subset(np.sort(perm[n_train : n_train + n_val])),
        ds.subset(np.sort(perm[n_train + n_val :])),
    )
