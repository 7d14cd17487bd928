"""Categorical feature hashing, embedding tables and the input projection."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import re

import numpy as np
import yaml

from .diffcore import ops
from .diffcore.layers import MLPStack
from .errors import ConfigError, DimensionError


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e-3`` style numbers (no dot) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?$|^[-+]?\d+\.\d*$|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."),
)


def load_yaml(text):
    return yaml.load(text, Loader=_Loader)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF

EMBED_INIT_STD = 0.01


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def token_bytes(token) -> bytes:
    if isinstance(token, bytes):
        return token
    if isinstance(token, (bool, np.bool_)):
        token = int(token)
    return str(token).encode("utf-8")


def hash_feature(field_index: int, raw_token, buckets: int) -> int:
    """Bucket of ``raw_token`` in field ``field_index``.

    FNV-1a 64 over the field index as 4 little-endian bytes followed by the
    token bytes, reduced modulo ``buckets``.
    """
    if buckets < 2:
        raise ConfigError(f"hash_buckets must be >= 2, got {buckets}")
    return fnv1a_64(struct.pack("<I", field_index) + token_bytes(raw_token)) % buckets


@dataclass(frozen=True)
class FieldSpec:
    name: str
    role: str = "user"
    buckets: int = 1000
    dim: int = 32

    def __post_init__(self):
        if self.role not in ("user", "item"):
            raise ConfigError(f"field {self.name!r}: role must be 'user' or 'item'")
        if self.buckets < 2:
            raise ConfigError(f"field {self.name!r}: hash_buckets must be >= 2")
        if self.dim < 1:
            raise ConfigError(f"field {self.name!r}: embedding_dim must be >= 1")


@dataclass(frozen=True)
class FeatureSchema:
    fields: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "fields", tuple(self.fields))
        names = [f.name for f in self.fields]
        if not names:
            raise ConfigError("schema needs at least one field")
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate field names in schema: {names}")

    @property
    def names(self):
        return [f.name for f in self.fields]

    @property
    def input_width(self):
        return sum(f.dim for f in self.fields)

    def spans(self, role):
        """Column ranges of the embedded input owned by fields of ``role``."""
        out, lo = [], 0
        for f in self.fields:
            if f.role == role:
                out.append((lo, lo + f.dim))
            lo += f.dim
        return out

    def index_of(self, name):
        try:
            return self.names.index(name)
        except ValueError:
            raise ConfigError(f"schema has no field named {name!r}") from None

    def to_dict(self):
        return {"fields": [asdict(f) for f in self.fields]}

    @classmethod
    def from_dict(cls, data):
        try:
            return cls(tuple(FieldSpec(**f) for f in data["fields"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed schema: {exc}") from None

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(load_yaml(fh))

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()


@dataclass
class FeatureRecord:
    tokens: list
    label: int | None = None
    truth_domain: int | None = None


def hash_tokens(schema, tokens):
    """Row indices for one record's tokens, in schema order."""
    if len(tokens) != len(schema.fields):
        raise DimensionError(f"record has {len(tokens)} tokens, schema has {len(schema.fields)} fields")
    return np.array([hash_feature(i, t, f.buckets) for i, (t, f) in enumerate(zip(tokens, schema.fields))])


def hash_columns(schema, columns):
    """Hash column-wise token arrays, memoising repeated tokens per field."""
    n = len(columns[0]) if columns else 0
    out = np.empty((n, len(schema.fields)), dtype=np.int64)
    for i, (col, f) in enumerate(zip(columns, schema.fields)):
        cache = {}
        for r, tok in enumerate(col):
            idx = cache.get(tok)
            if idx is None:
                idx = cache[tok] = hash_feature(i, tok, f.buckets)
            out[r, i] = idx
    return out


class EmbeddingTables:
    def __init__(self, store, schema, rng):
        self.schema = schema
        self.tables = [
            store.add(f"emb.{f.name}", rng.normal(0.0, EMBED_INIT_STD, size=(f.buckets, f.dim))) for f in schema.fields
        ]

    def __call__(self, index):
        """Embed a ``batch x fields`` matrix of hashed row indices into ``batch x sum(d)``."""
        index = np.asarray(index, dtype=np.int64)
        if index.ndim != 2 or index.shape[1] != len(self.tables):
            raise DimensionError(f"expected batch x {len(self.tables)} indices, got {index.shape}")
        return ops.concat([ops.take_rows(t, index[:, i]) for i, t in enumerate(self.tables)], axis=1)

    def embed_record(self, record):
        return self(hash_tokens(self.schema, record.tokens)[None, :])


class InputProjection:
    """``z = FFN(concat(x_u | x_v))`` as dense -> batch_norm -> prelu blocks."""

    def __init__(self, store, d_in, widths, rng):
        self.stack = MLPStack(store, "proj", d_in, widths, rng)
        self.d_in, self.d_out = d_in, self.stack.d_out

    def __call__(self, x, training):
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"projection expects width {self.d_in}, got {x.shape[-1]}")
        return self.stack(x, training)
