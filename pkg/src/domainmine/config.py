"""Run configuration: one YAML file with dotted-path overrides.

Layout::

    data:
      synthetic: {K: 4, F: 8, ...}      # exactly one of synthetic / csv
      csv: {path: logs.csv, label_column: label, max_rows: null, truth_column: null}
    schema: schema.yaml                 # csv only: a path or an inline {fields: [...]}
    split: {train: 0.8, val: 0.1, test: 0.1, seed: 0}
    model: {...}                        # ModelConfig fields
    training: {...}                     # TrainConfig fields
    output_dir: runs/example

Relative paths are resolved against the directory of the config file.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .admm import ModelConfig
from .benchmarks import Benchmark
from .data import SplitSpec, SyntheticConfig, generate_synthetic, load_csv, split
from .errors import ConfigError
from .features import FeatureSchema, load_yaml
from .trainer import TrainConfig

SECTIONS = ("data", "schema", "split", "model", "training", "output_dir")
CSV_KEYS = ("path", "label_column", "max_rows", "truth_column")


def parse_override(text):
    """``"training.seed=7"`` -> ``(["training", "seed"], 7)``; the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} must look like section.key=value")
    path = key.strip().split(".")
    if any(not p for p in path):
        raise ConfigError(f"override {text!r} has an empty path component")
    try:
        value = load_yaml(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: cannot parse value ({exc})") from None
    return path, value


def apply_overrides(raw, overrides):
    out = copy.deepcopy(raw)
    for text in overrides or ():
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            nxt = node.get(part)
            if nxt is None:
                nxt = node[part] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a section")
            node = nxt
        node[path[-1]] = value
    return out


def _section(raw, name):
    val = raw.get(name)
    if val is None:
        return {}
    if not isinstance(val, dict):
        raise ConfigError(f"{name}: expected a mapping, got {type(val).__name__}")
    return val


def _build(name, fn):
    try:
        return fn()
    except ConfigError as exc:
        raise ConfigError(f"{name}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def git_blob_sha1(data: bytes) -> str:
    """Content hash computed the way git hashes a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


@dataclass
class CSVSource:
    path: Path
    label_column: str = "label"
    max_rows: int | None = None
    truth_column: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    training: TrainConfig
    split: SplitSpec
    synthetic: SyntheticConfig | None = None
    csv: CSVSource | None = None
    schema: FeatureSchema | None = None
    output_dir: Path = field(default_factory=lambda: Path("runs"))

    @classmethod
    def from_dict(cls, raw, base_dir="."):
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a mapping")
        unknown = set(raw) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"config: unknown section(s) {sorted(unknown)}")
        base = Path(base_dir)
        data = _section(raw, "data")
        sources = [k for k in ("synthetic", "csv") if data.get(k) is not None]
        extra = set(data) - {"synthetic", "csv"}
        if extra:
            raise ConfigError(f"data: unknown key(s) {sorted(extra)}")
        if len(sources) != 1:
            raise ConfigError("data: exactly one of 'synthetic' or 'csv' is required")
        synthetic = csv_src = schema = None
        if sources[0] == "synthetic":
            synthetic = _build("data.synthetic", lambda: SyntheticConfig.from_dict(dict(data["synthetic"])))
            if raw.get("schema") is not None:
                raise ConfigError("schema: synthetic data defines its own schema; remove this section")
            schema = synthetic.schema()
        else:
            spec = data["csv"]
            if not isinstance(spec, dict) or "path" not in spec:
                raise ConfigError("data.csv: a 'path' entry is required")
            bad = set(spec) - set(CSV_KEYS)
            if bad:
                raise ConfigError(f"data.csv: unknown key(s) {sorted(bad)}")
            csv_src = CSVSource(**{**spec, "path": base / spec["path"]})
            if not csv_src.path.exists():
                raise ConfigError(f"data.csv.path: file not found: {csv_src.path}")
            schema = _load_schema(raw.get("schema"), base)
        model = _build("model", lambda: ModelConfig.from_dict(_section(raw, "model")))
        training = _build("training", lambda: TrainConfig.from_dict(_section(raw, "training")))
        split_spec = _build("split", lambda: SplitSpec(**_section(raw, "split")))
        if model.route_source == "field":
            _build("model.hd_field", lambda: schema.index_of(model.hd_field))
        if model.route_source == "truth" and synthetic is None and (csv_src is None or not csv_src.truth_column):
            raise ConfigError("model.route_source: 'truth' routing needs data with truth domains")
        out = Path(raw.get("output_dir") or "runs")
        return cls(model, training, split_spec, synthetic, csv_src, schema, out if out.is_absolute() else base / out)

    @classmethod
    def load(cls, path, overrides=()):
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = load_yaml(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config: invalid YAML ({exc})") from None
        return cls.from_dict(apply_overrides(raw, overrides), path.parent)

    @classmethod
    def from_benchmark(cls, bench: Benchmark, output_dir="runs"):
        return cls(bench.model, bench.training, bench.split, bench.data, None, bench.data.schema(), Path(output_dir))

    def to_dict(self):
        """Fully resolved config with every default filled in."""
        if self.synthetic is not None:
            data = {"synthetic": self.synthetic.to_dict()}
        else:
            data = {"csv": {**self.csv.__dict__, "path": str(self.csv.path)}}
        out = {
            "data": data,
            "split": self.split.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "output_dir": str(self.output_dir),
        }
        if self.csv is not None:
            out["schema"] = self.schema.to_dict()
        return out

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def content_hash(self):
        """Hash of the resolved config minus the output location."""
        resolved = self.to_dict()
        resolved.pop("output_dir")
        blob = json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return git_blob_sha1(blob)

    @property
    def seed(self):
        return self.training.seed

    def load_dataset(self):
        if self.synthetic is not None:
            return generate_synthetic(self.synthetic)
        c = self.csv
        return load_csv(c.path, self.schema, c.label_column, c.max_rows, c.truth_column)

    def splits(self):
        return split(self.load_dataset(), self.split)


def _load_schema(spec, base):
    if spec is None:
        raise ConfigError("schema: required for csv data (a path or an inline mapping)")
    if isinstance(spec, str):
        path = base / spec
        if not path.exists():
            raise ConfigError(f"schema: file not found: {path}")
        return _build("schema", lambda: FeatureSchema.load(path))
    if isinstance(spec, dict):
        return _build("schema", lambda: FeatureSchema.from_dict(spec))
    raise ConfigError("schema: expected a path or a mapping")
