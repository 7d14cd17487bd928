"""Experiment drivers behind the command line: train, evaluate, export, profile, sweep.

Every driver writes into one output directory and finishes by atomically
writing ``manifest.json``, which lists every other file the driver produced.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .admm import build_model
from .config import RunConfig
from .data import load_csv
from .diffcore import load_checkpoint, save_checkpoint
from .errors import ConfigError
from .features import FeatureSchema
from .metrics import cluster_accuracy, nmi, usage_entropy
from .plotting import plot_costs, plot_history, plot_projection, plot_sweep
from .profiler import DEFAULT_PROFILE_BATCH, cost_report, cost_table, matched_mlp_config
from .projection import ProjectionExport, pca_project
from .trainer import evaluate, infer, train

log = logging.getLogger(__name__)

CHECKPOINT = "model.ckpt"
MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


def write_json(path, obj):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)
    return path


@dataclass
class Outputs:
    """Collects the files a command writes so the manifest can list them."""

    root: Path
    files: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def manifest(self, command, run_dict, config_hash, seed, metrics):
        missing = [f for f in self.files if not (self.root / f).exists()]
        if missing:
            raise RuntimeError(f"manifest would list missing files: {missing}")
        body = {
            "command": command,
            "version": __version__,
            "config": run_dict,
            "config_hash": config_hash,
            "seed": seed,
            "files": sorted(self.files),
            "metrics": metrics,
        }
        return write_json(self.root / MANIFEST, body)


def checkpoint_config(run: RunConfig):
    """Resolved config stored inside checkpoints; the output location is left out."""
    out = run.to_dict()
    out.pop("output_dir")
    return out


def save_model(path, model, run: RunConfig, extra=None):
    meta = {
        "config": checkpoint_config(run),
        "config_hash": run.content_hash(),
        "schema": model.schema.to_dict(),
        "schema_digest": model.schema.digest(),
        **(extra or {}),
    }
    return save_checkpoint(path, model.store.state_dict(), meta)


@dataclass
class LoadedModel:
    model: object
    run: RunConfig
    meta: dict


def load_model(path) -> LoadedModel:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    arrays, meta = load_checkpoint(path)
    run = RunConfig.from_dict({**meta["config"], "output_dir": str(path.parent)})
    schema = FeatureSchema.from_dict(meta["schema"])
    model = build_model(schema, run.model, seed=run.seed)
    model.store.load_state_dict(arrays)
    return LoadedModel(model, run, meta)


def _pick_split(run: RunConfig, which):
    if which == "all":
        return run.load_dataset()
    if which not in SPLITS:
        raise ConfigError(f"--split must be one of {SPLITS + ('all',)}")
    return dict(zip(SPLITS, run.splits()))[which]


def _check_schema(loaded: LoadedModel, ds):
    if ds.schema.digest() != loaded.meta["schema_digest"]:
        raise ConfigError("schema mismatch: the data's schema differs from the one the checkpoint was trained on")


# -- train -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: object
    history: object
    metrics: dict
    out: Outputs


def train_run(run: RunConfig, plots=True) -> TrainResult:
    out = Outputs(run.output_dir)
    tr, va, te = run.splits()
    log.info("data: %d train / %d val / %d test records", len(tr), len(va), len(te))
    model = build_model(tr.schema, run.model, seed=run.seed)
    model, history = train(model, tr, va, run.training)
    metrics = {
        "best_epoch": history.best_epoch,
        "stopped_early": history.stopped_early,
        "val": evaluate(model, va, run.training.eval_batch_size).to_dict(),
        "test": evaluate(model, te, run.training.eval_batch_size).to_dict(),
    }
    save_model(out.path(CHECKPOINT), model, run, {"best_epoch": history.best_epoch, "val_auc": metrics["val"]["auc"]})
    history.to_csv(out.path("history.csv"))
    write_json(out.path("metrics.json"), {**metrics, "history": history.to_dict()})
    out.path("config.yaml").write_text(run.to_yaml())
    if plots:
        plot_history(history, out.path("history.png"), title=f"{run.model.kind}, seed {run.seed}")
    out.manifest("train", run.to_dict(), run.content_hash(), run.seed, metrics)
    return TrainResult(model, history, metrics, out)


# -- evaluate ----------------------------------------------------------------


def evaluate_checkpoint(checkpoint, which="test", csv_path=None, label_column="label", out_dir=None):
    """Metrics of a stored model on one split of its own data, or on an external CSV."""
    loaded = load_model(checkpoint)
    if csv_path is not None:
        ds = load_csv(csv_path, loaded.model.schema, label_column)
        which = Path(csv_path).stem
    else:
        ds = _pick_split(loaded.run, which)
    _check_schema(loaded, ds)
    report = evaluate(loaded.model, ds, loaded.run.training.eval_batch_size).to_dict()
    out = Outputs(out_dir or Path(checkpoint).parent / "evaluate")
    write_json(out.path(f"metrics_{which}.json"), report)
    out.manifest("evaluate", loaded.meta["config"], loaded.meta["config_hash"], loaded.run.seed, {which: report})
    return report, out


# -- export-domains ----------------------------------------------------------


def export_domains(checkpoint, stage="post", which="test", out_dir=None, with_latents=False, plots=True):
    loaded = load_model(checkpoint)
    model = loaded.model
    ds = _pick_split(loaded.run, which)
    _check_schema(loaded, ds)
    if model.kind == "mlp":
        raise ConfigError("export-domains: the plain MLP has no domain assignments")
    res = infer(model, ds, loaded.run.training.eval_batch_size)
    if stage == "post":
        if res.z_e is None:
            raise ConfigError("export-domains: --stage post needs a model with a domain miner")
        vectors, tag = res.z_e, "post_encoder"
    elif stage == "pre":
        vectors, tag = res.z, "pre_encoder"
    else:
        raise ConfigError("--stage must be 'pre' or 'post'")
    out = Outputs(out_dir or Path(checkpoint).parent / f"domains_{stage}")
    with open(out.path("domains.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        latent_cols = [f"z_e_{j}" for j in range(res.z_e.shape[1])] if with_latents and res.z_e is not None else []
        w.writerow(["sample_id", "k"] + (["truth_domain"] if ds.truth is not None else []) + latent_cols)
        for i in range(len(ds)):
            row = [int(ds.sample_ids[i]), int(res.k[i])]
            if ds.truth is not None:
                row.append(int(ds.truth[i]))
            if latent_cols:
                row.extend(repr(float(v)) for v in res.z_e[i])
            w.writerow(row)
    export = ProjectionExport(pca_project(vectors, 2), res.k, tag, ds.truth)
    export.to_csv(out.path("projection.csv"))
    if plots:
        plot_projection(export, out.path("projection.png"))
    summary = {"n": len(ds), "stage": tag, "split": which, "usage": np.bincount(res.k, minlength=model.cfg.m).tolist()}
    if ds.truth is not None:
        summary["nmi"] = nmi(res.k, ds.truth)
        if model.cfg.m <= 16:
            summary["cluster_accuracy"] = cluster_accuracy(res.k, ds.truth)
    out.manifest("export-domains", loaded.meta["config"], loaded.meta["config_hash"], loaded.run.seed, summary)
    return export, out


# -- profile -----------------------------------------------------------------


def profile(run: RunConfig, batch_size=DEFAULT_PROFILE_BATCH, checkpoint=None, out_dir=None, plots=True):
    """Cost of the configured model and of the plain MLP matched to its FLOPs."""
    auc = None
    if checkpoint is not None:
        loaded = load_model(checkpoint)
        run, model = loaded.run, loaded.model
        auc = loaded.meta.get("val_auc")
    else:
        model = build_model(run.schema, run.model, seed=run.seed)
    reports = [cost_report(model, batch_size, name=_model_name(run.model), auc=auc)]
    if run.model.kind != "mlp":
        mlp_cfg = matched_mlp_config(model.schema, run.model)
        mlp = build_model(model.schema, mlp_cfg, seed=run.seed)
        reports.append(cost_report(mlp, batch_size, name=f"mlp (width {mlp_cfg.mlp_widths[0]}, FLOPs-matched)"))
    out = Outputs(out_dir or run.output_dir / "profile")
    table = cost_table(reports)
    out.path("cost.txt").write_text(table)
    write_json(out.path("cost.json"), [r.to_dict() for r in reports])
    if plots:
        plot_costs(reports, out.path("cost.png"))
    metrics = {r.model: {"flops": r.flops, "params": r.params} for r in reports}
    out.manifest("profile", run.to_dict(), run.content_hash(), run.seed, metrics)
    return reports, table, out


def _model_name(cfg):
    if cfg.kind == "mlp":
        return "mlp"
    return f"domain-routed ({cfg.route_source}, {cfg.routing}, m={cfg.m})"


# -- sweep-m -----------------------------------------------------------------


def _sweep_one(args):
    run, m = args
    run = replace(run, model=replace(run.model, m=m))
    tr, va, _ = run.splits()
    model = build_model(tr.schema, run.model, seed=run.seed)
    model, history = train(model, tr, va, run.training)
    res = infer(model, va, run.training.eval_batch_size)
    rep = evaluate(model, va, run.training.eval_batch_size)
    return {
        "m": m,
        "val_auc": rep.auc,
        "val_logloss": rep.logloss,
        "nmi": rep.nmi,
        "usage_entropy": None if res.k is None else usage_entropy(res.k, m),
        "best_epoch": history.best_epoch,
    }


def sweep_m(run: RunConfig, m_values, parallel=1, out_dir=None, plots=True):
    """Train one model per codebook size with the base seed; mark the best validation AUC."""
    m_values = [int(m) for m in m_values]
    if not m_values or any(m < 1 for m in m_values) or len(set(m_values)) != len(m_values):
        raise ConfigError("--m-values must be distinct positive integers")
    jobs = [(run, m) for m in m_values]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            rows = list(pool.map(_sweep_one, jobs))
    else:
        rows = [_sweep_one(j) for j in jobs]
    best = max(range(len(rows)), key=lambda i: (rows[i]["val_auc"], -i))
    for i, r in enumerate(rows):
        r["best"] = i == best
    out = Outputs(out_dir or run.output_dir / "sweep_m")
    keys = ["m", "val_auc", "val_logloss", "nmi", "usage_entropy", "best_epoch", "best"]
    with open(out.path("sweep.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in rows:
            w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in keys])
    write_json(out.path("sweep.json"), rows)
    if plots:
        plot_sweep(rows, out.path("sweep.png"))
    out.manifest("sweep-m", run.to_dict(), run.content_hash(), run.seed, {"rows": rows, "best_m": rows[best]["m"]})
    return rows, out


def sweep_table(rows):
    lines = [f"{'m':>4}  {'val_auc':>8}  {'nmi':>6}  {'usage_H':>7}"]
    for r in rows:
        nmi = "-" if r["nmi"] is None else f"{r['nmi']:.3f}"
        ent = "-" if r["usage_entropy"] is None else f"{r['usage_entropy']:.3f}"
        lines.append(f"{r['m']:>4}  {r['val_auc']:>8.4f}  {nmi:>6}  {ent:>7}" + ("  <- best" if r["best"] else ""))
    return "\n".join(lines) + "\n"
