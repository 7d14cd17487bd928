"""Co-training loop: mining loss plus task loss, AdamW, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .diffcore import OptimizerConfig, adamw_step_groups, backward, ops
from .errors import ConfigError, ContractError, TrainingError
from .metrics import metrics_report

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 5
    batch_size: int = 256
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    patience: int = 1
    deterministic: bool = True
    dropout: float = 0.0
    dmm_warmup_batches: int = 0
    dmm_learning_rate: float | None = None  # learning rate of the dmm.* group; None shares the main rate
    eval_batch_size: int = 4096
    max_batches_per_epoch: int | None = None
    # loss ablations: a disabled term is dropped from the graph and its
    # parameter group is not stepped
    use_task_loss: bool = True
    use_dmm_loss: bool = True

    def __post_init__(self):
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        if self.epochs < 1:
            raise ConfigError("training.epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("training.batch_size must be >= 2")
        if self.patience < 0:
            raise ConfigError("training.patience must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("training.dropout must lie in [0, 1)")
        if self.dmm_learning_rate is not None and self.dmm_learning_rate < 0:
            raise ConfigError("training.dmm_learning_rate must be >= 0")
        if self.dmm_warmup_batches < 0:
            raise ConfigError("training.dmm_warmup_batches must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        data = dict(data)
        opt = {}
        for key in ("learning_rate", "weight_decay", "beta1", "beta2", "epsilon"):
            if key in data:
                opt[key] = data.pop(key)
        if opt:
            data["optimizer"] = {**dict(data.get("optimizer") or {}), **opt}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LossBreakdown:
    l_d: float
    l_task: float

    @property
    def total(self):
        return self.l_d + self.l_task


def total_loss(l_d, l_task):
    """``L = L_d + L_task`` on graph nodes; either side may be ``None``."""
    if l_d is None:
        return l_task
    if l_task is None:
        return l_d
    return l_d + l_task


@dataclass
class EpochRecord:
    epoch: int
    l_d: float
    l_task: float
    l: float
    val_auc: float
    val_logloss: float
    usage: list


@dataclass
class TrainHistory:
    epochs: list = field(default_factory=list)
    first_batch: LossBreakdown | None = None
    best_epoch: int | None = None
    stopped_early: bool = False
    wall_time: float = 0.0

    @property
    def val_aucs(self):
        return [e.val_auc for e in self.epochs]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "L_d", "L_task", "L", "val_auc", "val_logloss"])
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(v)) for v in (e.l_d, e.l_task, e.l, e.val_auc, e.val_logloss)])
        return path

    def to_dict(self):
        return {
            "epochs": [asdict(e) for e in self.epochs],
            "first_batch": None if self.first_batch is None else asdict(self.first_batch),
            "best_epoch": self.best_epoch,
            "stopped_early": self.stopped_early,
        }


def early_stop(val_aucs, patience):
    """``(stop, best_epoch)`` with 1-based epochs.

    Stops once validation AUC has gone ``patience`` consecutive epochs without
    a strict improvement (``patience = 0`` stops at the first miss).  Ties for
    the best AUC go to the earliest epoch.
    """
    if not val_aucs:
        raise ContractError("early_stop needs at least one recorded epoch")
    best = int(np.argmax(val_aucs))
    since = len(val_aucs) - 1 - best
    return since >= max(patience, 1), best + 1


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for lo in range(0, n, batch_size):
        rows = order[lo : lo + batch_size]
        if len(rows) >= 2:  # batch norm needs two rows in train mode
            yield rows


@dataclass
class Inference:
    probs: np.ndarray
    k: np.ndarray | None
    z: np.ndarray
    z_e: np.ndarray | None


def infer(model, ds, batch_size=4096):
    """Eval-mode forward over a dataset; never mutates model state."""
    probs, ks, zs, zes = [], [], [], []
    for lo in range(0, len(ds), batch_size):
        rows = slice(lo, lo + batch_size)
        truth = None if ds.truth is None else ds.truth[rows]
        out = model.forward(ds.index[rows], False, truth=truth)
        probs.append(out.y_hat.data)
        zs.append(out.z.data)
        if out.k is not None:
            ks.append(out.k)
        if out.dmm is not None:
            zes.append(out.dmm.z_e.data)
    return Inference(
        np.concatenate(probs),
        np.concatenate(ks) if ks else None,
        np.concatenate(zs),
        np.concatenate(zes) if zes else None,
    )


def evaluate(model, ds, batch_size=4096):
    if len(ds) == 0:
        raise ContractError("cannot evaluate an empty split")
    res = infer(model, ds, batch_size)
    return metrics_report(res.probs, ds.labels, res.k, ds.truth)


def train(model, train_ds, val_ds, cfg: TrainConfig, on_epoch=None):
    """Run the co-training loop; returns the model restored to its best-validation-AUC state."""
    if len(train_ds) < 2:
        raise ContractError("training split needs at least two records")
    t0 = time.perf_counter()
    store = model.store
    model.dropout = cfg.dropout
    groups = []
    if cfg.use_task_loss:
        groups.append((model.main_param_names(), cfg.optimizer))
    if cfg.use_dmm_loss and model.dmm_param_names():
        dmm_opt = cfg.optimizer
        if cfg.dmm_learning_rate is not None:
            dmm_opt = replace(cfg.optimizer, learning_rate=cfg.dmm_learning_rate)
        groups.append((model.dmm_param_names(), dmm_opt))
    history = TrainHistory()
    best_state, best_auc = None, -math.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng([cfg.seed, epoch])
        sums = np.zeros(2)
        usage = np.zeros(getattr(model, "n_domains", 0) or 0, dtype=np.int64)
        n_batches = 0
        for bi, rows in enumerate(_batches(len(train_ds), cfg.batch_size, rng)):
            if cfg.max_batches_per_epoch is not None and bi >= cfg.max_batches_per_epoch:
                break
            store.zero_grad()
            override = np.zeros(len(rows), dtype=np.int64) if step < cfg.dmm_warmup_batches else None
            truth = None if train_ds.truth is None else train_ds.truth[rows]
            out = model.forward(train_ds.index[rows], True, truth=truth, route_override=override)
            l_task = ops.loss_ce(out.y_hat, train_ds.labels[rows])
            l_d = out.l_d
            parts = LossBreakdown(0.0 if l_d is None else l_d.item(), l_task.item())
            if not (math.isfinite(parts.l_d) and math.isfinite(parts.l_task)):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: L_d={parts.l_d}, L_task={parts.l_task}"
                )
            loss = total_loss(l_d if cfg.use_dmm_loss else None, l_task if cfg.use_task_loss else None)
            if loss is not None and groups:
                backward(loss)
                adamw_step_groups(store, groups)
            if history.first_batch is None:
                history.first_batch = parts
            sums += (parts.l_d, parts.l_task)
            if out.k is not None and usage.size:
                usage += np.bincount(out.k, minlength=usage.size)
            n_batches += 1
            step += 1
        store.zero_grad()
        means = sums / max(n_batches, 1)
        rep = evaluate(model, val_ds, cfg.eval_batch_size)
        rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[0] + means[1]), rep.auc, rep.logloss, usage.tolist())
        history.epochs.append(rec)
        log.info("epoch %d: L_d=%.4f L_task=%.4f val_auc=%.4f", epoch, rec.l_d, rec.l_task, rec.val_auc)
        if on_epoch is not None:
            on_epoch(rec)
        if rep.auc > best_auc:
            best_auc = rep.auc
            best_state = store.state_dict()
        stop, history.best_epoch = early_stop(history.val_aucs, cfg.patience)
        if stop and epoch < cfg.epochs:
            history.stopped_early = True
            break
    store.load_state_dict(best_state)
    history.wall_time = time.perf_counter() - t0
    return model, history
