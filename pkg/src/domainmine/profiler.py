"""Analytical FLOPs and parameter counts for computational-fair comparisons.

Counting convention (forward pass only, per sample, multiplied by batch size):

* dense ``in -> out``: ``2 * in * out`` (one multiply and one add per MAC; the
  bias add is folded into the MAC count)
* batch norm, PReLU, sigmoid, softmax, fusion add: 1 per element
* nearest-code search / distance similarity: ``3 * m * d_c``
* hard routing: one specific map per sample; soft routing: all ``N`` maps plus
  ``2 * N * H`` for the weighted combination
* embedding lookups and the straight-through copy: 0
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .admm import ModelConfig
from .errors import ContractError

CONVENTION = (
    "forward pass only; dense in->out = 2*in*out FLOPs per sample (1 MAC = 2 FLOPs); "
    "batch norm / PReLU / sigmoid / softmax / fusion add = 1 FLOP per element; "
    "quantization = 3*m*d_c per sample; hard routing counts one specific map per sample, soft counts all N"
)
DEFAULT_PROFILE_BATCH = 4096


def dense_flops(d_in, d_out):
    return 2 * d_in * d_out


def block_flops(d_in, d_out):
    """dense -> batch_norm -> prelu."""
    return dense_flops(d_in, d_out) + 2 * d_out


def stack_flops(d_in, widths, linear_last=False):
    total, prev = 0, d_in
    for i, w in enumerate(widths):
        last = i == len(widths) - 1
        total += dense_flops(prev, w) if (linear_last and last) else block_flops(prev, w)
        prev = w
    return total


def flops_breakdown(schema, cfg: ModelConfig):
    """Per-sample FLOPs by module for a model built from ``schema`` and ``cfg``."""
    H = cfg.hidden
    out = {"embedding": 0, "projection": stack_flops(schema.input_width, cfg.proj_widths)}
    proj_out = cfg.proj_widths[-1]
    if cfg.kind == "mlp":
        widths = cfg.mlp_widths or (H,) * cfg.fusion_layers
        out["mlp.hidden"] = stack_flops(proj_out, widths)
        out["head"] = dense_flops(widths[-1], 1) + 1
        return out
    m = cfg.m
    d_c = None
    if cfg.uses_dmm:
        enc, dec = cfg.dmm_config().resolve(H)
        d_c = enc[-1]
        out["dmm.encoder"] = stack_flops(H, enc, linear_last=cfg.linear_encoder_output)
        out["dmm.quantize"] = 3 * m * d_c
        out["dmm.decoder"] = stack_flops(d_c, dec, linear_last=cfg.linear_decoder_output)
    for i in range(cfg.fusion_layers):
        out[f"fusion.{i}.shared"] = block_flops(H, H)
        if cfg.routing == "hard":
            out[f"fusion.{i}.specific"] = dense_flops(H, H)
        else:
            out[f"fusion.{i}.specific"] = m * dense_flops(H, H) + 2 * m * H
        out[f"fusion.{i}.add"] = H
    if cfg.routing == "soft":
        out["routing.soft_weights"] = 3 * m * d_c + m
    out["head"] = dense_flops(H, 1) + 1
    return out


def _param_group(name):
    if name.startswith("emb."):
        return "embedding"
    if name.startswith("proj."):
        return "projection"
    if name.startswith("dmm.enc"):
        return "dmm.encoder"
    if name.startswith("dmm.dec"):
        return "dmm.decoder"
    if name == "dmm.codebook":
        return "dmm.codebook"
    if name.startswith("fusion."):
        parts = name.split(".")
        return ".".join(parts[:3])
    if name.startswith("mlp."):
        return "mlp.hidden"
    if name.startswith("head"):
        return "head"
    return "other"


def count_params(model):
    """Learnable scalars per module (running statistics are not learnable)."""
    out = {}
    for name, p in model.store.params.items():
        g = _param_group(name)
        out[g] = out.get(g, 0) + int(p.data.size)
    return out


def count_flops(model, batch_size=DEFAULT_PROFILE_BATCH):
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    return {k: v * batch_size for k, v in flops_breakdown(model.schema, model.cfg).items()}


@dataclass
class CostReport:
    model: str
    batch_size: int
    flops: int
    params: int
    breakdown: dict = field(default_factory=dict)
    convention: str = CONVENTION
    auc: float | None = None

    def to_dict(self):
        return {
            "model": self.model,
            "batch_size": self.batch_size,
            "flops": self.flops,
            "params": self.params,
            "auc": self.auc,
            "breakdown": self.breakdown,
            "convention": self.convention,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def cost_report(model, batch_size=DEFAULT_PROFILE_BATCH, name=None, auc=None):
    fl = count_flops(model, batch_size)
    pa = count_params(model)
    keys = list(dict.fromkeys(list(fl) + list(pa)))
    breakdown = {k: {"flops": fl.get(k, 0), "params": pa.get(k, 0)} for k in keys}
    return CostReport(
        name or model.kind,
        batch_size,
        sum(v["flops"] for v in breakdown.values()),
        sum(v["params"] for v in breakdown.values()),
        breakdown,
        auc=auc,
    )


def cost_table(reports):
    """Aligned text table (model, FLOPs, params, AUC) sharing totals with the JSON form."""
    if not reports:
        return ""
    batch = reports[0].batch_size
    rows = [("model", "FLOPs", "params", "AUC")]
    for r in reports:
        rows.append((r.model, f"{r.flops:,}", f"{r.params:,}", "-" if r.auc is None else f"{r.auc:.4f}"))
    widths = [max(len(row[i]) for row in rows) for i in range(4)]
    lines = [f"# FLOPs per forward pass at batch {batch}", f"# convention: {CONVENTION}"]
    for j, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def mlp_flops_per_sample(schema, cfg: ModelConfig, width):
    mcfg = ModelConfig(**{**cfg.to_dict(), "kind": "mlp", "mlp_widths": (width,) * cfg.fusion_layers})
    return sum(flops_breakdown(schema, mcfg).values())


def matched_mlp_config(schema, cfg: ModelConfig, tolerance=0.05, max_width=8192):
    """Plain-MLP config whose per-sample FLOPs best match ``cfg``'s.

    The MLP keeps the embedding and projection and uses ``fusion_layers``
    hidden blocks of one shared width, chosen to minimise the FLOPs gap.
    """
    target = sum(flops_breakdown(schema, cfg).values())
    lo, hi = 1, max_width
    while lo < hi:
        mid = (lo + hi) // 2
        if mlp_flops_per_sample(schema, cfg, mid) < target:
            lo = mid + 1
        else:
            hi = mid
    best = min((w for w in (lo - 1, lo) if w >= 1), key=lambda w: abs(mlp_flops_per_sample(schema, cfg, w) - target))
    got = mlp_flops_per_sample(schema, cfg, best)
    if abs(got - target) > tolerance * target:
        raise ContractError(f"no MLP width matches {target} FLOPs within {tolerance:.0%} (best {got})")
    fields = {**cfg.to_dict(), "kind": "mlp", "mlp_widths": (best,) * cfg.fusion_layers}
    return ModelConfig(**fields)
