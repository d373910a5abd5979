"""Analytic FLOP counts for the decoder, plus an instrumented cross-check.

Convention: one multiply-accumulate is 2 FLOPs; softmax and normalisation
cost 5 FLOPs per element; bilinear resize 8 FLOPs per output element; average
pooling 1 FLOP per input element; the fusion blend 3 FLOPs per score.
Elementwise adds, activations, key selection and scatter are not counted.
"""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .decoder import DecoderConfig, InvPTDecoder
from .prelim import MultiTaskSequence
from .tensor import Tensor

CATEGORIES = ("conv", "tconv", "linear", "attn_qk", "attn_av", "pool", "resize",
              "norm", "softmax", "blend")
PAPER_SELECTIVE_DELTA_PCT = -22.51


@dataclass
class FlopsBreakdown:
    variant: str
    retention: float
    counts: Counter = field(default_factory=Counter)   # (scope, category) -> FLOPs

    def add(self, scope: str, category: str, flops: int) -> None:
        if flops:
            self.counts[(scope, category)] += int(flops)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def scope_total(self, scope: str) -> int:
        return sum(v for (s, _), v in self.counts.items() if s == scope)

    def category_total(self, category: str) -> int:
        return sum(v for (_, c), v in self.counts.items() if c == category)

    def attention_matmul(self, stage: int | None = None) -> int:
        keys = ("attn_qk", "attn_av")
        return sum(v for (s, c), v in self.counts.items()
                   if c in keys and (stage is None or s == f"stage{stage}"))

    def scopes(self) -> list[str]:
        return sorted({s for s, _ in self.counts})

    def to_dict(self) -> dict:
        per_scope = {s: {c: v for (ss, c), v in sorted(self.counts.items()) if ss == s}
                     for s in self.scopes()}
        return {"variant": self.variant, "retention": self.retention,
                "total": self.total, "scopes": per_scope,
                "scope_totals": {s: self.scope_total(s) for s in self.scopes()}}


def normalize_counter(counter: Counter) -> Counter:
    """Map raw instrumented keys onto breakdown keys."""
    out: Counter = Counter()
    for (scope, cat), v in counter.items():
        parts = scope.split("/")
        if parts[0] == "decoder":
            parts = parts[1:]
        if not parts:
            continue
        top = parts[0]
        if len(parts) > 1 and parts[1] in ("qk", "av") and cat == "matmul":
            cat = "attn_" + parts[1]
        out[(top, cat)] += v
    return out


def flops_count(cfg: DecoderConfig, batch: int = 1) -> FlopsBreakdown:
    """Closed-form decoder FLOPs for one configuration."""
    out = FlopsBreakdown(cfg.variant, cfg.retention)
    T, n = cfg.tasks, batch
    h0, w0 = cfg.grid
    c_e = cfg.encoder_width
    heads = cfg.heads
    n_k = cfg.key_tokens
    for g in cfg.plan:
        s = g.stage
        scope = f"stage{s}"
        H, W = g.grid
        C = g.width
        if g.up > 1:
            out.add(scope, "resize", 8 * n * T * g.in_channels * H * W)
            out.add(scope, "conv", 2 * n * T * C * H * W * g.in_channels * 9)
            out.add(scope, "norm", 5 * n * T * C * H * W)
        if s in cfg.efa_stages:
            scale = 2 ** s
            if scale > 1:
                out.add(scope, "tconv", 2 * n * c_e * h0 * w0 * c_e * scale * scale)
            out.add(scope, "conv", 2 * n * C * H * W * c_e * 9)
        out.add(scope, "norm", 5 * n * T * H * W * C)
        qh, qw = g.q_grid
        n_q = T * qh * qw
        out.add(scope, "conv", 2 * n * T * C * qh * qw * C * 9)
        out.add(scope, "pool", n * T * C * H * W)
        out.add(scope, "linear", 2 * n * (n_q + 2 * n_k) * C * C)
        has_msg = s > 0
        if has_msg:
            out.add(scope, "resize", 8 * n * heads * n_q * n_k)
        used = cfg.kept_keys if (has_msg and cfg.variant == "selective") else n_k
        d = C // heads
        out.add(scope, "attn_qk", 2 * n * heads * n_q * used * d)
        if has_msg and cfg.variant == "fusion":
            out.add(scope, "blend", 3 * n * heads * n_q * n_k)
        out.add(scope, "softmax", 5 * n * heads * n_q * used)
        out.add(scope, "attn_av", 2 * n * heads * n_q * used * d)
        out.add(scope, "resize", 8 * n * T * C * H * W)
    hf, wf = cfg.out_grid
    c_out = cfg.out_channels
    for g in cfg.plan:
        H, W = g.grid
        if (H, W) != (hf, wf):
            out.add("output", "resize", 8 * n * T * g.width * hf * wf)
        out.add("output", "conv", 2 * n * T * c_out * hf * wf * g.width)
    out.add("output", "conv", 2 * n * T * c_out * hf * wf * c_out * 9)
    out.add("output", "norm", 5 * n * T * c_out * hf * wf)
    return out


def measure_flops(cfg: DecoderConfig, batch: int = 1, seed: int = 0) -> FlopsBreakdown:
    """Run the decoder once and tally what the ops themselves report."""
    rng = np.random.default_rng(seed)
    dec = InvPTDecoder(cfg, rng)
    h0, w0 = cfg.grid
    fc = MultiTaskSequence(Tensor(rng.normal(size=(batch, cfg.tasks * h0 * w0, cfg.c0))),
                           cfg.tasks, h0, w0)
    taps = [Tensor(rng.normal(size=(batch, h0 * w0, cfg.encoder_width))) for _ in range(3)]
    with tc.no_grad(), tc.count_flops() as counter:
        dec(fc, taps)
    out = FlopsBreakdown(cfg.variant, cfg.retention)
    out.counts = normalize_counter(counter)
    return out


def relative_change(variant: FlopsBreakdown, reference: FlopsBreakdown) -> float:
    """Percent change of total FLOPs against a reference breakdown."""
    return 100.0 * (variant.total - reference.total) / reference.total


def breakdowns_csv(breakdowns: list[FlopsBreakdown]) -> str:
    """Columns: variant, retention, scope, category, flops (one row per entry,
    then a ``total`` row per variant)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "retention", "scope", "category", "flops"])
    for b in breakdowns:
        for (scope, cat), v in sorted(b.counts.items()):
            w.writerow([b.variant, b.retention, scope, cat, v])
        w.writerow([b.variant, b.retention, "all", "total", b.total])
    return buf.getvalue()
