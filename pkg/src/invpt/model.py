"""End-to-end multi-task model and its preliminary-decoders-only baseline."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .decoder import DecoderConfig, DecoderOutput, InvPTDecoder
from .encoder import Encoder, EncoderConfig, tokens_to_map
from .nn import Conv2d, Module
from .prelim import Combine, PrelimDecoder, TaskSpec
from .tensor import Tensor

MODEL_KINDS = ("invpt", "prelim-only")


@dataclass
class ModelOutput:
    prelim: dict[str, Tensor]        # per task, at image resolution
    final: dict[str, Tensor] | None  # None for the baseline
    decoder: DecoderOutput | None = None

    def predictions(self) -> dict[str, Tensor]:
        return self.final if self.final is not None else self.prelim


class FinalHeads(Module):
    """Per-task 1x1 projection then bilinear resize to the image grid."""

    def __init__(self, tasks: list[TaskSpec], c_in: int, rng: np.random.Generator):
        self.tasks = tasks
        self.proj = [Conv2d(c_in, t.channels, 1, rng) for t in tasks]

    def forward(self, features: Tensor, size: tuple[int, int]) -> dict[str, Tensor]:
        nt, c, h, w = features.shape
        n_tasks = len(self.tasks)
        per_task = tc.split(features.reshape(nt // n_tasks, n_tasks, c, h, w), n_tasks, axis=1)
        out = {}
        for task, x, proj in zip(self.tasks, per_task, self.proj):
            y = proj(x.reshape(nt // n_tasks, c, h, w))
            if (h, w) != size:
                y = tc.bilinear_resize(y, *size)
            out[task.name] = y
        return out


class MultiTaskModel(Module):
    def __init__(self, tasks: list[TaskSpec], enc_cfg: EncoderConfig, c_p: int = 32,
                 c0: int = 64, kind: str = "invpt", variant: str = "selective",
                 retention: float = 0.5, heads: int = 1, efa_stages=(1, 2),
                 stages: int = 3, seed: int = 0):
        if kind not in MODEL_KINDS:
            raise tc.ConfigError(f"unknown model kind {kind!r}")
        rng = np.random.default_rng(seed)
        self.tasks = list(tasks)
        self.kind = kind
        self.enc_cfg = enc_cfg
        self.encoder = Encoder(enc_cfg, rng)
        self.prelims = [PrelimDecoder(t, enc_cfg.width, c_p, rng) for t in self.tasks]
        self.dec_cfg = None
        if kind == "invpt":
            self.dec_cfg = DecoderConfig(len(self.tasks), enc_cfg.grid, c0, enc_cfg.width,
                                         variant, retention, heads, tuple(efa_stages), stages)
            self.combine = Combine(self.tasks, c_p, c0, rng)
            self.decoder = InvPTDecoder(self.dec_cfg, rng)
            self.heads = FinalHeads(self.tasks, self.dec_cfg.out_channels, rng)

    def forward(self, images) -> ModelOutput:
        images = tc.as_tensor(images)
        size = images.shape[-2:]
        enc = self.encoder(images)
        enc_map = tokens_to_map(enc.final, *self.enc_cfg.grid)
        outs = [p(enc_map) for p in self.prelims]
        prelim = {t.name: tc.bilinear_resize(pred, *size) for t, (_, pred) in zip(self.tasks, outs)}
        if self.kind == "prelim-only":
            return ModelOutput(prelim, None)
        fc = self.combine(outs)
        dec = self.decoder(fc, enc.taps)
        final = self.heads(dec.features, size)
        return ModelOutput(prelim, final, dec)
