"""Three-stage inverted-pyramid decoder with cross-scale self-attention.

Stage 0 works at the encoder grid (H0, W0); stages 1 and 2 are
UP-Transformer blocks that double the grid and halve the channels. The key
token count stays ``T*H0*W0/4`` at every stage because the key/value pooling
stride doubles with the grid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .encoder import tokens_to_map
from .nn import Conv2d, ConvBNReLU, LayerNorm, Linear, Module, TransposedConv2d
from .prelim import MultiTaskSequence
from .tensor import ConfigError, DimensionError, Tensor

VARIANTS = ("fusion", "selective")


@dataclass(frozen=True)
class StageGeometry:
    stage: int
    in_grid: tuple[int, int]      # grid of F_s
    in_channels: int              # C_s
    up: int                       # 1 at stage 0, else 2
    grid: tuple[int, int]         # grid of F'_s
    width: int                    # channels of F'_s, Q, K, V
    pool: int                     # k_s = 2**(s+1)
    q_shape: tuple[int, int]
    k_shape: tuple[int, int]

    @property
    def v_shape(self) -> tuple[int, int]:
        return self.k_shape

    @property
    def q_grid(self) -> tuple[int, int]:
        return self.grid[0] // 2, self.grid[1] // 2


def stage_plan(tasks: int, h0: int, w0: int, c0: int, stages: int = 3) -> list[StageGeometry]:
    if c0 % 4:
        raise ConfigError(f"C0 must be divisible by 4, got {c0}")
    if h0 % 2 or w0 % 2:
        raise ConfigError(f"encoder grid {h0}x{w0} must have even extents")
    if not 1 <= stages <= 3:
        raise ConfigError(f"stage count must be 1..3, got {stages}")
    plan = []
    in_grid, c = (h0, w0), c0
    for s in range(stages):
        up = 1 if s == 0 else 2
        grid = (in_grid[0] * up, in_grid[1] * up)
        width = c if s == 0 else c // 2
        pool = 2 ** (s + 1)
        if grid[0] % pool or grid[1] % pool:
            raise DimensionError(f"stage {s}: pool {pool} does not divide {grid}")
        q_rows = tasks * (grid[0] // 2) * (grid[1] // 2)
        k_rows = tasks * (grid[0] // pool) * (grid[1] // pool)
        plan.append(StageGeometry(s, in_grid, c, up, grid, width, pool,
                                  (q_rows, width), (k_rows, width)))
        in_grid, c = grid, width
    return plan


@dataclass
class DecoderConfig:
    tasks: int
    grid: tuple[int, int]             # (H0, W0)
    c0: int = 64
    encoder_width: int = 32
    variant: str = "selective"
    retention: float = 0.5
    heads: int = 1
    efa_stages: tuple[int, ...] = (1, 2)
    stages: int = 3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}")
        if not 0.0 < self.retention <= 1.0:
            raise ConfigError(f"retention ratio must lie in (0, 1], got {self.retention}")
        if self.tasks < 2:
            raise ConfigError("the decoder needs at least 2 tasks")
        if self.grid[0] % 4 or self.grid[1] % 4:
            raise ConfigError(f"encoder grid {self.grid} must be divisible by 4")
        if any(s not in (0, 1, 2) for s in self.efa_stages):
            raise ConfigError(f"EFA stages must be drawn from 0..2, got {self.efa_stages}")
        self.efa_stages = tuple(self.efa_stages)
        for geo in self.plan:
            if geo.width % self.heads:
                raise ConfigError(f"stage {geo.stage} width {geo.width} not divisible by "
                                  f"{self.heads} heads")

    @property
    def plan(self) -> list[StageGeometry]:
        return stage_plan(self.tasks, self.grid[0], self.grid[1], self.c0, self.stages)

    @property
    def key_tokens(self) -> int:
        return self.tasks * self.grid[0] * self.grid[1] // 4

    @property
    def kept_keys(self) -> int:
        return max(1, math.ceil(self.retention * self.key_tokens - 1e-9))

    @property
    def out_channels(self) -> int:
        return self.c0 // 4

    @property
    def out_grid(self) -> tuple[int, int]:
        return 4 * self.grid[0], 4 * self.grid[1]


@dataclass
class AttentionState:
    """Pre-softmax scores (N, heads, N_q, N_k) with the query grid per task.

    For selective attention ``kept`` holds the (N, heads, k) key indices and
    ``scores`` is already scattered back to full key width.
    """

    scores: Tensor
    tasks: int
    q_grid: tuple[int, int]
    kept: np.ndarray | None = None

    @property
    def n_q(self) -> int:
        return self.scores.shape[-2]

    @property
    def n_k(self) -> int:
        return self.scores.shape[-1]


# -- functional pieces -----------------------------------------------------------

def reshape_and_up(seq: MultiTaskSequence, up: int, conv: Module | None = None) -> MultiTaskSequence:
    """Per task: tokens -> map, bilinear x``up``, optional Conv-BN-ReLU, tokens."""
    if up == 1 and conv is None:
        return seq
    maps = seq.to_maps()
    if up != 1:
        maps = tc.bilinear_resize(maps, seq.height * up, seq.width * up)
    if conv is not None:
        maps = conv(maps)
    return MultiTaskSequence.from_maps(maps, seq.tasks)


def attention_scores(q: Tensor, k: Tensor, width: int) -> Tensor:
    """Q K^T / sqrt(width) over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} != key width {k.shape[-1]}")
    with tc.flop_scope("qk"):
        return (q @ k.T) * (1.0 / math.sqrt(width))


def attention_message_passing(prev: AttentionState) -> Tensor:
    """Upsample the previous scores x2 along the per-task query grid.

    Returns (N, heads, 4*N_q, N_k); the key axis is carried as channels.
    """
    s = prev.scores
    n, h, nq, nk = s.shape
    gh, gw = prev.q_grid
    if nq != prev.tasks * gh * gw:
        raise DimensionError(f"{nq} query rows do not tile {prev.tasks} x {gh}x{gw}")
    x = s.reshape(n, h, prev.tasks, gh, gw, nk).transpose(0, 1, 2, 5, 3, 4)
    x = tc.bilinear_resize(x, 2 * gh, 2 * gw)
    x = x.transpose(0, 1, 2, 4, 5, 3)
    return x.reshape(n, h, prev.tasks * 4 * gh * gw, nk)


def fusion_attention(a: Tensor, message: Tensor | None, alpha1: Tensor | float,
                     alpha2: Tensor | float) -> tuple[Tensor, Tensor]:
    """Blend current scores with the message, then softmax over keys.

    Returns (row-stochastic attention, pre-softmax blend). With no message
    the scores are used as they are.
    """
    if message is None:
        blended = a
    else:
        if message.shape != a.shape:
            raise DimensionError(f"message {message.shape} does not match scores {a.shape}")
        blended = a * alpha1 + message * alpha2
        tc.record_flops("blend", 3 * a.size)
    return tc.softmax_rows(blended), blended


def select_keys(message: Tensor, k: int) -> np.ndarray:
    """Indices of the k keys with the largest column means, per (sample, head)."""
    return tc.topk_indices(message.data.mean(axis=-2), k)


def selective_attention(q: Tensor, k: Tensor, v: Tensor, message: Tensor,
                        retention: float, width: int):
    """Attend only to the keys ranked highest by the incoming message.

    q is (N,h,N_q,d), k and v are (N,h,N_k,d). Returns the attention over the
    kept keys (N,h,N_q,k), the kept values (N,h,k,d), the outgoing message
    scattered to (N,h,N_q,N_k) and the kept indices (N,h,k).
    """
    if not 0.0 < retention <= 1.0:
        raise ConfigError(f"retention ratio must lie in (0, 1], got {retention}")
    n_k = k.shape[-2]
    kk = max(1, math.ceil(retention * n_k - 1e-9))
    idx = select_keys(message, kk)
    rows = idx[..., None]
    k_imp = tc.gather(k, rows, axis=-2)
    v_imp = tc.gather(v, rows, axis=-2)
    scores = attention_scores(q, k_imp, width)
    attn = tc.softmax_rows(scores)
    outgoing = tc.scatter(scores, idx[..., None, :], n_k, axis=-1)
    return attn, v_imp, outgoing, idx


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, rows, c = x.shape
    return x.reshape(n, rows, heads, c // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: Tensor) -> Tensor:
    n, h, rows, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(n, rows, h * d)


# -- modules ---------------------------------------------------------------------

class EncoderFeatureAggregation(Module):
    """Resize an encoder tap to the stage grid, match channels, tile over tasks."""

    def __init__(self, c_e: int, c_out: int, scale: int, rng: np.random.Generator):
        self.scale = scale
        self.resize = TransposedConv2d(c_e, c_e, scale, rng) if scale > 1 else None
        self.conv = Conv2d(c_e, c_out, 3, rng)

    def forward(self, f_up: MultiTaskSequence, tap: Tensor) -> MultiTaskSequence:
        return efa_inject(f_up, tap, self)

    def project(self, tap: Tensor, grid0: tuple[int, int]) -> Tensor:
        x = tokens_to_map(tap, *grid0)
        if self.resize is not None:
            x = self.resize(x)
        return self.conv(x)


def efa_inject(f_up: MultiTaskSequence, tap: Tensor, efa: EncoderFeatureAggregation) -> MultiTaskSequence:
    h, w = f_up.height // efa.scale, f_up.width // efa.scale
    x = efa.project(tap, (h, w))
    n, c, hh, ww = x.shape
    if (hh, ww) != (f_up.height, f_up.width) or c != f_up.channels:
        raise DimensionError(f"EFA produced {(c, hh, ww)}, stage expects "
                             f"{(f_up.channels, f_up.height, f_up.width)}")
    tokens = x.reshape(n, c, hh * ww).transpose(0, 2, 1)
    tiled = tc.concat([tokens] * f_up.tasks, axis=1)
    return MultiTaskSequence(f_up.data + tiled, f_up.tasks, f_up.height, f_up.width)


class UpTransformerBlock(Module):
    def __init__(self, geo: StageGeometry, cfg: DecoderConfig, rng: np.random.Generator):
        self.stage = geo.stage
        self.geo = geo
        self.heads = cfg.heads
        self.variant = cfg.variant
        self.retention = cfg.retention
        c = geo.width
        self.up = ConvBNReLU(geo.in_channels, c, rng) if geo.up > 1 else None
        self.efa = (EncoderFeatureAggregation(cfg.encoder_width, c, 2 ** geo.stage, rng)
                    if geo.stage in cfg.efa_stages else None)
        self.norm = LayerNorm(c)
        self.q_conv = Conv2d(c, c, 3, rng, stride=2, pad=1)
        self.wq = Linear(c, c, rng)
        # a key bias shifts every score in a query row equally, so softmax,
        # the message and the key ranking are all blind to it
        self.wk = Linear(c, c, rng, bias=False)
        self.wv = Linear(c, c, rng)
        if cfg.variant == "fusion" and geo.stage > 0:
            self.alpha1 = tc.parameter(np.array(1.0))
            self.alpha2 = tc.parameter(np.array(0.0))

    def qkv_project(self, fp: MultiTaskSequence) -> tuple[Tensor, Tensor, Tensor]:
        """(N, rows, C) query, key and value token matrices."""
        maps = fp.to_maps()
        if fp.height % 2 or fp.width % 2:
            raise DimensionError(f"query conv needs an even grid, got {fp.height}x{fp.width}")
        q_seq = MultiTaskSequence.from_maps(self.q_conv(maps), fp.tasks)
        kv_seq = MultiTaskSequence.from_maps(tc.avg_pool2d(maps, self.geo.pool), fp.tasks)
        return self.wq(q_seq.data), self.wk(kv_seq.data), self.wv(kv_seq.data)

    def forward(self, seq: MultiTaskSequence, prev: AttentionState | None,
                tap: Tensor | None) -> tuple[MultiTaskSequence, AttentionState]:
        f_up = reshape_and_up(seq, self.geo.up, self.up)
        if self.efa is not None:
            if tap is None:
                raise ValueError(f"stage {self.stage} expects an encoder tap")
            f_up = efa_inject(f_up, tap, self.efa)
        fp = MultiTaskSequence(self.norm(f_up.data), f_up.tasks, f_up.height, f_up.width)
        q, k, v = (_split_heads(t, self.heads) for t in self.qkv_project(fp))
        d = q.shape[-1]
        message = attention_message_passing(prev) if prev is not None else None
        kept = None
        if message is not None and self.variant == "selective":
            attn, values, outgoing, kept = selective_attention(q, k, v, message,
                                                               self.retention, d)
        else:
            a = attention_scores(q, k, d)
            if message is None:
                attn, outgoing = fusion_attention(a, None, 1.0, 0.0)
            else:
                attn, outgoing = fusion_attention(a, message, self.alpha1, self.alpha2)
            values = v
        with tc.flop_scope("av"):
            out = _merge_heads(attn @ values)
        qh, qw = self.geo.q_grid
        out_seq = MultiTaskSequence(out, fp.tasks, qh, qw)
        out_seq = reshape_and_up(out_seq, 2)
        f_next = MultiTaskSequence(out_seq.data + fp.data, fp.tasks, fp.height, fp.width)
        state = AttentionState(outgoing, fp.tasks, (qh, qw), kept)
        return f_next, state


@dataclass
class DecoderOutput:
    features: Tensor                        # (N*T, C_out, 4H0, 4W0)
    stage_outputs: list[MultiTaskSequence] = field(default_factory=list)
    states: list[AttentionState] = field(default_factory=list)


class InvPTDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.blocks = [UpTransformerBlock(g, cfg, rng) for g in cfg.plan]
        c_out = cfg.out_channels
        self.out_proj = [Conv2d(g.width, c_out, 1, rng) for g in cfg.plan]
        self.fuse = ConvBNReLU(c_out, c_out, rng)

    def tap_for_stage(self, taps: list[Tensor], stage: int) -> Tensor | None:
        # deepest tap feeds the coarsest stage
        return taps[2 - stage] if taps else None

    def forward(self, fc: MultiTaskSequence, taps: list[Tensor]) -> DecoderOutput:
        cfg = self.cfg
        seq, state = fc, None
        outputs, states = [], []
        for block in self.blocks:
            with tc.flop_scope(f"stage{block.stage}"):
                seq, state = block(seq, state, self.tap_for_stage(taps, block.stage))
            outputs.append(seq)
            states.append(state)
        hf, wf = cfg.out_grid
        with tc.flop_scope("output"):
            total = None
            for seq_s, proj in zip(outputs, self.out_proj):
                maps = seq_s.to_maps()
                if (seq_s.height, seq_s.width) != (hf, wf):
                    maps = tc.bilinear_resize(maps, hf, wf)
                maps = proj(maps)
                total = maps if total is None else total + maps
            features = self.fuse(total)
        return DecoderOutput(features, outputs, states)
