"""Toy ViT-style encoder: patchify, pre-norm attention blocks, layer taps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .nn import LayerNorm, Linear, Module, normal_param
from .tensor import ConfigError, Tensor


@dataclass
class EncoderConfig:
    image_height: int = 32
    image_width: int = 32
    patch: int = 4
    depth: int = 8
    width: int = 32
    heads: int = 2

    def __post_init__(self):
        if self.image_height % self.patch or self.image_width % self.patch:
            raise ConfigError(
                f"patch {self.patch} must divide image {self.image_height}x{self.image_width}")
        if self.depth < 4 or self.depth % 4:
            raise ConfigError(f"encoder depth must be a positive multiple of 4, got {self.depth}")
        if self.width % self.heads:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch, self.image_width // self.patch

    @property
    def tap_layers(self) -> tuple[int, int, int]:
        """1-based block indices after which features are tapped."""
        d = self.depth
        return d // 4, d // 2, 3 * d // 4


@dataclass
class EncoderOutput:
    final: Tensor          # (N, H0*W0, C_e)
    taps: list[Tensor]     # three (N, H0*W0, C_e), shallow to deep


def patchify(images: np.ndarray | Tensor, patch: int) -> Tensor:
    """(N,3,H,W) -> (N, H0*W0, 3*patch*patch), row-major over patches."""
    x = tc.as_tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    n, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"patch {patch} must divide image {h}x{w}")
    h0, w0 = h // patch, w // patch
    x = x.reshape(n, c, h0, patch, w0, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(n, h0 * w0, c * patch * patch)


class PatchEmbed(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        h0, w0 = cfg.grid
        self.patch = cfg.patch
        self.proj = Linear(3 * cfg.patch * cfg.patch, cfg.width, rng)
        self.pos = normal_param(rng, (h0 * w0, cfg.width))

    def forward(self, images) -> Tensor:
        return self.proj(patchify(images, self.patch)) + self.pos


class Attention(Module):
    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        if width % heads:
            raise ConfigError(f"width {width} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng)

    def attention_map(self, x: Tensor) -> tuple[Tensor, Tensor]:
        n, t, c = x.shape
        h = self.heads
        qkv = self.qkv(x).reshape(n, t, 3, h, c // h).transpose(2, 0, 3, 1, 4)
        q, k, v = tc.split(qkv, 3, axis=0)
        q, k, v = (a.reshape(n, h, t, c // h) for a in (q, k, v))
        attn = tc.softmax_rows((q @ k.T) * (1.0 / np.sqrt(c // h)))
        return attn, v

    def forward(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        attn, v = self.attention_map(x)
        y = (attn @ v).transpose(0, 2, 1, 3).reshape(n, t, c)
        return self.out(y)


class Block(Module):
    """Pre-norm transformer block with a 2x-width ReLU MLP."""

    def __init__(self, width: int, heads: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(width)
        self.attn = Attention(width, heads, rng)
        self.norm2 = LayerNorm(width)
        self.fc1 = Linear(width, 2 * width, rng)
        self.fc2 = Linear(2 * width, width, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(tc.relu(self.fc1(self.norm2(x))))


class Encoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng)
        self.blocks = [Block(cfg.width, cfg.heads, rng) for _ in range(cfg.depth)]

    def forward(self, images) -> EncoderOutput:
        x = self.embed(images)
        taps = []
        wanted = set(self.cfg.tap_layers)
        for i, block in enumerate(self.blocks, start=1):
            x = block(x)
            if i in wanted:
                taps.append(x)
        return EncoderOutput(final=x, taps=taps)


def tokens_to_map(tokens: Tensor, height: int, width: int) -> Tensor:
    """(N, H*W, C) -> (N, C, H, W)."""
    n, hw, c = tokens.shape
    if hw != height * width:
        raise tc.DimensionError(f"{hw} tokens do not form a {height}x{width} grid")
    return tokens.reshape(n, height, width, c).transpose(0, 3, 1, 2)
