"""Synthetic multi-task scenes and the MTSD dataset file format.

A scene is a background plus rectangles, disks and triangles painted back to
front. Segmentation, depth and boundary labels are rendered from the same
geometry, so they are mutually consistent by construction.

MTSD layout (all little-endian)::

    b"MTSD"  u32 version=1  u32 count
    per sample: u32 H, u32 W,
                image  3*H*W float64 (C, H, W order)
                semseg H*W   uint16
                depth  H*W   float64
                boundary H*W uint8
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MAGIC = b"MTSD"
VERSION = 1
MASK64 = (1 << 64) - 1

BACKGROUND, RECTANGLE, DISK, TRIANGLE = 0, 1, 2, 3
SHAPE_KINDS = (RECTANGLE, DISK, TRIANGLE)
# base RGB per class; background colour is drawn per scene
CLASS_COLORS = {
    RECTANGLE: (0.85, 0.25, 0.20),
    DISK: (0.20, 0.75, 0.30),
    TRIANGLE: (0.25, 0.35, 0.90),
}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class SceneRng:
    """xorshift64* generator (shifts 12/25/27, multiplier 0x2545F4914F6CDD1D)."""

    MULT = 0x2545F4914F6CDD1D

    def __init__(self, seed: int, stream: int = 0):
        state = splitmix64(splitmix64(seed & MASK64) ^ (stream & MASK64))
        self.state = state or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * self.MULT) & MASK64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0 ** -53)

    def integer(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)


@dataclass(frozen=True)
class SceneConfig:
    height: int = 32
    width: int = 32
    classes: int = 4
    shapes: int = 3
    noise: float = 0.02

    def __post_init__(self):
        if not 3 <= self.classes <= 4:
            raise ValueError(f"classes must be 3 or 4 (background + shape kinds), got {self.classes}")
        if self.shapes < 0 or self.shapes > 9:
            raise ValueError(f"shapes per scene must lie in [0, 9], got {self.shapes}")


@dataclass(frozen=True)
class Shape:
    kind: int
    params: tuple            # rect: (x0,y0,x1,y1); disk: (cx,cy,r); triangle: 3 vertices flat
    color: tuple
    depth: float

    def mask(self, height: int, width: int) -> np.ndarray:
        ys, xs = np.mgrid[0:height, 0:width] + 0.5
        if self.kind == RECTANGLE:
            x0, y0, x1, y1 = self.params
            return (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
        if self.kind == DISK:
            cx, cy, r = self.params
            return (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        if self.kind == TRIANGLE:
            ax, ay, bx, by, cx, cy = self.params
            d1 = (xs - bx) * (ay - by) - (ax - bx) * (ys - by)
            d2 = (xs - cx) * (by - cy) - (bx - cx) * (ys - cy)
            d3 = (xs - ax) * (cy - ay) - (cx - ax) * (ys - ay)
            neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
            pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
            return ~(neg & pos)
        raise ValueError(f"unknown shape kind {self.kind}")


@dataclass
class Sample:
    image: np.ndarray      # (3, H, W) float64 in [0, 1]
    semseg: np.ndarray     # (H, W) uint16
    depth: np.ndarray      # (H, W) float64 in (0, 1]
    boundary: np.ndarray   # (H, W) uint8

    def equals(self, other: "Sample") -> bool:
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays(), other.arrays()))

    def arrays(self):
        return self.image, self.semseg, self.depth, self.boundary


def boundary_from_semseg(semseg: np.ndarray) -> np.ndarray:
    """Pixels whose 4-neighbourhood contains a different class."""
    s = semseg
    b = np.zeros(s.shape, dtype=bool)
    diff_v = s[1:, :] != s[:-1, :]
    diff_h = s[:, 1:] != s[:, :-1]
    b[1:, :] |= diff_v
    b[:-1, :] |= diff_v
    b[:, 1:] |= diff_h
    b[:, :-1] |= diff_h
    return b.astype(np.uint8)


def shape_depth(order: int) -> float:
    """Depth of the ``order``-th shape drawn (0-based); background is 1.0."""
    return round(1.0 - 0.1 * (order + 1), 10)


def render_scene(shapes: Sequence[Shape], height: int, width: int,
                 background: tuple = (0.5, 0.5, 0.5),
                 noise: np.ndarray | None = None) -> Sample:
    image = np.empty((3, height, width))
    image[:] = np.asarray(background, dtype=np.float64)[:, None, None]
    semseg = np.zeros((height, width), dtype=np.uint16)
    depth = np.ones((height, width))
    for shape in shapes:
        m = shape.mask(height, width)
        semseg[m] = shape.kind
        depth[m] = shape.depth
        # nearer shapes are rendered brighter
        shade = 0.55 + 0.5 * (1.0 - shape.depth)
        image[:, m] = (np.asarray(shape.color) * shade)[:, None]
    if noise is not None:
        image = image + noise
    image = np.clip(image, 0.0, 1.0)
    return Sample(image, semseg, depth, boundary_from_semseg(semseg))


def _draw_shape(rng: SceneRng, kind: int, order: int, height: int, width: int) -> Shape:
    s = min(height, width)
    base = CLASS_COLORS[kind]
    color = tuple(min(max(c + rng.uniform(-0.12, 0.12), 0.0), 1.0) for c in base)
    depth = shape_depth(order)
    if kind == RECTANGLE:
        w = rng.uniform(0.2, 0.5) * width
        h = rng.uniform(0.2, 0.5) * height
        x0 = rng.uniform(0, width - w)
        y0 = rng.uniform(0, height - h)
        params = (x0, y0, x0 + w, y0 + h)
    elif kind == DISK:
        r = rng.uniform(0.1, 0.25) * s
        params = (rng.uniform(r, width - r), rng.uniform(r, height - r), r)
    else:
        r = rng.uniform(0.18, 0.32) * s
        cx, cy = rng.uniform(r, width - r), rng.uniform(r, height - r)
        theta = rng.uniform(0, 2 * math.pi)
        pts = []
        for i in range(3):
            a = theta + 2 * math.pi * i / 3 + rng.uniform(-0.3, 0.3)
            pts += [cx + r * math.cos(a), cy + r * math.sin(a)]
        params = tuple(pts)
    return Shape(kind, params, color, depth)


def gen_sample(seed: int, index: int, cfg: SceneConfig = SceneConfig()) -> Sample:
    """Scene ``index`` of the stream identified by ``seed``."""
    rng = SceneRng(seed, index)
    kinds = SHAPE_KINDS[: cfg.classes - 1]
    background = tuple(rng.uniform(0.05, 0.45) for _ in range(3))
    shapes = [_draw_shape(rng, kinds[rng.integer(len(kinds))], i, cfg.height, cfg.width)
              for i in range(cfg.shapes)]
    noise = None
    if cfg.noise > 0:
        noise = np.random.default_rng(rng.next_u64()).normal(
            0.0, cfg.noise, size=(3, cfg.height, cfg.width))
    return render_scene(shapes, cfg.height, cfg.width, background, noise)


def gen_split(seed: int, start: int, count: int, cfg: SceneConfig = SceneConfig()) -> list[Sample]:
    return [gen_sample(seed, start + i, cfg) for i in range(count)]


# -- file format -------------------------------------------------------------------

_HEADER = struct.Struct("<4sII")
_DIMS = struct.Struct("<II")


def encode_dataset(samples: Iterable[Sample]) -> bytes:
    samples = list(samples)
    parts = [_HEADER.pack(MAGIC, VERSION, len(samples))]
    for s in samples:
        _, h, w = s.image.shape
        parts.append(_DIMS.pack(h, w))
        parts.append(np.ascontiguousarray(s.image, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.semseg, dtype="<u2").tobytes())
        parts.append(np.ascontiguousarray(s.depth, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(s.boundary, dtype="u1").tobytes())
    return b"".join(parts)


def write_dataset(samples: Iterable[Sample], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_dataset(samples))


def decode_dataset(buf: bytes) -> list[Sample]:
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version, count = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    samples = []

    def take(nbytes: int, what: str) -> bytes:
        nonlocal off
        if off + nbytes > len(buf):
            raise FormatError(f"truncated {what} of sample {len(samples)}", off)
        chunk = buf[off: off + nbytes]
        off += nbytes
        return chunk

    for _ in range(count):
        h, w = _DIMS.unpack(take(_DIMS.size, "dimensions"))
        n = h * w
        image = np.frombuffer(take(24 * n, "image"), dtype="<f8").reshape(3, h, w)
        semseg = np.frombuffer(take(2 * n, "semseg"), dtype="<u2").reshape(h, w)
        depth = np.frombuffer(take(8 * n, "depth"), dtype="<f8").reshape(h, w)
        boundary = np.frombuffer(take(n, "boundary"), dtype="u1").reshape(h, w)
        samples.append(Sample(image.astype(np.float64), semseg.astype(np.uint16),
                              depth.astype(np.float64), boundary.astype(np.uint8)))
    if off != len(buf):
        raise FormatError(f"{len(buf) - off} trailing bytes", off)
    return samples


def read_dataset(path: str | Path) -> list[Sample]:
    return decode_dataset(Path(path).read_bytes())


@dataclass
class Batch:
    images: np.ndarray               # (N, 3, H, W)
    labels: dict[str, np.ndarray] = field(default_factory=dict)


def collate(samples: Sequence[Sample]) -> Batch:
    """Stack samples; labels keyed by the default toy task names."""
    return Batch(
        np.stack([s.image for s in samples]),
        {
            "semseg": np.stack([s.semseg for s in samples]).astype(np.int64),
            "depth": np.stack([s.depth for s in samples])[:, None],
            "boundary": np.stack([s.boundary for s in samples]).astype(np.int64),
        },
    )
