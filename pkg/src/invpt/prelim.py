"""Task-specific preliminary decoders and the multi-task token sequence."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .nn import Conv2d, ConvBNReLU, Linear, Module
from .tensor import ConfigError, DimensionError, Tensor

METRIC_DIRECTION = {"miou": False, "rmse": True, "merr": True, "f1": False}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    kind: str                 # "categorical" | "continuous"
    channels: int             # classes K for categorical tasks
    metric: str
    weight: float = 1.0

    def __post_init__(self):
        if self.kind == "categorical" and self.channels < 2:
            raise ConfigError(f"task {self.name}: categorical tasks need >= 2 classes")
        if self.kind == "continuous" and self.channels < 1:
            raise ConfigError(f"task {self.name}: continuous tasks need >= 1 channel")
        if self.kind not in ("categorical", "continuous"):
            raise ConfigError(f"task {self.name}: unknown kind {self.kind!r}")
        if self.metric not in METRIC_DIRECTION:
            raise ConfigError(f"task {self.name}: unknown metric {self.metric!r}")
        if not self.weight > 0:
            raise ConfigError(f"task {self.name}: loss weight must be positive")

    @property
    def lower_is_better(self) -> bool:
        return METRIC_DIRECTION[self.metric]


@dataclass
class MultiTaskSequence:
    """Tokens of T tasks stacked task-major: rows [t*H*W, (t+1)*H*W) belong
    to task t, raster order within a task. ``data`` is (N, T*H*W, C)."""

    data: Tensor
    tasks: int
    height: int
    width: int

    def __post_init__(self):
        rows = self.data.shape[-2]
        if rows != self.tasks * self.height * self.width:
            raise DimensionError(
                f"{rows} rows != {self.tasks}*{self.height}*{self.width}")

    @property
    def channels(self) -> int:
        return self.data.shape[-1]

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    def to_maps(self) -> Tensor:
        """(N*T, C, H, W): one spatial map per (sample, task)."""
        n, t, h, w, c = self.batch, self.tasks, self.height, self.width, self.channels
        x = self.data.reshape(n, t, h, w, c).transpose(0, 1, 4, 2, 3)
        return x.reshape(n * t, c, h, w)

    @classmethod
    def from_maps(cls, maps: Tensor, tasks: int) -> "MultiTaskSequence":
        nt, c, h, w = maps.shape
        if nt % tasks:
            raise DimensionError(f"{nt} maps are not a multiple of {tasks} tasks")
        n = nt // tasks
        x = maps.reshape(n, tasks, c, h * w).transpose(0, 1, 3, 2)
        return cls(x.reshape(n, tasks * h * w, c), tasks, h, w)

    def task_slices(self) -> list[Tensor]:
        return tc.split(self.data, self.tasks, axis=1)


class PrelimDecoder(Module):
    """Two Conv-BN-ReLU units then a 1x1 conv to the task's output channels."""

    def __init__(self, task: TaskSpec, c_in: int, c_p: int, rng: np.random.Generator):
        self.unit1 = ConvBNReLU(c_in, c_p, rng)
        self.unit2 = ConvBNReLU(c_p, c_p, rng)
        self.head = Conv2d(c_p, task.channels, 1, rng)

    def forward(self, enc_map: Tensor) -> tuple[Tensor, Tensor]:
        feat = self.unit2(self.unit1(enc_map))
        return feat, self.head(feat)


class Combine(Module):
    """Per task: concat features and prediction, project to C0, flatten, stack."""

    def __init__(self, tasks: list[TaskSpec], c_p: int, c0: int, rng: np.random.Generator):
        if c0 % 4:
            raise ConfigError(f"C0 must be divisible by 4, got {c0}")
        if len(tasks) < 2:
            raise ConfigError("the multi-task decoder needs at least 2 tasks")
        self.proj = [Linear(c_p + t.channels, c0, rng) for t in tasks]

    def forward(self, outputs: list[tuple[Tensor, Tensor]]) -> MultiTaskSequence:
        return combine_and_flatten(outputs, self.proj)


def combine_and_flatten(outputs: list[tuple[Tensor, Tensor]], projections) -> MultiTaskSequence:
    rows = []
    n, _, h, w = outputs[0][0].shape
    for (feat, pred), proj in zip(outputs, projections):
        x = tc.concat([feat, pred], axis=1)
        tokens = x.reshape(n, x.shape[1], h * w).transpose(0, 2, 1)
        rows.append(proj(tokens))
    return MultiTaskSequence(tc.concat(rows, axis=1), len(outputs), h, w)
