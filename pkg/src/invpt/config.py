"""Versioned JSON run configuration.

Unknown keys are rejected at every level, and cross-field constraints are
checked at load time so a bad ablation row fails before any training.
"""
from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .data import SceneConfig
from .decoder import VARIANTS, DecoderConfig
from .encoder import EncoderConfig
from .model import MODEL_KINDS
from .prelim import TaskSpec
from .tensor import ConfigError

SCHEMA_VERSION = 1
LABEL_TASKS = {"semseg": "categorical", "depth": "continuous", "boundary": "categorical"}


@dataclass
class DecoderSection:
    c0: int = 64
    c_p: int = 32
    variant: str = "selective"
    retention: float = 0.5
    heads: int = 1
    efa_stages: list = field(default_factory=lambda: [1, 2])
    stages: int = 3


@dataclass
class TrainSection:
    iters: int = 2000
    batch: int = 4
    lr: float = 2e-3
    weight_decay: float = 1e-6
    poly_power: float = 0.9
    log_every: int = 10


@dataclass
class DataSection:
    train_path: str = "data/train.mtsd"
    test_path: str = "data/test.mtsd"
    train_size: int = 1000
    test_size: int = 100


@dataclass
class EncoderSection:
    patch: int = 4
    depth: int = 8
    width: int = 32
    heads: int = 2


@dataclass
class SceneSection:
    height: int = 32
    width: int = 32
    classes: int = 4
    shapes: int = 3
    noise: float = 0.02


def default_tasks(classes: int = 4) -> list[dict]:
    return [
        {"name": "semseg", "kind": "categorical", "channels": classes, "metric": "miou", "weight": 1.0},
        {"name": "depth", "kind": "continuous", "channels": 1, "metric": "rmse", "weight": 1.0},
        {"name": "boundary", "kind": "categorical", "channels": 2, "metric": "f1", "weight": 1.0},
    ]


@dataclass
class RunConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    model: str = "invpt"
    encoder: EncoderSection = field(default_factory=EncoderSection)
    scene: SceneSection = field(default_factory=SceneSection)
    tasks: list = field(default_factory=default_tasks)
    decoder: DecoderSection = field(default_factory=DecoderSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    out: str = "runs/default"

    # -- derived objects
    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec(**t) for t in self.tasks]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.scene.height, self.scene.width, **dataclasses.asdict(self.encoder))

    def scene_config(self) -> SceneConfig:
        return SceneConfig(**dataclasses.asdict(self.scene))

    def decoder_config(self, **changes) -> DecoderConfig:
        d = self.decoder
        enc = self.encoder_config()
        kw = dict(tasks=len(self.tasks), grid=enc.grid, c0=d.c0, encoder_width=enc.width,
                  variant=d.variant, retention=d.retention, heads=d.heads,
                  efa_stages=tuple(d.efa_stages), stages=d.stages)
        kw.update(changes)
        return DecoderConfig(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> "RunConfig":
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        if self.model not in MODEL_KINDS:
            raise ConfigError(f"model must be one of {MODEL_KINDS}, got {self.model!r}")
        try:
            enc = self.encoder_config()
            self.scene_config()
            specs = self.task_specs()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None
        names = [t.name for t in specs]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate task names {names}")
        for t in specs:
            if t.name not in LABEL_TASKS:
                raise ConfigError(f"task {t.name!r} has no labels in the synthetic data")
            if t.kind != LABEL_TASKS[t.name]:
                raise ConfigError(f"task {t.name!r} must be {LABEL_TASKS[t.name]}")
        seg = next((t for t in specs if t.name == "semseg"), None)
        if seg is not None and seg.channels != self.scene.classes:
            raise ConfigError("semseg channels must equal scene.classes")
        bnd = next((t for t in specs if t.name == "boundary"), None)
        if bnd is not None and bnd.channels != 2:
            raise ConfigError("boundary task must have 2 classes")
        d = self.decoder
        if self.model == "invpt":
            if len(specs) < 2:
                raise ConfigError("the multi-task decoder needs at least 2 tasks")
            if d.c0 % 4:
                raise ConfigError(f"decoder.c0 must be divisible by 4, got {d.c0}")
            h0, w0 = enc.grid
            if h0 % 4 or w0 % 4:
                raise ConfigError(f"encoder grid {h0}x{w0} must be divisible by 4")
            if d.variant not in VARIANTS:
                raise ConfigError(f"decoder.variant must be one of {VARIANTS}")
            if not 0.0 < d.retention <= 1.0:
                raise ConfigError("decoder.retention must lie in (0, 1]")
            if not 1 <= d.stages <= 3:
                raise ConfigError("decoder.stages must be 1, 2 or 3")
            if any(s not in (0, 1, 2) for s in d.efa_stages):
                raise ConfigError("decoder.efa_stages entries must be 0, 1 or 2")
            for c in (d.c0, d.c0 // 2, d.c0 // 4):
                if c % d.heads:
                    raise ConfigError(f"decoder width {c} not divisible by {d.heads} heads")
        tr = self.train
        if tr.iters < 1 or tr.batch < 1 or tr.log_every < 1:
            raise ConfigError("train.iters, train.batch and train.log_every must be positive")
        if tr.lr <= 0 or tr.weight_decay < 0:
            raise ConfigError("train.lr must be positive and train.weight_decay non-negative")
        if self.data.train_size < 1 or self.data.test_size < 1:
            raise ConfigError("data sizes must be positive")
        return self


_SECTIONS = {
    "encoder": EncoderSection,
    "scene": SceneSection,
    "decoder": DecoderSection,
    "train": TrainSection,
    "data": DataSection,
}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        if sub is not None:
            kwargs[name] = _build(sub, value, name)
        else:
            kwargs[name] = copy.deepcopy(value)
    return cls(**kwargs)


_TASK_KEYS = {"name", "kind", "channels", "metric", "weight"}


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    if not isinstance(cfg.tasks, list):
        raise ConfigError("tasks must be a list")
    for t in cfg.tasks:
        if not isinstance(t, dict) or set(t) - _TASK_KEYS or not {"name", "kind", "channels", "metric"} <= set(t):
            raise ConfigError(f"malformed task entry {t!r}")
    _check_types(cfg)
    return cfg.validate()


def _check_types(cfg: RunConfig) -> None:
    def check(obj, where):
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
            if dataclasses.is_dataclass(default):
                check(value, f"{where}{f.name}.")
                continue
            if isinstance(default, bool) or default is None:
                continue
            ok = (isinstance(value, (int, float)) and not isinstance(value, bool)
                  if isinstance(default, float) else isinstance(value, type(default))
                  and not (isinstance(default, int) and isinstance(value, bool)))
            if not ok:
                raise ConfigError(f"{where}{f.name} must be {type(default).__name__}, "
                                  f"got {value!r}")
    check(cfg, "")


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON when possible."""
    raw = copy.deepcopy(raw)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, text = item.split("=", 1)
        try:
            value: Any = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                node[p] = {} if p not in node else node[p]
                if not isinstance(node[p], dict):
                    raise ConfigError(f"override {key!r} descends into a non-object")
            node = node[p]
        node[parts[-1]] = value
    return raw


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                seed: int | None = None, out: str | None = None) -> RunConfig:
    raw = RunConfig().to_dict() if path is None else _read_json(path)
    raw.setdefault("schema_version", SCHEMA_VERSION)
    if overrides:
        raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = out
    return from_dict(raw)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
