"""Losses, Adam with polynomial decay, the seeded training loop and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import metrics
from . import tensor as tc
from .checkpoint import read_checkpoint, load_into, save_checkpoint
from .config import RunConfig
from .data import Sample, collate, read_dataset
from .model import ModelOutput, MultiTaskModel
from .nn import Module
from .prelim import TaskSpec
from .tensor import Tensor

log = logging.getLogger(__name__)

SMOOTH_WINDOW = 100


class NumericalError(RuntimeError):
    """Training produced a non-finite loss."""


def task_loss(task: TaskSpec, pred: Tensor, label: np.ndarray) -> Tensor:
    """Mean L1 for continuous tasks, mean cross-entropy (ignore id 255) otherwise."""
    if task.kind == "continuous":
        return tc.l1_loss(pred, label)
    return tc.cross_entropy(pred, label)


@dataclass
class LossReport:
    prelim: dict[str, float]
    final: dict[str, float]
    weights: dict[str, float]

    @property
    def total(self) -> float:
        return sum(w * (self.prelim[t] + self.final.get(t, 0.0)) for t, w in self.weights.items())

    def to_dict(self) -> dict:
        return {"prelim": self.prelim, "final": self.final, "total": self.total}


def total_loss(losses: dict[str, Tensor | float], weights: dict[str, float]) -> Tensor | float:
    """Weighted sum of per-task losses; tasks with weight 0 drop out."""
    total = 0.0
    for name, loss in losses.items():
        w = weights[name]
        if w < 0:
            raise ValueError(f"negative loss weight for {name}")
        if w:
            total = loss * w + total
    return total


def model_loss(model: MultiTaskModel, out: ModelOutput,
               labels: dict[str, np.ndarray]) -> tuple[Tensor, LossReport]:
    per_task, prelim, final = {}, {}, {}
    for task in model.tasks:
        lp = task_loss(task, out.prelim[task.name], labels[task.name])
        prelim[task.name] = lp.item()
        combined = lp
        if out.final is not None:
            lf = task_loss(task, out.final[task.name], labels[task.name])
            final[task.name] = lf.item()
            combined = lp + lf
        per_task[task.name] = combined
    weights = {t.name: t.weight for t in model.tasks}
    return total_loss(per_task, weights), LossReport(prelim, final, weights)


# -- optimiser -------------------------------------------------------------------------

def poly_lr(base: float, it: int, max_iter: int, power: float = 0.9) -> float:
    return base * max(0.0, 1.0 - it / max_iter) ** power


@dataclass
class OptimState:
    lr: float
    max_iter: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-6
    power: float = 0.9
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    def current_lr(self) -> float:
        return poly_lr(self.lr, self.step, self.max_iter, self.power)


def adam_step(params: Sequence[Tensor], state: OptimState) -> float:
    """One bias-corrected Adam update with L2 decay folded into the gradient.

    Uses ``p.grad`` of every parameter (missing grads count as zero) and
    returns the learning rate that was applied.
    """
    lr = state.current_lr()
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if state.weight_decay:
            g = g + state.weight_decay * p.data
        if i not in state.m:
            state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        m, v = state.m[i], state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return lr


# -- training loop ---------------------------------------------------------------------

def build_model(cfg: RunConfig) -> MultiTaskModel:
    d = cfg.decoder
    return MultiTaskModel(cfg.task_specs(), cfg.encoder_config(), c_p=d.c_p, c0=d.c0,
                          kind=cfg.model, variant=d.variant, retention=d.retention,
                          heads=d.heads, efa_stages=tuple(d.efa_stages), stages=d.stages,
                          seed=cfg.seed)


def smoothed(values: Sequence[float], window: int = SMOOTH_WINDOW) -> tuple[float, float]:
    """Mean of the first and of the last ``window`` values."""
    w = min(window, len(values))
    return float(np.mean(values[:w])), float(np.mean(values[-w:]))


@dataclass
class TrainResult:
    out_dir: Path
    losses: list[float]
    model: MultiTaskModel

    @property
    def checkpoint(self) -> Path:
        return self.out_dir / "model.ckpt"

    @property
    def log_path(self) -> Path:
        return self.out_dir / "train_log.jsonl"

    @property
    def smoothed_start_end(self) -> tuple[float, float]:
        return smoothed(self.losses)


def batch_order(seed: int, n: int, iters: int, batch: int) -> np.ndarray:
    """Sample indices for every step: reshuffled each epoch, seeded."""
    rng = np.random.default_rng([seed, 0x5EED])
    need = iters * batch
    chunks = []
    while sum(len(c) for c in chunks) < need:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:need].reshape(iters, batch)


def train_loop(cfg: RunConfig, samples: Sequence[Sample] | None = None,
               out_dir: str | Path | None = None) -> TrainResult:
    out = Path(out_dir or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if samples is None:
        samples = read_dataset(cfg.data.train_path)
    if not samples:
        raise ValueError("training set is empty")
    tr = cfg.train
    model = build_model(cfg).train()
    params = model.parameters()
    state = OptimState(tr.lr, tr.iters, weight_decay=tr.weight_decay, power=tr.poly_power)
    order = batch_order(cfg.seed, len(samples), tr.iters, tr.batch)
    losses: list[float] = []
    (out / "config.json").write_text(cfg.to_json())
    with open(out / "train_log.jsonl", "w") as logf:
        for it in range(tr.iters):
            batch = collate([samples[i] for i in order[it]])
            model.zero_grad()
            result = model(batch.images)
            loss, report = model_loss(model, result, batch.labels)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at iteration {it}: "
                                     f"{report.to_dict()}")
            loss.backward()
            lr = adam_step(params, state)
            losses.append(value)
            if it % tr.log_every == 0 or it == tr.iters - 1:
                rec = {"iter": it, "lr": lr, "prelim": report.prelim, "final": report.final,
                       "total": value}
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                log.info("iter %d loss %.5f lr %.3g", it, value, lr)
    save_checkpoint(model, out / "model.ckpt", meta={"seed": cfg.seed, "iters": tr.iters})
    start, end = smoothed(losses)
    summary = {"iters": tr.iters, "smoothed_start": start, "smoothed_end": end,
               "final_loss": losses[-1]}
    (out / "train_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    np.save(out / "loss_curve.npy", np.asarray(losses))
    return TrainResult(out, losses, model)


def load_model(cfg: RunConfig, checkpoint: str | Path) -> MultiTaskModel:
    model = build_model(cfg)
    _, arrays = read_checkpoint(checkpoint)
    load_into(model, arrays)
    return model.eval()


# -- evaluation ------------------------------------------------------------------------

def predict(model: Module, images: np.ndarray) -> dict[str, np.ndarray]:
    model.eval()
    with tc.no_grad():
        out = model(images).predictions()
    return {name: t.data for name, t in out.items()}


def evaluate(model: MultiTaskModel, samples: Sequence[Sample], batch: int = 16) -> dict:
    """Dataset-level metrics: confusion-based mIoU, pooled RMSE and boundary F1."""
    tasks = {t.name: t for t in model.tasks}
    cm = None
    sq, npx = 0.0, 0
    counts = np.zeros(4, dtype=np.int64)
    for start in range(0, len(samples), batch):
        b = collate(samples[start: start + batch])
        preds = predict(model, b.images)
        if "semseg" in tasks:
            k = tasks["semseg"].channels
            c = metrics.confusion(preds["semseg"].argmax(axis=1), b.labels["semseg"], k)
            cm = c if cm is None else cm + c
        if "depth" in tasks:
            d = preds["depth"] - b.labels["depth"]
            sq += float((d * d).sum())
            npx += d.size
        if "boundary" in tasks:
            counts += metrics.boundary_counts(preds["boundary"].argmax(axis=1) == 1,
                                              b.labels["boundary"] == 1)
    report: dict = {}
    if cm is not None:
        inter = np.diag(cm).astype(float)
        union = cm.sum(0) + cm.sum(1) - np.diag(cm)
        report["semseg"] = {"miou": float(np.mean(inter[union > 0] / union[union > 0]))}
    if npx:
        report["depth"] = {"rmse": math.sqrt(sq / npx)}
    if "boundary" in tasks:
        report["boundary"] = {"f1": metrics.f1_from_counts(*counts.tolist())}
    return report


def metric_directions(tasks: Sequence[TaskSpec]) -> dict[str, bool]:
    return {f"{t.name}/{t.metric}": t.lower_is_better for t in tasks}
