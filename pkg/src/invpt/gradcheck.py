"""Backward-vs-central-difference checks at op, module and decoder scope."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as tc
from .decoder import DecoderConfig, InvPTDecoder
from .encoder import Block
from .nn import Module
from .prelim import Combine, MultiTaskSequence, PrelimDecoder, TaskSpec
from .tensor import Tensor

OP_TOL = 1e-6
END2END_TOL = 1e-5
STEP = 1e-5
MODULE_STEP = 3e-5


@dataclass
class Check:
    name: str
    rel_err: float
    tol: float
    skipped: int = 0     # coordinates whose stencil straddled a kink

    @property
    def passed(self) -> bool:
        return self.rel_err < self.tol


@dataclass
class GradcheckReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def worst(self) -> Check:
        return max(self.checks, key=lambda c: c.rel_err / c.tol)

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [{"name": c.name, "rel_err": c.rel_err, "tol": c.tol,
                            "skipped": c.skipped, "passed": c.passed} for c in self.checks]}


def check_function(f: Callable[..., Tensor], arrays: list[np.ndarray],
                   rng: np.random.Generator, h: float = STEP) -> float:
    """Max over inputs of the relative error of d<w, f(x)>/dx."""
    params = [tc.parameter(a.copy()) for a in arrays]
    out = f(*params)
    w = Tensor(rng.normal(size=out.shape))
    tc.tsum(out * w).backward()
    worst = 0.0
    for i, p in enumerate(params):
        base = [a.copy() for a in arrays]

        def objective(i=i, base=base):
            return tc.tsum(f(*[Tensor(a) for a in base]) * w)

        num = tc.finite_diff_inplace(objective, base[i], h)
        worst = max(worst, tc.rel_error(p.grad if p.grad is not None else 0 * num, num))
    return worst


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[tuple]]]:
    stats = tc.BatchStats.fresh(3)
    labels = rng.integers(0, 4, size=(2, 3, 3))
    labels[0, 0, 0] = tc.IGNORE_INDEX
    target = rng.uniform(-1, 1, size=(2, 5))
    cols = np.array([3, 0, 2])
    place = np.array([[1, 4], [0, 2]])
    return {
        "matmul": (tc.matmul, [(4, 3), (3, 5)]),
        "matmul_batched": (tc.matmul, [(2, 4, 3), (2, 3, 5)]),
        "linear": (tc.linear, [(2, 4, 3), (3, 5), (5,)]),
        "conv2d_3x3_s1": (lambda x, w, b: tc.conv2d(x, w, b, 1, 1), [(2, 3, 5, 5), (4, 3, 3, 3), (4,)]),
        "conv2d_3x3_s2": (lambda x, w: tc.conv2d(x, w, None, 2, 1), [(2, 3, 6, 6), (4, 3, 3, 3)]),
        "conv2d_1x1": (lambda x, w, b: tc.conv2d(x, w, b), [(3, 4, 4), (2, 3, 1, 1), (2,)]),
        "transposed_conv2d_k2": (lambda x, w, b: tc.transposed_conv2d(x, w, b, 2), [(2, 3, 3, 3), (3, 4, 2, 2), (4,)]),
        "transposed_conv2d_k4": (lambda x, w: tc.transposed_conv2d(x, w, None, 4), [(1, 2, 2, 2), (2, 3, 4, 4)]),
        "avg_pool2d": (lambda x: tc.avg_pool2d(x, 2), [(2, 3, 4, 4)]),
        "bilinear_resize_up": (lambda x: tc.bilinear_resize(x, 8, 10), [(2, 3, 4, 5)]),
        "bilinear_resize_down": (lambda x: tc.bilinear_resize(x, 3, 2), [(2, 7, 5)]),
        "softmax_rows": (tc.softmax_rows, [(5, 6)]),
        "layer_norm": (tc.layer_norm, [(4, 6), (6,), (6,)]),
        "batch_norm_train": (lambda x, g, b: tc.batch_norm(x, g, b, stats.running_mean, stats.running_var, True),
                             [(4, 3, 2, 2), (3,), (3,)]),
        "batch_norm_eval": (lambda x, g, b: tc.batch_norm(x, g, b, np.full(3, 0.1), np.full(3, 2.0), False),
                            [(4, 3, 2, 2), (3,), (3,)]),
        "gather_columns": (lambda x: tc.gather_columns(x, cols), [(4, 5)]),
        "scatter": (lambda x: tc.scatter(x, place, 6), [(2, 2)]),
        "reshape": (lambda x: tc.reshape(x, (6, 4)), [(2, 3, 4)]),
        "transpose": (lambda x: tc.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
        "concat": (lambda a, b: tc.concat([a, b, a], axis=1), [(2, 3), (2, 2)]),
        "split": (lambda a: tc.split(a, [1, 2], axis=0)[1], [(3, 2)]),
        "add_broadcast": (tc.add, [(3, 4), (4,)]),
        "mul_broadcast": (tc.mul, [(3, 4), (3, 1)]),
        "scale": (lambda a: tc.scale(a, -2.5), [(3, 4)]),
        "relu": (tc.relu, [(4, 5)]),
        "sum_axis": (lambda a: tc.tsum(a, axis=1), [(3, 4)]),
        "mean": (lambda a: tc.mean(a, axis=0, keepdims=True), [(3, 4)]),
        "cross_entropy": (lambda x: tc.cross_entropy(x, labels), [(2, 4, 3, 3)]),
        "l1_loss": (lambda x: tc.l1_loss(x, target), [(2, 5)]),
    }


def op_sweep(seed: int = 0, h: float = STEP) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, (f, shapes) in _op_cases(rng).items():
        arrays = [rng.uniform(-1, 1, size=s) for s in shapes]
        report.checks.append(Check(name, check_function(f, arrays, rng, h), OP_TOL))
    return report


def check_module(name: str, module: Module, loss_fn: Callable[[], Tensor],
                 inputs: list[Tensor], tol: float, h: float = MODULE_STEP) -> list[Check]:
    """Compare backward with central differences for every parameter and input.

    Coordinates whose stencil flips a ReLU or a top-k pick are left out of
    the comparison and counted in ``Check.skipped``.
    """
    module.zero_grad()
    for t in inputs:
        t.grad = None
    loss_fn().backward()
    checks = []
    named = list(module.named_parameters()) + [(f"input{i}", t) for i, t in enumerate(inputs)]
    for pname, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric, smooth = tc.finite_diff_smooth(loss_fn, p.data, h)
        err = tc.rel_error(analytic[smooth], numeric[smooth])
        checks.append(Check(f"{name}:{pname}", err, tol, int((~smooth).sum())))
    return checks


def jitter_parameters(module: Module, rng: np.random.Generator, std: float = 0.3) -> None:
    """Move every parameter to a generic point.

    At the small-init point batch norm divides by tiny spreads, and central
    differences lose most of their digits there.
    """
    for _, p in module.named_parameters():
        p.data = np.array(p.data + rng.normal(scale=std, size=p.shape))


def micro_decoder_config(variant: str = "fusion", retention: float = 0.5,
                         heads: int = 1, efa_stages=(1, 2)) -> DecoderConfig:
    return DecoderConfig(tasks=2, grid=(4, 4), c0=8, encoder_width=4, variant=variant,
                         retention=retention, heads=heads, efa_stages=efa_stages)


def decoder_check(cfg: DecoderConfig, seed: int = 0, h: float = MODULE_STEP,
                  tol: float = END2END_TOL) -> list[Check]:
    rng = np.random.default_rng(seed)
    dec = InvPTDecoder(cfg, rng)
    jitter_parameters(dec, rng)
    h0, w0 = cfg.grid
    fc_t = tc.parameter(rng.uniform(-1, 1, size=(2, cfg.tasks * h0 * w0, cfg.c0)))
    taps = [tc.parameter(rng.uniform(-1, 1, size=(2, h0 * w0, cfg.encoder_width)))
            for _ in range(3)]

    hf, wf = cfg.out_grid
    # a plain sum is nearly flat: batch norm pins each channel's pre-ReLU sum
    weight = Tensor(rng.normal(size=(2 * cfg.tasks, cfg.out_channels, hf, wf)))

    def loss():
        fc = MultiTaskSequence(fc_t, cfg.tasks, h0, w0)
        return tc.tsum(dec(fc, taps).features * weight)

    used = [taps[2 - s] for s in cfg.efa_stages]
    return check_module(f"decoder[{cfg.variant}]", dec, loss, [fc_t] + used, tol, h)


def module_checks(seed: int = 0, h: float = MODULE_STEP) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = []
    block = Block(8, 2, rng)
    jitter_parameters(block, rng)
    x = tc.parameter(rng.uniform(-1, 1, size=(2, 6, 8)))
    w = Tensor(rng.normal(size=(2, 6, 8)))
    checks += check_module("encoder_block", block, lambda: tc.tsum(block(x) * w), [x], OP_TOL, h)

    tasks = [TaskSpec("a", "categorical", 3, "miou"), TaskSpec("b", "continuous", 1, "rmse")]
    prelims = [PrelimDecoder(t, 4, 5, rng) for t in tasks]
    combine = Combine(tasks, 5, 8, rng)
    holder = _Holder(prelims=prelims, combine=combine)
    jitter_parameters(holder, rng)
    emap = tc.parameter(rng.uniform(-1, 1, size=(2, 4, 4, 4)))
    wseq = Tensor(rng.normal(size=(2, 2 * 16, 8)))

    def prelim_loss():
        seq = combine([p(emap) for p in prelims])
        return tc.tsum(seq.data * wseq)

    checks += check_module("prelim+combine", holder, prelim_loss, [emap], OP_TOL, h)
    return checks


class _Holder(Module):
    def __init__(self, **parts):
        for k, v in parts.items():
            setattr(self, k, v)


def gradcheck_suite(scope: str = "all", seed: int = 0) -> GradcheckReport:
    """scope: ``op``, ``module``, ``end2end`` or ``all``."""
    if scope not in ("op", "module", "end2end", "all"):
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    report = GradcheckReport()
    if scope in ("op", "all"):
        report.checks += op_sweep(seed).checks
    if scope in ("module", "all"):
        report.checks += module_checks(seed)
    if scope in ("end2end", "all"):
        report.checks += decoder_check(micro_decoder_config("fusion"), seed)
        report.checks += decoder_check(micro_decoder_config("selective"), seed)
    return report
