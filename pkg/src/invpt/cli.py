"""Command-line entry point: ``invpt <command> [options]``.

Exit codes: 0 ok, 2 config error, 3 data or format error, 4 numerical
failure, 5 gradient check failure.
"""
from __future__ import annotations

import os

# Cap BLAS threads before numpy loads; INVPT_THREADS also bounds row parallelism.
_THREADS = os.environ.get("INVPT_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, _THREADS)

import argparse
import csv
import io
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import plotting
from .config import RunConfig, from_dict, load_config
from .data import FormatError, gen_split, read_dataset, write_dataset
from .flops import (PAPER_SELECTIVE_DELTA_PCT, breakdowns_csv, flops_count, measure_flops,
                    relative_change)
from .gradcheck import gradcheck_suite
from .metrics import UndefinedMetric, delta_m_from_reports
from .tensor import ConfigError, DataError
from .train import NumericalError, evaluate, load_model, metric_directions, train_loop

log = logging.getLogger("invpt")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5


def threads() -> int:
    try:
        n = int(os.environ.get("INVPT_THREADS", "1"))
    except ValueError:
        raise ConfigError("INVPT_THREADS must be an integer") from None
    return max(1, n)


def _dump(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text + "\n")
    return text


def _csv_list(text: str, cast=str) -> list:
    try:
        return [cast(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def _read_samples(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"dataset {path} not found (run gen-data first)")
    return read_dataset(path)


# -- commands --------------------------------------------------------------------------

def gen_data(cfg: RunConfig) -> dict:
    scene = cfg.scene_config()
    n_train, n_test = cfg.data.train_size, cfg.data.test_size
    write_dataset(gen_split(cfg.seed, 0, n_train, scene), cfg.data.train_path)
    write_dataset(gen_split(cfg.seed, n_train, n_test, scene), cfg.data.test_path)
    return {"train": {"path": cfg.data.train_path, "samples": n_train},
            "test": {"path": cfg.data.test_path, "samples": n_test}, "seed": cfg.seed}


def train(cfg: RunConfig, out_dir: str | Path | None = None) -> dict:
    out = Path(out_dir or cfg.out)
    result = train_loop(cfg, _read_samples(cfg.data.train_path), out)
    plotting.loss_curve({cfg.model: result.losses}, out / "loss_curve.png")
    summary = json.loads((out / "train_summary.json").read_text())
    summary["checkpoint"] = str(result.checkpoint)
    return summary


def load_baseline(path: str | Path) -> dict:
    """Metrics of a baseline run: an eval report, or a run directory holding one."""
    path = Path(path)
    if path.is_dir():
        path = path / "metrics.json"
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"baseline metrics {path} not found") from None
    except json.JSONDecodeError as e:
        raise FormatError(f"baseline {path} is not JSON ({e.msg})", e.pos) from None
    return raw.get("metrics", raw)


def evaluate_run(cfg: RunConfig, checkpoint: str | Path | None = None,
                 baseline: dict | None = None, out_dir: str | Path | None = None) -> dict:
    out = Path(out_dir or cfg.out)
    model = load_model(cfg, checkpoint or out / "model.ckpt")
    report = {"metrics": evaluate(model, _read_samples(cfg.data.test_path)),
              "model": cfg.model, "seed": cfg.seed}
    if baseline is not None:
        report["delta_m"] = safe_delta_m(report["metrics"], baseline, cfg)
    _dump(report, out / "metrics.json")
    return report


def safe_delta_m(metrics: dict, baseline: dict, cfg: RunConfig) -> float | None:
    """Gain over the baseline, or None (with a warning) when it is undefined."""
    try:
        return delta_m_from_reports(metrics, baseline, metric_directions(cfg.task_specs()))
    except UndefinedMetric as e:
        log.warning("%s", e)
        return None


def flops_report(cfg: RunConfig, variants: Sequence[str], retentions: Sequence[float],
                 batch: int = 1, measure: bool = False, out_dir: str | Path | None = None) -> dict:
    out = Path(out_dir or cfg.out)
    rows = []
    for v in variants:
        for r in (retentions if v == "selective" else [1.0]):
            dcfg = cfg.decoder_config(variant=v, retention=r)
            b = flops_count(dcfg, batch)
            if measure and measure_flops(dcfg, batch).counts != b.counts:
                raise NumericalError(f"instrumented FLOPs disagree with the closed form for {v}")
            rows.append(b)
    fusion = next((b for b in rows if b.variant == "fusion"), None)
    if fusion is None:
        fusion = flops_count(cfg.decoder_config(variant="fusion"), batch)
    report = {"batch": batch, "breakdowns": [b.to_dict() for b in rows],
              "relative_to_fusion_pct": {f"{b.variant}@{b.retention:g}": relative_change(b, fusion)
                                         for b in rows},
              "reference_selective_pct": PAPER_SELECTIVE_DELTA_PCT}
    _dump(report, out / "flops.json")
    (out / "flops.csv").write_text(breakdowns_csv(rows))
    plotting.flops_bars(rows, out / "flops.png")
    return report


def _row_job(raw: dict, out_dir: str) -> dict:
    cfg = from_dict(raw)
    train(cfg, out_dir)
    return evaluate_run(cfg, out_dir=out_dir)["metrics"]


def compare_variants(cfg: RunConfig, variants: Sequence[str], retentions: Sequence[float],
                     stages: Sequence[int] | None = None, baseline: dict | None = None,
                     out_dir: str | Path | None = None) -> list[dict]:
    """Train and evaluate one seeded run per (stages, variant, retention) row.

    Rows come out in argument order. Without a baseline, the preliminary-only
    model is trained on the same budget and used for the gain column.
    """
    out = Path(out_dir or cfg.out)
    stages = list(stages or [cfg.decoder.stages])
    jobs = []
    for s in stages:
        for v in variants:
            for r in (retentions if v == "selective" else [1.0]):
                raw = cfg.to_dict()
                raw["decoder"].update(variant=v, retention=r, stages=s)
                raw["model"] = "invpt"
                jobs.append((raw, str(out / f"s{s}_{v}_r{r:g}")))
    if baseline is None:
        raw = cfg.to_dict()
        raw["model"] = "prelim-only"
        jobs.append((raw, str(out / "baseline")))
    for raw, _ in jobs:
        from_dict(raw)   # fail fast on a bad row
    workers = min(threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_row_job, *zip(*jobs)))
    else:
        results = [_row_job(raw, d) for raw, d in jobs]
    if baseline is None:
        baseline = results.pop()
        jobs.pop()
    directions = metric_directions(cfg.task_specs())
    rows = []
    for (raw, _), metrics in zip(jobs, results):
        d = raw["decoder"]
        dcfg = cfg.decoder_config(variant=d["variant"], retention=d["retention"], stages=d["stages"])
        flops = flops_count(dcfg)
        dense = flops_count(cfg.decoder_config(variant="fusion", stages=d["stages"]))
        row = {"stages": d["stages"], "variant": d["variant"], "retention": d["retention"]}
        for key in directions:
            task, metric = key.split("/")
            row[key] = metrics[task][metric]
        row["delta_m"] = safe_delta_m(metrics, baseline, cfg)
        row["decoder_flops"] = flops.total
        row["flops_delta_pct"] = relative_change(flops, dense)
        rows.append(row)
    (out / "ablation.csv").write_text(rows_csv(rows))
    _dump({"baseline": baseline, "rows": rows}, out / "ablation.json")
    curves = {Path(d).name: np.load(Path(d) / "loss_curve.npy").tolist() for _, d in jobs}
    plotting.loss_curve(curves, out / "ablation_loss.png")
    if len(stages) > 1:
        by_stage = {}
        for row in rows:
            by_stage.setdefault(row["stages"], {})
            for key in directions:
                task, metric = key.split("/")
                by_stage[row["stages"]].setdefault(task, {})[metric] = row[key]
        plotting.stage_ablation(by_stage, out / "stage_ablation.png")
    return rows


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return buf.getvalue()


# -- argument handling -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="invpt", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (defaults built in)")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted-path override, repeatable")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        return sp

    common(sub.add_parser("gen-data", help="write the synthetic train/test sets"))
    common(sub.add_parser("train", help="train one model"))
    ev = common(sub.add_parser("eval", help="evaluate a checkpoint on the test set"))
    ev.add_argument("--checkpoint")
    ev.add_argument("--single-task-baseline", metavar="PATH",
                    help="baseline metrics JSON (or its run directory) for the gain")
    gc = common(sub.add_parser("gradcheck", help="compare backward with finite differences"))
    gc.add_argument("--scope", choices=["op", "module", "end2end", "all"], default="all")
    fl = common(sub.add_parser("flops", help="decoder FLOPs per variant"))
    fl.add_argument("--variant", default="fusion,selective")
    fl.add_argument("--retention", default=None, help="comma list; default from config")
    fl.add_argument("--batch", type=int, default=1)
    fl.add_argument("--measure", action="store_true",
                    help="also run the decoder and check the instrumented count")
    cp = common(sub.add_parser("compare", help="ablation table over variants/ratios/stages"))
    cp.add_argument("--variants", default="fusion,selective")
    cp.add_argument("--retentions", default="0.25,0.5,0.75")
    cp.add_argument("--stages", default=None, help="comma list of stage counts")
    cp.add_argument("--single-task-baseline", metavar="PATH")
    return p


def run(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = args.config
        if config is None and args.command == "eval":
            # evaluate a run with the config it was trained under
            saved = Path(args.out or load_config().out) / "config.json"
            config = saved if saved.exists() else None
        cfg = load_config(config, args.overrides, args.seed, args.out)
        out = Path(cfg.out)
        if args.command == "gen-data":
            result = gen_data(cfg)
        elif args.command == "train":
            result = train(cfg)
        elif args.command == "eval":
            base = load_baseline(args.single_task_baseline) if args.single_task_baseline else None
            result = evaluate_run(cfg, args.checkpoint, base)
        elif args.command == "gradcheck":
            report = gradcheck_suite(args.scope, cfg.seed)
            _dump(report.to_dict(), out / "gradcheck.json")
            worst = report.worst
            print(f"gradcheck {args.scope}: {'PASS' if report.passed else 'FAIL'} "
                  f"({len(report.checks)} checks, worst {worst.name} rel err {worst.rel_err:.2e})")
            return EXIT_OK if report.passed else EXIT_GRADCHECK
        elif args.command == "flops":
            rets = (_csv_list(args.retention, float) if args.retention
                    else [cfg.decoder.retention])
            result = flops_report(cfg, _csv_list(args.variant), rets, args.batch, args.measure)
            for key, pct in result["relative_to_fusion_pct"].items():
                print(f"{key}: {pct:+.2f}% vs fusion "
                      f"(reference figure {PAPER_SELECTIVE_DELTA_PCT:+.2f}%, direction only)")
        else:
            base = load_baseline(args.single_task_baseline) if args.single_task_baseline else None
            stages = _csv_list(args.stages, int) if args.stages else None
            rows = compare_variants(cfg, _csv_list(args.variants),
                                    _csv_list(args.retentions, float), stages, base)
            sys.stdout.write(rows_csv(rows))
            return EXIT_OK
        print(_dump(result))
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, DataError, UndefinedMetric, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
