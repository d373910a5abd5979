import csv
import io
import json
import subprocess
import sys

import pytest

from invpt.cli import run
from invpt.config import RunConfig

TINY = {"scene": {"height": 16, "width": 16}, "encoder": {"depth": 4, "width": 8},
        "decoder": {"c0": 8, "c_p": 8}, "train": {"iters": 3, "batch": 2, "log_every": 1},
        "data": {"train_size": 6, "test_size": 4}}


@pytest.fixture
def cfg_file(tmp_path):
    raw = RunConfig().to_dict()
    for k, v in TINY.items():
        raw[k] |= v
    raw["data"] |= {"train_path": str(tmp_path / "data/train.mtsd"),
                    "test_path": str(tmp_path / "data/test.mtsd")}
    raw["out"] = str(tmp_path / "run")
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(raw))
    return path


def invpt(cfg_file, *args):
    cmd, *rest = args
    return run([cmd, "--config", str(cfg_file), *rest])


def test_gen_data_is_reproducible(cfg_file, tmp_path):
    assert invpt(cfg_file, "gen-data", "--seed", "7") == 0
    first = (tmp_path / "data/train.mtsd").read_bytes()
    assert invpt(cfg_file, "gen-data", "--seed", "7") == 0
    assert (tmp_path / "data/train.mtsd").read_bytes() == first
    assert invpt(cfg_file, "gen-data", "--seed", "8") == 0
    assert (tmp_path / "data/train.mtsd").read_bytes() != first


def test_exit_codes(cfg_file, tmp_path, capsys):
    assert invpt(cfg_file, "train", "--set", "decoder.c0=10") == 2
    assert "config error" in capsys.readouterr().err
    assert invpt(cfg_file, "train") == 3
    (tmp_path / "bad.json").write_text("{")
    assert run(["train", "--config", str(tmp_path / "bad.json")]) == 2
    with pytest.raises(SystemExit) as e:
        run(["nonsense"])
    assert e.value.code == 2


def test_flops_reports_both_variants(cfg_file, tmp_path, capsys):
    assert invpt(cfg_file, "flops", "--measure", "--out", str(tmp_path / "f")) == 0
    out = capsys.readouterr().out
    assert "selective@0.5" in out and "fusion@1" in out
    rep = json.loads((tmp_path / "f/flops.json").read_text())
    assert [b["variant"] for b in rep["breakdowns"]] == ["fusion", "selective"]
    assert rep["relative_to_fusion_pct"]["selective@0.5"] < 0
    assert (tmp_path / "f/flops.csv").read_text().startswith("variant,")
    assert (tmp_path / "f/flops.png").stat().st_size > 0


def test_train_then_eval_with_baseline(cfg_file, tmp_path):
    assert invpt(cfg_file, "gen-data") == 0
    base_dir = tmp_path / "base"
    assert invpt(cfg_file, "train", "--set", "model=prelim-only", "--out", str(base_dir)) == 0
    assert run(["eval", "--out", str(base_dir)]) == 0
    base = json.loads((base_dir / "metrics.json").read_text())
    assert base["model"] == "prelim-only"
    assert invpt(cfg_file, "train") == 0
    assert (tmp_path / "run/loss_curve.png").exists()
    good = tmp_path / "good.json"
    good.write_text(json.dumps({"semseg": {"miou": 0.5}, "depth": {"rmse": 0.2},
                                "boundary": {"f1": 0.3}}))
    assert invpt(cfg_file, "eval", "--single-task-baseline", str(good)) == 0
    rep = json.loads((tmp_path / "run/metrics.json").read_text())
    assert set(rep["metrics"]) == {"semseg", "depth", "boundary"}
    assert isinstance(rep["delta_m"], float)
    # a baseline with a zero score has no defined gain; it is reported as null
    zero = tmp_path / "zero.json"
    zero.write_text(json.dumps({"semseg": {"miou": 0.5}, "depth": {"rmse": 0.2},
                                "boundary": {"f1": 0.0}}))
    assert invpt(cfg_file, "eval", "--single-task-baseline", str(zero)) == 0
    assert json.loads((tmp_path / "run/metrics.json").read_text())["delta_m"] is None
    assert invpt(cfg_file, "eval", "--single-task-baseline", str(tmp_path / "missing")) == 3


def test_compare_rows(cfg_file, tmp_path, capsys):
    assert invpt(cfg_file, "gen-data") == 0
    base = tmp_path / "b.json"
    base.write_text(json.dumps({"semseg": {"miou": 0.5}, "depth": {"rmse": 0.2},
                                "boundary": {"f1": 0.3}}))
    out = tmp_path / "cmp"
    capsys.readouterr()
    assert invpt(cfg_file, "compare", "--variants", "fusion,selective", "--retentions", "0.25,0.5",
                 "--single-task-baseline", str(base), "--out", str(out)) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [(r["variant"], float(r["retention"])) for r in rows] == [
        ("fusion", 1.0), ("selective", 0.25), ("selective", 0.5)]
    assert float(rows[0]["flops_delta_pct"]) == 0.0
    assert all(float(r["flops_delta_pct"]) < 0 for r in rows[1:])
    assert (out / "ablation.csv").exists() and (out / "ablation_loss.png").exists()
    saved = json.loads((out / "ablation.json").read_text())
    assert saved["baseline"]["depth"]["rmse"] == 0.2 and len(saved["rows"]) == 3


def test_compare_single_row_matches_train_and_eval(cfg_file, tmp_path):
    assert invpt(cfg_file, "gen-data") == 0
    assert invpt(cfg_file, "compare", "--variants", "selective", "--retentions", "0.5",
                 "--out", str(tmp_path / "cmp")) == 0
    row = json.loads((tmp_path / "cmp/ablation.json").read_text())["rows"][0]
    assert invpt(cfg_file, "train") == 0
    assert invpt(cfg_file, "eval") == 0
    direct = json.loads((tmp_path / "run/metrics.json").read_text())["metrics"]
    assert row["semseg/miou"] == direct["semseg"]["miou"]
    assert row["depth/rmse"] == direct["depth"]["rmse"]


def test_gradcheck_op_scope(cfg_file, tmp_path, capsys):
    assert invpt(cfg_file, "gradcheck", "--scope", "op") == 0
    assert "PASS" in capsys.readouterr().out
    assert json.loads((tmp_path / "run/gradcheck.json").read_text())["passed"] is True


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "invpt.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "gen-data" in res.stdout
