import numpy as np

from invpt import plotting
from invpt.decoder import DecoderConfig
from invpt.flops import flops_count

PNG = b"\x89PNG\r\n\x1a\n"


def test_moving_average():
    assert np.allclose(plotting.moving_average([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    assert np.allclose(plotting.moving_average([1, 2], 10), [1.5])


def test_figures_are_written(tmp_path):
    cfg = dict(tasks=2, grid=(4, 4), c0=8, encoder_width=4)
    bds = [flops_count(DecoderConfig(**cfg, variant="fusion")),
           flops_count(DecoderConfig(**cfg, variant="selective"))]
    paths = [
        plotting.loss_curve({"a": list(np.linspace(3, 1, 300)), "b": [2.0] * 50}, tmp_path / "l.png"),
        plotting.flops_bars(bds, tmp_path / "f.png"),
        plotting.stage_ablation({1: {"semseg": {"miou": 0.5}, "depth": {"rmse": 0.2}},
                                 3: {"semseg": {"miou": 0.6}, "depth": {"rmse": 0.1}}},
                                tmp_path / "deep" / "s.png"),
        plotting.retention_sweep([0.25, 0.5], [1e6, 2e6], tmp_path / "r.png", reference=3e6),
    ]
    for p in paths:
        assert p.read_bytes()[:8] == PNG
