from __future__ import annotations

import numpy as np

from mixedquery.plotting import plot_loss_trace, plot_per_class

PNG = b"\x89PNG\r\n\x1a\n"


def test_loss_trace_png(tmp_path):
    trace = np.exp(-np.linspace(0, 3, 120)) + 0.01
    comps = [{"class": t / 4, "l1": t / 4, "giou": t / 4, "dice": t / 4} for t in trace]
    path = tmp_path / "trace.png"
    plot_loss_trace(trace, path, comps, title="mixed")
    assert path.read_bytes()[:8] == PNG
    short = tmp_path / "short.png"
    plot_loss_trace([1.0, 0.5], short)
    assert short.read_bytes()[:8] == PNG


def test_per_class_png(tmp_path):
    path = tmp_path / "pc.png"
    plot_per_class({"dog": {"pq": 0.5}, "sky": {"pq": 1.0}}, path, "pq")
    assert path.read_bytes()[:8] == PNG
