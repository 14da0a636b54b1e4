"""Figure writers produce valid files; delimited output parses back."""

import csv

import numpy as np
import pytest

from wicbr import report, train

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"

FAKE_LOG = [
    {"epoch": 0, "ce": 1.7, "con": 1.8, "total": 1.88, "val_accuracy": 0.3},
    {"epoch": 1, "ce": 1.1, "con": 1.6, "total": 1.26, "val_accuracy": 0.6},
    {"epoch": 2, "ce": 0.4, "con": 1.2, "total": 0.52, "val_accuracy": 0.9},
]


def fake_probe():
    return train.ProbeReport(
        per_class=(
            {"class_id": 0, "phase_corr": 0.1, "dfs_corr": 0.7, "n_pairs": 12},
            {"class_id": 1, "phase_corr": -0.05, "dfs_corr": 0.5, "n_pairs": 12},
        ),
        phase_mean=0.025,
        dfs_mean=0.6,
    )


def test_loss_curve_figure(tmp_path):
    out = tmp_path / "loss.png"
    report.save_loss_curves(FAKE_LOG, out)
    assert out.read_bytes()[:8] == PNG_MAGIC


def test_loss_curve_rejects_empty_log(tmp_path):
    with pytest.raises(ValueError):
        report.save_loss_curves([], tmp_path / "x.png")


def test_confusion_figure(tmp_path):
    out = tmp_path / "confusion.png"
    cm = np.array([[10, 2, 0], [1, 9, 2], [0, 0, 12]])
    report.save_confusion(cm, out, class_names=["swipe", "push", "circle"])
    assert out.read_bytes()[:8] == PNG_MAGIC


def test_confusion_figure_rejects_bad_shape(tmp_path):
    with pytest.raises(ValueError):
        report.save_confusion(np.zeros((2, 3)), tmp_path / "x.png")
    with pytest.raises(ValueError):
        report.save_confusion(np.zeros((2, 2)), tmp_path / "x.png", class_names=["a"])


def test_probe_chart(tmp_path):
    out = tmp_path / "probe.png"
    report.save_probe_chart(fake_probe(), out)
    assert out.read_bytes()[:8] == PNG_MAGIC


def test_confusion_csv_roundtrip(tmp_path):
    out = tmp_path / "confusion.csv"
    cm = np.array([[5, 1], [2, 4]])
    report.write_confusion_csv(cm, out)
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["true\\predicted", "0", "1"]
    assert [int(v) for v in rows[1][1:]] == [5, 1]
    assert [int(v) for v in rows[2][1:]] == [2, 4]


def test_probe_csv(tmp_path):
    out = tmp_path / "probe.csv"
    report.write_probe_csv(fake_probe(), out)
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == ["class_id", "phase_corr", "dfs_corr", "n_pairs"]
    assert len(rows) == 3
    assert float(rows[1][2]) == 0.7
