import csv
import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from PIL import Image

from core.errors import ConfigError, DataError, ManifestError
from core.rng import Rng
from core.types import PlotKind
from model.transformer import build_model
from output.checkpoint import Checkpoint, MAGIC, checkpoint_name, list_checkpoints, load_checkpoint, save_checkpoint
from output.layout import RunLayout
from output.plots import emit_plot, render_heatmap_png
from output.report import CSV_HEADER, MetricReport, read_report


def _arrays():
    return {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.array([1.5, -2.0], dtype=np.float32)}


def test_checkpoint_round_trip(tmp_path, tiny_model):
    config = tiny_model("smoe")
    params = build_model(config, Rng(0))
    path = save_checkpoint(params, 300, tmp_path / checkpoint_name(300), {"model": config.to_dict()})
    assert path.name == "step_000300.ckpt"
    loaded = load_checkpoint(path)
    assert loaded.step == 300
    assert loaded.model_config() == config
    for name, param in params.items():
        assert_array_equal(loaded.arrays[name], param.data)
    assert not (tmp_path / "step_000300.ckpt.tmp").exists()


def test_checkpoint_layout_is_sorted_and_little_endian():
    blob = Checkpoint(step=1, arrays=_arrays()).to_bytes()
    assert blob[:8] == MAGIC
    (length,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16:16 + length])
    assert [e["name"] for e in manifest["arrays"]] == ["a", "b"]
    assert manifest["arrays"][1]["offset"] == 8
    payload = blob[16 + length:]
    assert_array_equal(np.frombuffer(payload[:8], dtype="<f4"), [1.5, -2.0])
    assert Checkpoint(step=1, arrays=_arrays()).to_bytes() == blob


def test_truncated_payload_names_missing_array():
    blob = Checkpoint(step=1, arrays=_arrays()).to_bytes()
    with pytest.raises(ManifestError, match="'b' is missing"):
        Checkpoint.from_bytes(blob[:-4])
    with pytest.raises(ManifestError):
        Checkpoint.from_bytes(blob + b"\x00" * 4)


def test_manifest_rejections():
    blob = Checkpoint(step=1, arrays=_arrays()).to_bytes()
    with pytest.raises(ManifestError, match="bad magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + blob[8:])
    future = Checkpoint(step=1, arrays=_arrays(), format_version=2).to_bytes()
    with pytest.raises(ManifestError, match="version 2"):
        Checkpoint.from_bytes(future)
    with pytest.raises(ManifestError, match="truncated"):
        Checkpoint.from_bytes(blob[:20])


def test_list_checkpoints_ignores_diagnostics(tmp_path):
    layout = RunLayout(tmp_path / "run").prepare()
    for step in (10, 0, 5):
        save_checkpoint(_arrays(), step, layout.checkpoint(step))
    save_checkpoint(_arrays(), 7, layout.diagnostic_checkpoint(7))
    assert [p.name for p in list_checkpoints(layout.checkpoints)] == [
        "step_000000.ckpt", "step_000005.ckpt", "step_000010.ckpt"]


def test_layout_refuses_non_empty_directory(tmp_path):
    root = tmp_path / "run"
    layout = RunLayout(root).prepare()
    assert layout.routing.is_dir() and layout.reports.is_dir() and layout.plots.is_dir()
    (root / "stale.txt").write_text("x")
    with pytest.raises(ConfigError, match="--force"):
        RunLayout(root).prepare()
    RunLayout(root).prepare(force=True)
    assert not (root / "stale.txt").exists()
    assert layout.routing_log(300).name == "step_000300.jsonl.gz"


def test_report_json_and_csv(tmp_path):
    report = MetricReport(metric="eae", config_hash="abc123", steps=[300], parameters={"n_experts": 8})
    report.add_layers({1: 0.5, 0: 0.75}, 0.6).add("per_shard", "layer=0:shard=1", float("nan"))
    report.add_matrix("L0", np.array([[1.0, 0.25], [0.5, 1.0]]), ["E0", "E1"])
    assert report.value() == 0.6
    assert report.value("matrix", "L0:E0,E1") == 0.25

    report.write_json(tmp_path / "eae.json")
    loaded = read_report(tmp_path / "eae.json")
    assert loaded.config_hash == "abc123"
    assert loaded.value("per_layer", "layer=0") == 0.75
    assert np.isnan(loaded.value("per_shard", "layer=0:shard=1"))

    report.write_csv(tmp_path / "eae.csv")
    with open(tmp_path / "eae.csv", newline="") as f:
        rows = list(csv.reader(f))
    assert tuple(rows[0]) == CSV_HEADER
    assert rows[1] == ["eae", "per_layer", "layer=0", "0.75"]
    assert rows[-1] == ["eae", "provenance", "config_hash", "abc123"]
    with pytest.raises(KeyError):
        report.value("per_layer", "layer=9")


def test_line_plot_has_one_polyline_per_series(tmp_path):
    series = {"smoe": [(0, 1.0), (300, 0.5), (600, 0.25)], "xmoe": [(0, 0.9), (600, 0.3)]}
    path = emit_plot(series, PlotKind.LINE, tmp_path / "ecr.svg", title="ECR", x_label="step", y_label="ECR")
    svg = path.read_text()
    assert svg.startswith("<svg")
    assert svg.count("<polyline") == 2
    assert "smoe" in svg and "xmoe" in svg
    again = emit_plot(series, "line", tmp_path / "again.svg", title="ECR", x_label="step", y_label="ECR")
    assert again.read_bytes() == path.read_bytes()


def test_heatmap_has_one_cell_per_entry(tmp_path):
    matrix = np.arange(16, dtype=float).reshape(4, 4) / 15
    svg = emit_plot(matrix, PlotKind.HEATMAP, tmp_path / "eca.svg").read_text()
    assert svg.count('class="cell"') == 16
    assert "E3" in svg


def test_empty_plots_are_rejected(tmp_path):
    with pytest.raises(DataError):
        emit_plot({}, PlotKind.LINE, tmp_path / "x.svg")
    with pytest.raises(DataError):
        emit_plot({"a": []}, PlotKind.LINE, tmp_path / "x.svg")


def test_png_heatmap_preview(tmp_path):
    png = render_heatmap_png(np.eye(3), ["a", "b", "c"], cell_size=20)
    path = tmp_path / "eca.png"
    path.write_bytes(png)
    with Image.open(path) as img:
        assert img.format == "PNG"
        assert img.size == (3 * 20 + 40, 3 * 20 + 40)
