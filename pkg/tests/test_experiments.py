import json
from pathlib import Path

import numpy as np
import pytest

from core.errors import ConfigError
from core.types import Perturbation
from diagnostics.metrics import expert_change_rate
from diagnostics.routing_log import RoutingLog
from experiments.cli import diagnose, main
from experiments.recipes import RecipeContext, report_run, run_recipe
from experiments.sweep import SweepAxis, SweepSpec, run_sweep
from optimization.trainer import train
from output.report import read_report
from preprocessing.config_file import dict_to_sections, write_sections


@pytest.fixture
def trained_run(tmp_path, run_config):
    """A five-step SMoE run with checkpoints and routing logs at steps 0 and 5."""
    return train(run_config(total_steps=5), tmp_path / "run", progress=False).layout


def test_usage_errors_exit_with_two(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["diagnose"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["recipe", "no-such-recipe", "--out", "x"])
    assert exc.value.code == 2


def test_failures_report_json_on_stderr(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt")]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["command"] == "eval"
    assert set(record) == {"error", "message", "command"}


def test_train_command(tmp_path, run_config, capsys):
    config_path = tmp_path / "run.ini"
    write_sections(dict_to_sections(run_config().to_dict()), config_path)
    code = main(["train", "--config", str(config_path), "--out", str(tmp_path / "run"), "--no-progress",
                 "--set", "run.total_steps=5"])
    assert code == 0
    out = json.loads(capsys.readouterr().out)
    assert out["final_step"] == 5
    assert len(out["checkpoints"]) == 2
    assert out["final_val_ppl"] > 1.0


def test_diagnose_command(trained_run, tmp_path, capsys):
    log = str(trained_run.routing_log(5))
    assert main(["diagnose", "--metric", "ecr", "--logs", log, log, "--out", str(tmp_path / "ecr.json"),
                 "--csv", str(tmp_path / "ecr.csv")]) == 0
    report = read_report(tmp_path / "ecr.json")
    assert report.value() == 0.0
    assert (tmp_path / "ecr.csv").read_text().splitlines()[-1].startswith("ecr,provenance,config_hash,")

    capsys.readouterr()
    assert main(["diagnose", "--metric", "similarity", "--ckpt", str(trained_run.checkpoint(5)), "--layer", "1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["labels"]["L1"] == ["E0", "E1", "E2", "E3"]
    assert -1.0 <= report["entries"][0]["value"] <= 1.0


def test_diagnose_eca_labels_virtual_slots(tmp_path, run_config, capsys):
    config = run_config("moepp", total_steps=5)
    layout = train(config, tmp_path / "moepp", progress=False).layout
    capsys.readouterr()
    assert main(["diagnose", "--metric", "eca", "--logs", str(layout.routing_log(5))]) == 0
    report = json.loads(capsys.readouterr().out)
    expected = config.model.moe.slot_labels()
    assert {"zero4", "zero5", "copy"} <= set(expected)
    for layer in config.model.moe_layers:
        assert report["labels"][f"L{layer}"] == expected


def test_diagnose_needs_enough_logs(trained_run):
    log = RoutingLog.read(trained_run.routing_log(5))
    with pytest.raises(ConfigError):
        diagnose("ecr", [log])
    with pytest.raises(ConfigError):
        diagnose("similarity", [log])
    eae = diagnose("eae", [log], n_shards=2)
    assert 0.0 <= eae.value() <= 1.0
    assert eae.value("per_shard", "layer=0:shard=1") >= 0.0


def test_perturb_rewrites_a_routing_log(trained_run, tmp_path):
    source = trained_run.routing_log(5)
    target = tmp_path / "dropped.jsonl.gz"
    assert main(["perturb", "--logs", str(source), "--mode", "drop_top1", "--write", str(target)]) == 0
    original, dropped = RoutingLog.read(source), RoutingLog.read(target)
    assert expert_change_rate(original, dropped).aggregate == 1.0
    np.testing.assert_allclose(dropped.layers[0].gates.sum(axis=1), 1.0, rtol=1e-5)
    assert main(["perturb", "--logs", str(source), "--write", str(target)]) == 1


def test_temperature_sweep_against_a_checkpoint(trained_run, tmp_path, run_config):
    spec = SweepSpec(base=run_config(), axis=SweepAxis.TEMPERATURE, values=["1.0", "10.0"],
                     out_dir=tmp_path / "sweep", checkpoint=trained_run.checkpoint(5))
    result = run_sweep(spec)
    assert [row["series"] for row in result.rows] == ["temperature=1.0", "temperature=10.0"]
    assert result.rows[0]["delta_vs_base"] == 0.0
    assert result.table.read_text().splitlines()[0] == "series,ppl,delta_vs_base,config_hash"


def test_init_std_sweep_trains_every_value(tmp_path, run_config):
    spec = SweepSpec(base=run_config(total_steps=5), axis=SweepAxis.INIT_STD, values=["0.02", "0.06"],
                     out_dir=tmp_path / "sweep", workers=1)
    result = run_sweep(spec)
    assert [d.name for d in result.run_dirs] == ["init_std_0.02", "init_std_0.06"]
    assert len(result.rows) == 2 * 5
    assert {row["series"] for row in result.rows} == {"init_std=0.02", "init_std=0.06"}


def test_sweep_spec_from_file(tmp_path):
    path = tmp_path / "sweep.ini"
    path.write_text("[run]\ntotal_steps = 20\n[moe]\nvariant = smoe\n"
                    "[sweep]\naxis = init_std\nvalues = 0.02, 0.04\nout = runs/init\n", encoding="utf-8")
    spec = SweepSpec.from_file(path, ["run.seed=5"])
    assert spec.axis.trains
    assert spec.values == ["0.02", "0.04"]
    assert spec.run_config("0.04").model.moe.router_init_std == 0.04
    assert spec.base.seed == 5

    path.write_text("[sweep]\naxis = temperature\nvalues = 1.0\nout = x\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="checkpoint"):
        SweepSpec.from_file(path)
    path.write_text("[sweep]\naxis = width\nvalues = 1\nout = x\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        SweepSpec.from_file(path)
    path.write_text("[sweep]\naxis = perturbation\nvalues = drop_top3\nout = x\ncheckpoint = a.ckpt\n",
                    encoding="utf-8")
    with pytest.raises(ConfigError):
        SweepSpec.from_file(path)


def test_drop_top_recipe(trained_run, tmp_path):
    ctx = RecipeContext(out_dir=tmp_path / "drop", checkpoints={"smoe": trained_run.checkpoint(5)})
    result = run_recipe("drop-top", ctx)
    report = result.reports[0]
    assert report.value("table", "smoe:none:delta") == 0.0
    for mode in Perturbation:
        assert np.isfinite(report.value("table", f"smoe:{mode.value}:ppl"))
    assert (tmp_path / "drop" / "reports" / "drop-top.csv") in result.artifacts


def test_routing_recipes_on_a_trained_run(trained_run, tmp_path):
    ctx = RecipeContext(out_dir=tmp_path / "analysis", runs=[trained_run.root], n_shards=2)
    eae = run_recipe("eae", ctx)
    assert eae.reports[0].metric == "eae.test-smoe"
    assert 0.0 <= eae.reports[0].value() <= 1.0

    eca = run_recipe("eca", RecipeContext(out_dir=tmp_path / "eca", runs=[trained_run.root]))
    pngs = [p for p in eca.artifacts if p.suffix == ".png"]
    assert len(pngs) == 2
    assert eca.reports[0].labels

    ecr = run_recipe("ecr-curve", RecipeContext(out_dir=tmp_path / "ecr", runs=[trained_run.root]))
    assert ecr.reports[0].steps == [5]


def test_recipe_errors(tmp_path):
    with pytest.raises(ConfigError, match="unknown recipe"):
        run_recipe("nope", RecipeContext(out_dir=tmp_path / "x"))
    with pytest.raises(ConfigError, match="--runs"):
        run_recipe("eae", RecipeContext(out_dir=tmp_path / "y"))
    with pytest.raises(ConfigError, match="missing checkpoints"):
        run_recipe("temperature", RecipeContext(out_dir=tmp_path / "z", checkpoints={"a": Path("a.ckpt")}))


def test_report_run_bundles_plots_and_reports(trained_run):
    result = report_run(trained_run.root)
    names = {p.name for p in result.artifacts}
    assert {"ce_loss.svg", "val_ppl.svg", "summary.csv", "val_ppl.json"} <= names
    assert "eae.test-smoe.json" in names
    assert all(p.is_file() for p in result.artifacts)
