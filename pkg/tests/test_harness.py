import csv
import json
import re
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from unlearnfair.data import LabeledDataset, write_idx
from unlearnfair.errors import ConfigError, ContractError, NumericError, StageError
from unlearnfair.harness import (
    canonical_dumps,
    default_config,
    emit_gap_plot,
    emit_tables,
    load_config,
    parse_config,
    run_experiment,
)
from unlearnfair.harness.cli import main
from unlearnfair.harness.pipeline import stage_attack, stage_profile, stage_report, stage_train, stage_unlearn
from unlearnfair.harness.report import format_float, gap_plot_svg
from unlearnfair.metrics import FairnessProfile

OPT = {"kind": "adam", "learning_rate": 0.01, "momentum": 0.9, "weight_decay": 0.0}


def tiny_config(out, methods=None, **over):
    raw = {
        "dataset": {
            "kind": "blobs",
            "num_classes": 3,
            "per_class_n": 24,
            "test_per_class_n": 8,
            "dim": 4,
            "class_center_scale": 1.0,
            "class_sigma": 0.15,
            "seed": 0,
        },
        "arch": {"name": "mlp_bn", "widths": [6, 6, 6]},
        "forget_class": 2,
        "train": {"epochs": 3, "batch_size": 16, "optimizer": OPT},
        "methods": [{"kind": "cf", "epochs": 2, "optimizer": OPT}, {"kind": "rl", "epochs": 2, "optimizer": OPT}]
        if methods is None
        else methods,
        "seeds": [0, 1],
        "etas": [0.0, 0.1],
        "output_dir": str(out),
    }
    raw.update(over)
    return raw


def _files(root: Path) -> dict[str, bytes]:
    """Every output file except checkpoints; wall-clock fields are dropped from audits."""
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file() or p.suffix == ".npz" or p.name == "timings.json":
            continue
        key = str(p.relative_to(root))
        if key.startswith("audits/"):
            audit = json.loads(p.read_text())
            assert audit.pop("wall_time_s") > 0
            out[key] = canonical_dumps(audit).encode()
        else:
            out[key] = p.read_bytes()
    return out


@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = parse_config(tiny_config(out))
    report = run_experiment(cfg)
    return cfg, report, out


# -- config ------------------------------------------------------------------


def test_schema_rejects_unknown_keys(tmp_path):
    raw = tiny_config(tmp_path)
    raw["learning_rate"] = 0.1
    with pytest.raises(ConfigError, match="learning_rate"):
        parse_config(raw)
    raw = tiny_config(tmp_path)
    raw["methods"][0]["temperature"] = 2
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_config_semantic_checks(tmp_path):
    for bad in (
        dict(forget_class=3),
        dict(methods=[{"kind": "cf"}, {"kind": "cf"}]),
        dict(methods=[{"kind": "cf", "name": "original"}]),
        dict(methods=[{"kind": "cf", "freeze_k": 5}]),
        dict(methods=[{"kind": "dream"}]),
        dict(seeds=[1, 1]),
    ):
        with pytest.raises(ConfigError):
            parse_config(tiny_config(tmp_path, **bad))


def test_retrain_is_added_and_first(tmp_path):
    cfg = parse_config(tiny_config(tmp_path, methods=[{"kind": "rl"}, {"kind": "cf"}]))
    assert [m.name for m in cfg.methods] == ["retrain", "rl", "cf"]
    cfg = parse_config(tiny_config(tmp_path, methods=[{"kind": "rl"}, {"kind": "retrain"}]))
    assert [m.name for m in cfg.methods] == ["retrain", "rl"]


def test_default_config_parses_and_digest_ignores_output_dir():
    cfg = parse_config(default_config())
    assert [m.kind for m in cfg.methods] == ["retrain", "cf", "rl", "bs", "salun", "scrub"]
    assert cfg.digest == cfg.with_output_dir("/elsewhere").digest


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


# -- pipeline ----------------------------------------------------------------


def test_report_contents(full_run):
    cfg, report, out = full_run
    assert report["methods"] == ["retrain", "cf", "rl"]
    assert len(report["runs"]) == 6 and len(report["original"]) == 2
    assert [r["method"] for r in report["runs"]] == ["retrain"] * 2 + ["cf"] * 2 + ["rl"] * 2
    assert report["preservation_ordering"]["reference"] == "rl"
    assert len(report["correlation"]) == 2
    assert "wall_time_s" not in (out / "report.json").read_text()
    timings = json.loads((out / "timings.json").read_text())["jobs"]
    assert len(timings) == 6 and all(j["wall_time_s"] > 0 for j in timings)
    for r in report["runs"]:
        if r["method"] == "retrain":
            assert r["audit"]["accesses"]["forget_train"] == 0
    assert json.loads((out / "report.json").read_text()) == json.loads(canonical_dumps(report))


def test_empty_method_list_reports_original_only(tmp_path):
    report = run_experiment(parse_config(tiny_config(tmp_path, methods=[], seeds=[0])))
    assert report["methods"] == [] and report["runs"] == []
    assert len(report["original"]) == 1 and set(report["summary"]) == {"original"}
    assert report["correlation"] is None and report["preservation_ordering"] is None


def test_identical_config_gives_identical_bytes(full_run, tmp_path):
    cfg, _, out = full_run
    other = tmp_path / "again"
    raw = tiny_config(other)
    run_experiment(parse_config(raw))
    assert _files(out) == _files(other)


def test_stage_by_stage_equals_all(full_run, tmp_path):
    _, _, out = full_run
    cfg = parse_config(tiny_config(tmp_path / "stages"))
    stage_train(cfg)
    stage_unlearn(cfg)
    stage_profile(cfg)
    stage_attack(cfg)
    stage_report(cfg)
    assert _files(out) == _files(cfg.output_dir)


def test_report_rerun_is_idempotent(full_run):
    cfg, _, out = full_run
    before = _files(out)
    stage_report(cfg)
    assert _files(out) == before


def test_idx_dataset_with_cnn(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.repeat([0, 1, 2], 8)
    imgs = np.clip(labels[:, None, None] / 2 + rng.integers(-20, 20, size=(24, 4, 4)) / 255, 0, 1)
    ds = LabeledDataset(np.rint(imgs * 255) / 255, labels, 3)
    write_idx(ds, tmp_path / "img.idx", tmp_path / "lab.idx")
    raw = tiny_config(
        "out",
        dataset={
            "kind": "idx",
            "train_images": "img.idx",
            "train_labels": "lab.idx",
            "test_images": "img.idx",
            "test_labels": "lab.idx",
        },
        arch={"name": "cnn_bn", "widths": [2, 3, 2]},
        seeds=[0],
    )
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(raw))
    cfg = load_config(path)
    assert cfg.arch.image_shape == (1, 4, 4) and cfg.output_dir == tmp_path / "out"
    report = run_experiment(cfg)
    assert len(report["original"][0]["profile"]["layers"]) == 3


# -- cli ---------------------------------------------------------------------


def _write_cfg(tmp_path, **over):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps(tiny_config(tmp_path / "out", **over)))
    return path


def test_cli_usage_errors_exit_2(capsys):
    for argv in (["frobnicate"], ["all", "--bogus"], []):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == 2
    capsys.readouterr()


def test_cli_missing_checkpoint_record(tmp_path, capsys):
    path = _write_cfg(tmp_path)
    assert main(["profile", "--config", str(path)]) == 1
    record = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert record["stage"] == "profile" and record["error"] == "StageError"
    assert "checkpoint not found" in record["message"]
    assert record["seed"] == 0


def test_cli_bad_config_record(tmp_path, capsys):
    path = tmp_path / "exp.json"
    path.write_text(json.dumps({"dataset": {}}))
    assert main(["all", "--config", str(path)]) == 1
    record = json.loads(capsys.readouterr().err.strip())
    assert record["error"] == "ConfigError"


def test_cli_stages_and_attack_eta_zero(tmp_path, capsys):
    path = _write_cfg(tmp_path, methods=[{"kind": "cf", "epochs": 1, "optimizer": OPT}], seeds=[0])
    for cmd in (["train"], ["unlearn", "--method", "cf"], ["unlearn", "--method", "retrain"], ["profile"], ["attack", "--eta", "0"], ["report"]):
        assert main([*cmd, "--config", str(path)]) == 0, cmd
    status = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert status["status"] == "ok" and status["command"] == "report"
    rows = list(csv.reader(open(tmp_path / "out" / "tables" / "robustness.csv")))
    assert rows[0] == ["method", "clean", "eta=0.0"]
    for row in rows[1:]:
        assert row[1] == row[2]
    assert main(["attack", "--config", str(path), "--eta", "-1"]) == 1


def test_cli_unknown_method_name(tmp_path, capsys):
    path = _write_cfg(tmp_path)
    assert main(["unlearn", "--config", str(path), "--method", "nope"]) == 1
    assert "nope" in capsys.readouterr().err


def test_console_script_prints_schema():
    res = subprocess.run([sys.executable, "-m", "unlearnfair.harness.cli", "schema"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["additionalProperties"] is False


# -- tables ------------------------------------------------------------------


def test_table_columns_and_roundtrip(full_run):
    _, report, out = full_run
    rows = list(csv.reader(open(out / "tables" / "accuracy.csv")))
    assert rows[0] == ["method", "D_r^train", "D_f^train", "D_r^test", "D_f^test"]
    assert [r[0] for r in rows[1:]] == ["retrain", "cf", "rl"]
    for r in rows[1:]:
        acc = report["summary"][r[0]]["accuracy"]
        assert [float(v) for v in r[1:]] == [acc[q] for q in ("retain_train", "forget_train", "retain_test", "forget_test")]
    text = (out / "tables" / "accuracy.txt").read_text().splitlines()
    assert text[0].split() == rows[0] and len(text) == 4


def test_single_method_table_has_two_rows(tmp_path):
    report = run_experiment(parse_config(tiny_config(tmp_path, methods=[{"kind": "cf", "epochs": 1, "optimizer": OPT}], seeds=[0])))
    paths = emit_tables(report, tmp_path / "t")
    assert [r[0] for r in csv.reader(open(paths["accuracy.csv"]))][1:] == ["retrain", "cf"]


def test_float_formatting_round_trips():
    for v in (0.1, 1 / 3, 1e-300, 2.5, 0.0):
        assert float(format_float(v)) == v
    with pytest.raises(NumericError):
        format_float(float("nan"))
    assert canonical_dumps({"b": 1, "a": [0.1, True, None]}) == '{\n  "a": [\n    0.10000000000000001,\n    true,\n    null\n  ],\n  "b": 1\n}\n'


# -- plot --------------------------------------------------------------------


def _points(svg):
    return [[tuple(map(float, p.split(","))) for p in pts.split()] for pts in re.findall(r'<polyline[^>]*points="([^"]*)"', svg)]


def test_plot_one_method_three_vertices():
    svg = gap_plot_svg({"cf": [0.1, 0.2, 0.15]})
    pts = _points(svg)
    assert len(pts) == 1 and len(pts[0]) == 3
    assert 'data-name="cf"' in svg


def test_plot_bytes_deterministic(tmp_path):
    prof = FairnessProfile("retain_test", [0, 1], [{0: 0.1, 1: 0.3}] * 3, [0.2, 0.2, 0.2])
    a = emit_gap_plot({"x": prof}, tmp_path / "a.svg").read_bytes()
    b = emit_gap_plot({"x": prof}, tmp_path / "b.svg").read_bytes()
    assert a == b


def test_plot_spike_is_highest_at_last_layer():
    pts = _points(gap_plot_svg({"m": [0.05, 0.04, 0.06, 0.9]}))[0]
    ys = [y for _, y in pts]
    assert ys.index(min(ys)) == 3  # svg y grows downward
    assert pts[3][0] == max(x for x, _ in pts)


def test_plot_mismatched_layers():
    with pytest.raises(ContractError):
        gap_plot_svg({"a": [0.1, 0.2], "b": [0.1, 0.2, 0.3]})


def test_stage_error_record_shape():
    rec = StageError("attack", "boom", "cf", 3).to_record()
    assert rec == {"error": "StageError", "stage": "attack", "method": "cf", "seed": 3, "message": "boom"}
