import json

import pytest

from csmlab.cli import main
from csmlab.datasets import import_dataset
from csmlab.metrics import ParetoPoint
from helpers import brute_force_pareto


def write_config(tmp_path, **overrides):
    cfg = {
        "dataset": {"name": "xor", "params": {"n": 400, "noise_std": 0.1}, "seed": 3},
        "arch": "LRM",
        "model": {"emb_size": 6},
        "train": {"epochs": 2, "batch_size": 128, "seed": 1},
        "delta": 0.05,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and key in cfg and isinstance(cfg[key], dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_writes_importable_file(tmp_path, capsys):
    cfg = write_config(tmp_path)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    ds = import_dataset(tmp_path / "out" / "dataset.csmd")
    assert ds.n == 400


def test_train_writes_all_reports(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    for name in ("checkpoint.csmc", "checkpoint_params.txt", "history.csv",
                 "sis_report.json", "summary.json"):
        assert (out / name).exists(), name
    history = (out / "history.csv").read_text().split("\n")
    assert history[0] == "epoch,loss_task,loss_concept,loss_sis,val_acc,val_sis"
    assert len([l for l in history if l]) == 1 + 2  # header + 2 epochs
    summary = json.loads((out / "summary.json").read_text())
    assert 0.0 <= summary["test"]["accuracy"] <= 1.0


def test_train_is_byte_identical_across_reruns(tmp_path):
    cfg = write_config(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(out_b)]) == 0
    for name in ("checkpoint.csmc", "history.csv", "sis_report.json"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name


def test_flags_override_config(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out),
                 "--arch", "CRM", "--seed", "9", "--beta", "0.5"]) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["arch"] == "CRM"
    assert summary["config"]["train"]["seed"] == 9
    assert summary["config"]["train"]["beta"] == 0.5


def test_unknown_config_field_is_named(tmp_path, capsys):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"trian": {"epochs": 1}}))
    assert main(["train", "--config", str(path)]) == 2
    assert "trian" in capsys.readouterr().err


def test_invalid_train_field_is_named(tmp_path, capsys):
    cfg = write_config(tmp_path, train={"epochs": 2, "alpha": -3.0})
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "train.alpha" in capsys.readouterr().err


def test_unknown_arch_is_reported(tmp_path, capsys):
    cfg = write_config(tmp_path, arch="ZZZ")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "ZZZ" in capsys.readouterr().err


def test_pareto_rows_flags_and_determinism(tmp_path):
    cfg = write_config(tmp_path, sweep={"beta": [0.0, 1.0], "emb_size": [4, 6]})
    out_a, out_b = tmp_path / "pa", tmp_path / "pb"
    assert main(["pareto", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["pareto", "--config", str(cfg), "--out", str(out_b)]) == 0
    assert (out_a / "pareto.csv").read_bytes() == (out_b / "pareto.csv").read_bytes()

    lines = [l for l in (out_a / "pareto.csv").read_text().split("\n") if l]
    assert lines[0] == "arch,beta,emb_size,accuracy,sis,sis_lo,sis_hi,pareto_flag"
    rows = [l.split(",") for l in lines[1:]]
    assert len(rows) == 4
    # Canonical ordering: beta then emb_size, ascending.
    assert [(float(r[1]), int(r[2])) for r in rows] == [(0.0, 4), (0.0, 6), (1.0, 4), (1.0, 6)]

    points = [
        ParetoPoint(f"{i}", float(r[3]), float(r[4]), float(r[1]), r[0])
        for i, r in enumerate(rows)
    ]
    oracle_ids = {p.config_id for p in brute_force_pareto(points)}
    flagged = {p.config_id for p, r in zip(points, rows) if r[7] == "1"}
    assert flagged == oracle_ids


def test_intervene_regenerates_dataset_and_matches_train_accuracy(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["intervene", "--checkpoint", str(out / "checkpoint.csmc"),
                 "--out", str(out), "--order-seed", "5"]) == 0
    lines = [l for l in (out / "curve.csv").read_text().split("\n") if l]
    assert lines[0] == "k,accuracy"
    assert len(lines) == 1 + 3  # k = 0, 1, 2
    k0_accuracy = float(lines[1].split(",")[1])
    summary = json.loads((out / "summary.json").read_text())
    assert k0_accuracy == summary["test"]["accuracy"]


def test_intervene_accepts_dataset_file(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["gen-data", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["intervene", "--checkpoint", str(out / "checkpoint.csmc"),
                 "--data", str(out / "dataset.csmd"), "--out", str(out)]) == 0


def test_inspect_reports_masses_and_top_weights(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["inspect", "--checkpoint", str(out / "checkpoint.csmc"),
                 "--out", str(out)]) == 0
    report = json.loads((out / "inspect.json").read_text())
    task = report["tasks"][0]
    assert task["concept_mass"] + task["sidechannel_mass"] > 0
    listed = sum(abs(w) for _, w in task["entries"])
    assert listed == pytest.approx(task["concept_mass"] + task["sidechannel_mass"])
    lines = [l for l in (out / "inspect.csv").read_text().split("\n") if l]
    assert lines[0] == "task,rank,name,weight"


def test_inspect_rejects_non_lrm_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path, arch="CRM")
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    assert main(["inspect", "--checkpoint", str(out / "checkpoint.csmc"),
                 "--out", str(out)]) == 2
    assert "LRM" in capsys.readouterr().err


def test_out_dir_env_variable(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    monkeypatch.setenv("CSMLAB_OUT", str(tmp_path / "envout"))
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert (tmp_path / "envout" / "dataset.csmd").exists()
