import csv
import json

import pytest
import yaml

from supernas.checkpoint import load_checkpoint
from supernas.cli import main

TINY = {
    "seed": 1,
    "dataset": {"n_per_class": 10, "num_classes": 4},
    "stages": [
        {"iterations": 3, "warmup_iterations": 2, "samples_per_step": 2, "batch_size": 8},
        {"iterations": 2, "samples_per_step": 2, "batch_size": 8},
        {"iterations": 2, "samples_per_step": 2, "batch_size": 8},
    ],
    "eval": {"num_encodings": 4, "calib_batches": 2, "calib_batch_size": 4},
    "standalone": {"iterations": 3, "batch_size": 8},
    "ablation": {"variants": ["base", "PReLU+OE"], "supernet_seeds": [0]},
}


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "tiny.yaml"
    p.write_text(yaml.safe_dump(TINY))
    return p


def run(*args):
    return main([str(a) for a in args])


def test_stage_pipeline_and_reports(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert run("train", "--config", cfg_path, "--out", out) == 0
    assert run("train", "--config", cfg_path, "--out", out, "--stage", 2) == 0
    assert run("train", "--config", cfg_path, "--out", out, "--stage", 3) == 0
    assert load_checkpoint(out / "stage3.ckpt").params.stage == 3
    assert [h["lr_init"] for h in load_checkpoint(out / "stage3.ckpt").history] == [0.01, 0.001, 0.001]
    recs = [json.loads(l) for l in (out / "metrics_stage1.jsonl").read_text().splitlines()]
    assert [r["phase"] for r in recs] == ["warmup"] * 2 + ["train"] * 3

    assert run("standalone", "--config", cfg_path, "--out", out) == 0
    for s in (1, 3):
        assert run("eval-rank", "--config", cfg_path, "--out", out, "--checkpoint", out / f"stage{s}.ckpt") == 0
    code = run("report", "--out", out)
    if code == 4:
        # a tiny run can give identical accuracies; the refusal must be explicit
        assert "Pearson" in capsys.readouterr().err
    else:
        assert code == 0
        body = json.loads((out / "report_stage1.json").read_text())
        assert body["n"] == 4 and 0 <= body["pearson_abs"] <= 1


def test_reruns_are_byte_identical_and_inputs_untouched(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run("train", "--config", cfg_path, "--out", out) == 0
    assert (a / "stage1.ckpt").read_bytes() == (b / "stage1.ckpt").read_bytes()
    assert (a / "metrics_stage1.jsonl").read_bytes() == (b / "metrics_stage1.jsonl").read_bytes()
    before = (a / "stage1.ckpt").read_bytes()
    assert run("train", "--config", cfg_path, "--out", a, "--stage", 2) == 0
    assert run("split", "--checkpoint", a / "stage1.ckpt", "--out", a) == 0
    assert (a / "stage1.ckpt").read_bytes() == before
    assert run("train", "--config", cfg_path, "--out", a) == 0
    assert (a / "stage1.ckpt").read_bytes() == before


def test_split_twice_then_refuse(tmp_path, cfg_path, capsys):
    out = tmp_path / "s"
    assert run("train", "--config", cfg_path, "--out", out) == 0
    assert run("split", "--checkpoint", out / "stage1.ckpt") == 0
    assert run("split", "--checkpoint", out / "stage2_split.ckpt") == 0
    state = load_checkpoint(out / "stage3_split.ckpt")
    assert state.params.stage == 3 and state.phase == "split"
    assert run("split", "--checkpoint", out / "stage3_split.ckpt") == 2
    assert "cannot be split" in capsys.readouterr().err
    # a split checkpoint can be trained directly
    assert run("train", "--config", cfg_path, "--out", out, "--stage", 2,
               "--checkpoint", out / "stage2_split.ckpt") == 0


def write_table(path, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["encoding", "source", "seed", "accuracy"])
        w.writerows(rows)


def test_report_refuses_zero_variance(tmp_path, capsys):
    write_table(tmp_path / "standalone.csv", [["4-8", "standalone", 0, 0.5], ["8-8", "standalone", 0, 0.7]])
    write_table(tmp_path / "supernet_stage1.csv", [["4-8", "supernet", 0, 0.3], ["8-8", "supernet", 0, 0.3]])
    assert run("report", "--out", tmp_path) == 4
    err = capsys.readouterr().err
    assert "Pearson" in err and "zero variance" in err


def test_missing_prerequisites_are_named(tmp_path, cfg_path, capsys):
    assert run("train", "--config", cfg_path, "--out", tmp_path, "--stage", 2) == 3
    assert "stage1.ckpt" in capsys.readouterr().err
    assert run("report", "--out", tmp_path) == 3
    assert "standalone.csv" in capsys.readouterr().err
    assert run("eval-rank", "--config", cfg_path, "--out", tmp_path) == 3
    assert run("train", "--config", tmp_path / "nope.yaml") == 3
    assert "nope.yaml" in capsys.readouterr().err


def test_config_errors_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("stages:\n  - {lr_init: fast}\n")
    assert run("train", "--config", bad, "--out", tmp_path) == 2
    assert "stages[0].lr_init" in capsys.readouterr().err
    assert run("train", "--out", tmp_path) == 2


def test_corrupt_checkpoint_exit_3(tmp_path, cfg_path):
    (tmp_path / "x.ckpt").write_bytes(b"garbage")
    assert run("split", "--checkpoint", tmp_path / "x.ckpt") == 3


def test_bad_encoding_list_exit_2(tmp_path, cfg_path):
    out = tmp_path / "e"
    assert run("train", "--config", cfg_path, "--out", out) == 0
    (tmp_path / "encs.txt").write_text("4-8-12-16-4-7\n")
    assert run("eval-rank", "--config", cfg_path, "--out", out, "--checkpoint", out / "stage1.ckpt",
               "--encodings", tmp_path / "encs.txt") == 2


def test_ablate_writes_table(tmp_path, cfg_path, capsys):
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg_path, "--out", out) == 0
    rows = list(csv.reader((out / "ablation_median.csv").read_text().splitlines()))
    assert rows[0] == ["model", "supernet", "stage", "pearson_abs"]
    assert [(r[0], r[2]) for r in rows[1:]] == [("ToyResNet_SPN", "1"), ("ToyResNet_SPN", "2"),
                                                ("ToyResNet_SPN", "3"), ("ToyResNet_SPN_PRL_OE", "1"),
                                                ("ToyResNet_SPN_PRL_OE", "2"), ("ToyResNet_SPN_PRL_OE", "3")]
    assert (out / "PReLU_OE_seed0" / "stage3.ckpt").exists()
