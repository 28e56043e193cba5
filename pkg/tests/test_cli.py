"""CLI behavior: exit codes, determinism, atomic outputs."""

import json

import pytest

from cfprune.cli import main
from cfprune.data import write_synthetic_cifar_batch
from cfprune.model import load_model, save_model
from cfprune.templates import build_duplicate_toy_net


@pytest.fixture()
def workspace(tmp_path):
    net = build_duplicate_toy_net(seed=0, channels=8, dup_pairs=((0, 1), (2, 3)),
                                  input_shape=(3, 32, 32))
    save_model(net, tmp_path / "toy")
    (tmp_path / "cifar").mkdir()
    write_synthetic_cifar_batch(tmp_path / "cifar" / "test_batch.bin", 48, seed=9)
    return tmp_path


def test_missing_model_exits_3(workspace, capsys):
    rc = main(["analyze", "--model", str(workspace / "nope.json"),
               "--data", str(workspace / "cifar"), "--seed", "1",
               "--out", str(workspace / "out")])
    assert rc == 3
    assert "nope.json" in capsys.readouterr().err


def test_missing_seed_exits_2(workspace):
    rc = main(["prune", "--model", str(workspace / "toy" / "model.json"),
               "--data", str(workspace / "cifar"), "--rate", "0.5",
               "--out", str(workspace / "out")])
    assert rc == 2


def test_invalid_rate_exits_2(workspace):
    rc = main(["prune", "--model", str(workspace / "toy" / "model.json"),
               "--data", str(workspace / "cifar"), "--rate", "1.2", "--seed", "1",
               "--out", str(workspace / "out")])
    assert rc == 2


def test_analyze_deterministic_bytes(workspace):
    args = ["analyze", "--model", str(workspace / "toy" / "model.json"),
            "--data", str(workspace / "cifar"), "--samples", "16", "--seed", "3"]
    assert main(args + ["--out", str(workspace / "a")]) == 0
    assert main(args + ["--out", str(workspace / "b")]) == 0
    for name in ("similarity_relu1.json", "similarity_relu1.csv"):
        assert (workspace / "a" / name).read_bytes() == (workspace / "b" / name).read_bytes()


def test_analyze_stability_columns(workspace):
    rc = main(["analyze", "--model", str(workspace / "toy" / "model.json"),
               "--data", str(workspace / "cifar"), "--samples", "32", "--seed", "3",
               "--stability-counts", "4,8,16,32", "--out", str(workspace / "st")])
    assert rc == 0
    stability = json.loads((workspace / "st" / "stability.json").read_text())
    assert stability["relu1"]["sample_counts"] == [4, 8, 16, 32]
    assert len(stability["relu1"]["max_abs_deviation"]) == 4
    header = (workspace / "st" / "stability_relu1.csv").read_text().splitlines()[0]
    assert header.split(",") == ["pair", "4", "8", "16", "32"]


def test_prune_outputs_and_determinism(workspace):
    args = ["prune", "--model", str(workspace / "toy" / "model.json"),
            "--data", str(workspace / "cifar"), "--samples", "16",
            "--rate", "0.25", "--seed", "5"]
    assert main(args + ["--out", str(workspace / "p1")]) == 0
    assert main(args + ["--out", str(workspace / "p2")]) == 0
    p1, p2 = workspace / "p1", workspace / "p2"
    assert (p1 / "plan.json").read_bytes() == (p2 / "plan.json").read_bytes()
    assert (p1 / "weights.bin").read_bytes() == (p2 / "weights.bin").read_bytes()
    for required in ("model.json", "weights.bin", "plan.json", "report.json",
                     "report.csv", "figures/report.png"):
        assert (p1 / required).exists(), required
    # no temp dirs left behind
    assert not list(workspace.glob(".cfprune-*"))
    pruned = load_model(p1 / "model.json")
    assert pruned.weights["conv1"]["weight"].shape[0] == 6


def test_prune_rate_zero_keeps_weights_bitwise(workspace):
    rc = main(["prune", "--model", str(workspace / "toy" / "model.json"),
               "--data", str(workspace / "cifar"), "--samples", "8",
               "--rate", "0.0", "--seed", "5", "--out", str(workspace / "z")])
    assert rc == 0
    original = (workspace / "toy" / "weights.bin").read_bytes()
    assert (workspace / "z" / "weights.bin").read_bytes() == original


def test_eval_identical_models_zero_errors(workspace):
    out = workspace / "ev"
    rc = main(["eval", "--data", str(workspace / "cifar"), "--samples", "8",
               "--seed", "2", "--out", str(out),
               str(workspace / "toy" / "model.json"), str(workspace / "toy" / "model.json")])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    assert report["primary"]["logit_error"] == 0.0
    assert report["primary"]["top1_agreement_proxy"] == 1.0
    assert (out / "figures" / "similarity_histogram.png").exists()


def test_eval_strategy_rerun_deterministic(workspace):
    args = ["eval", "--data", str(workspace / "cifar"), "--samples", "8",
            "--seed", "7", "--rate", "0.25", "--strategy", "random",
            str(workspace / "toy" / "model.json"), str(workspace / "toy" / "model.json")]
    assert main(args + ["--out", str(workspace / "e1")]) == 0
    assert main(args + ["--out", str(workspace / "e2")]) == 0
    r1 = json.loads((workspace / "e1" / "report.json").read_text())
    r2 = json.loads((workspace / "e2" / "report.json").read_text())
    assert r1 == r2


def test_flops_command(workspace, capsys):
    rc = main(["flops", "--model", str(workspace / "toy" / "model.json")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "flops" in out and "params" in out


def test_demo_passes(tmp_path, capsys):
    rc = main(["demo", "--seed", "4", "--out", str(tmp_path / "demo")])
    assert rc == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert (tmp_path / "demo" / "plan.json").exists()


def test_config_file_with_flag_override(workspace):
    cfg = {"version": "cfconfig/1", "model": str(workspace / "toy" / "model.json"),
           "data": str(workspace / "cifar"), "samples": 8, "rate": 0.5, "seed": 1}
    cfg_path = workspace / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    # flag overrides the config's rate
    rc = main(["prune", "--config", str(cfg_path), "--rate", "0.25",
               "--out", str(workspace / "cfgout")])
    assert rc == 0
    plan = json.loads((workspace / "cfgout" / "plan.json").read_text())
    assert plan["provenance"]["rates"]["conv1"] == 0.25


def test_unknown_config_key_exits_2(workspace):
    cfg_path = workspace / "bad.json"
    cfg_path.write_text(json.dumps({"frobnicate": 1}))
    rc = main(["analyze", "--config", str(cfg_path), "--seed", "1",
               "--out", str(workspace / "x")])
    assert rc == 2
