from pathlib import Path

import numpy as np
import pytest
import torch

from pvm import experiment as ex
from pvm.cli import main
from pvm.config import load_config
from pvm.errors import CheckpointError
from pvm.io import load_pgm, load_pvmt

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.fixture
def smoke_cls():
    return load_config(CONFIGS / "smoke-cls.ini")


@pytest.fixture
def smoke_depth():
    return load_config(CONFIGS / "smoke-depth.ini")


def test_metrics_log_and_payload(tmp_path):
    log = ex.MetricsLog("r", 0)
    log.log(1, "train", "cross_entropy", 2.0)
    log.log(1, "test", "top1", 0.5)
    assert log.value("test", "top1") == 0.5
    with pytest.raises(KeyError):
        log.value("test", "rmse")
    path = tmp_path / "m.jsonl"
    ex.write_records(path, log.records)
    ex.write_records(path, log.records, append=True)
    back = ex.read_records(path)
    assert len(back) == 4 and set(back[0]) == {"run_id", "seed", "epoch", "split", "metric", "value", "wall_clock"}
    assert b"wall_clock" not in ex.metrics_payload(back)


def test_splits_are_disjoint_and_masked(smoke_cls):
    train = ex.load_split(smoke_cls, 0, "train")
    test = ex.load_split(smoke_cls, 0, "test")
    assert train.inputs.shape == (64, 1, 16, 16) and test.inputs.shape == (32, 1, 16, 16)
    assert not torch.equal(train.clean[:32], test.clean)
    assert bool((train.inputs.permute(1, 0, 2, 3)[:, ~train.masks] == 0).all())
    hard = ex.load_split(smoke_cls, 0, "test", regime="hard")
    frac = 1.0 - hard.masks.double().mean().item()
    assert 0.5 <= frac <= 0.75
    assert torch.equal(hard.clean, test.clean)


def test_train_is_deterministic(smoke_cls):
    a = ex.train_run(smoke_cls, "pvm", 0)
    b = ex.train_run(smoke_cls, "pvm", 0)
    assert ex.metrics_payload(a.metrics.records) == ex.metrics_payload(b.metrics.records)
    assert set(a.final) == {"top1", "top4"}


def test_checkpoint_round_trip(smoke_depth, tmp_path):
    run = ex.train_run(smoke_depth, "pvm", 0, out_dir=tmp_path)
    model, meta = ex.load_checkpoint(run.checkpoint, smoke_depth)
    assert meta["variant"] == "pvm" and meta["seed"] == "0"
    test = ex.load_split(smoke_depth, 0, "test")
    assert ex.evaluate(model, smoke_depth, "pvm", test) == run.final
    with pytest.raises(CheckpointError, match="hash mismatch"):
        ex.load_checkpoint(run.checkpoint, smoke_depth.replace(dim=16))
    with pytest.raises(CheckpointError, match="missing checkpoint"):
        ex.load_checkpoint(tmp_path / "nowhere", smoke_depth)


def test_depth_training_reduces_loss(smoke_depth):
    cfg = smoke_depth.replace(image_size=64, train_count=200, test_count=8, epochs=3, batch_size=20)
    run = ex.train_run(cfg, "pvm", 0)
    losses = [r["value"] for r in run.metrics.records if r["split"] == "train"]
    assert losses[-1] < losses[0]


def test_relative_gap():
    assert ex.relative_gap(2.0, 1.5) == 0.25
    assert np.isnan(ex.relative_gap(0.0, 1.0))


def test_cli_train_and_eval(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(CONFIGS / "smoke-cls.ini"), "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert printed.splitlines()[0] == "variant\tseed\ttop1\ttop4"
    for f in ("results.tsv", "training_curves.png", "test_top1.png", "cls-pvm.metrics.jsonl", "cls-vm.metrics.jsonl"):
        assert (out / f).is_file()
    assert (out / "cls-pvm" / "seed-0" / "manifest.txt").is_file()
    assert main(["eval", "--config", str(CONFIGS / "smoke-cls.ini"), "--out", str(out), "--regime", "easy"]) == 0
    assert (out / "regimes.tsv").is_file() and (out / "regimes.png").is_file()
    regime_rows = [r for r in ex.read_records(out / "cls-pvm.metrics.jsonl") if r["split"] == "test-easy"]
    assert len(regime_rows) == 2


def test_cli_missing_checkpoint_exits_2(tmp_path):
    args = ["eval", "--config", str(CONFIGS / "smoke-cls.ini"), "--checkpoint", str(tmp_path / "none")]
    assert main(args) == 2


def test_cli_maskgen_is_reproducible(tmp_path, capsys):
    args = ["maskgen", "--regime", "hard", "--size", "64", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for ext in (".pvmt", ".pgm"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()
    m = load_pvmt(tmp_path / "a.pvmt")
    assert m.dtype == np.uint8 and np.array_equal(load_pgm(tmp_path / "a.pgm") > 0, m > 0)
    frac = float(capsys.readouterr().out.splitlines()[0].split(":")[1])
    assert 0.5 <= frac <= 0.75
    assert main(["maskgen", "--policy", "sparse", "--density", "0", "--out", str(tmp_path / "c")]) == 2


def test_cli_verify_unknown_suite():
    assert main(["verify", "--suite", "nope"]) == 2


def test_cli_verify_fill(capsys):
    assert main(["verify", "--suite", "fill"]) == 0
    assert "PASS fill" in capsys.readouterr().out


def test_cli_bad_config(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[experiment]\ntask = nope\n")
    assert main(["train", "--config", str(bad)]) == 2


def test_ablation_rows(smoke_depth, tmp_path):
    rows, records = ex.ablate_padding(smoke_depth.replace(epochs=1), tmp_path)
    assert [r.strategy for r in rows] == ["zero", "mean", "learned"]
    assert {r["run_id"] for r in records} == {"depth-pvm-zero-s0", "depth-pvm-mean-s0", "depth-pvm-learned-s0"}
    with pytest.raises(ValueError):
        ex.ablate_padding(load_config(CONFIGS / "smoke-cls.ini"))
