import hashlib
import subprocess
import sys

import pytest

from flowrec.cli import blob_hash, main
from flowrec.config import RunConfig
from flowrec.evaluation import MetricsReport

from conftest import cyclic_rows, write_log


@pytest.fixture
def toy_cfg(tmp_path):
    data = write_log(tmp_path / "toy.tsv", cyclic_rows("u1", 10) + cyclic_rows("u2", 9))
    cfg = RunConfig(seed=7).replace(**{
        "data.path": str(data), "model.dim": "8", "model.heads": "2", "model.decoder1_layers": "1",
        "model.decoder2_layers": "1", "model.max_len": "4", "model.recon_hidden": "8",
        "train.epochs": "3", "train.batch_size": "8", "sampler.steps": "3",
    })
    path = tmp_path / "run.cfg"
    cfg.save(path)
    return path


def test_blob_hash_matches_git(tmp_path):
    (tmp_path / "f").write_bytes(b"hello\n")
    # `git hash-object` of "hello\n"
    assert blob_hash(tmp_path / "f") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert blob_hash(tmp_path / "f") == hashlib.sha1(b"blob 6\x00hello\n").hexdigest()


def test_train_writes_complete_run_dir(toy_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", str(toy_cfg), "--out", str(out)]) == 0
    for name in ("config.ini", "inputs.sha1", "train_log.tsv", "last.ckpt", "best.ckpt",
                 "metrics.tsv", "metrics.kv"):
        assert (out / name).exists(), name
    assert RunConfig.load(out / "config.ini").seed == 7
    assert len((out / "train_log.tsv").read_text().splitlines()) == 4
    kv = MetricsReport.parse_kv((out / "metrics.kv").read_text())
    assert kv["users"] == "2"
    assert capsys.readouterr().out.startswith("metric\tvalue_pct")


def test_train_is_deterministic_per_seed(toy_cfg, tmp_path):
    logs = []
    for name in ("a", "b"):
        main(["train", "--config", str(toy_cfg), "--seed", "7", "--out", str(tmp_path / name)])
        logs.append((tmp_path / name / "train_log.tsv").read_text().splitlines()[1])
    assert logs[0] == logs[1]


def test_evaluate_and_recommend(toy_cfg, tmp_path, capsys):
    out = tmp_path / "run"
    main(["train", "--config", str(toy_cfg), "--out", str(out)])
    capsys.readouterr()
    assert main(["evaluate", "--run", str(out), "--split", "valid"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "metric\tvalue_pct"

    assert main(["recommend", "--run", str(out), "--items", "i0,i1,i2", "--k", "2", "--seed", "3"]) == 0
    first = capsys.readouterr().out.splitlines()
    assert len(first) == 2
    rank, item, score = first[0].split("\t")
    assert rank == "1" and item.startswith("i") and float(score) == float(score)
    main(["recommend", "--checkpoint", str(out / "best.ckpt"), "--items", "i0,i1,i2", "--k", "2",
          "--seed", "3"])
    assert capsys.readouterr().out.splitlines() == first
    assert main(["recommend", "--run", str(out), "--user", "u2", "--k", "3"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 3


def test_errors_give_nonzero_exit(toy_cfg, tmp_path, capsys):
    empty = tmp_path / "empty.cfg"
    empty.write_text("[train]\nepochs = 1\n")
    assert main(["train", "--config", str(empty), "--out", str(tmp_path / "x")]) == 1
    assert "data.path" in capsys.readouterr().err
    bad = tmp_path / "bad.cfg"
    bad.write_text("[flow]\nwobble = 1\n")
    assert main(["train", "--config", str(bad)]) == 1
    assert main(["train", "--config", str(toy_cfg), "--set", "flow.s"]) == 1
    out = tmp_path / "run"
    main(["train", "--config", str(toy_cfg), "--out", str(out)])
    assert main(["recommend", "--run", str(out), "--items", "nope"]) == 1
    assert main(["evaluate", "--run", str(tmp_path / "missing")]) == 1


def test_ablate_writes_comparison_table(toy_cfg, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", str(toy_cfg), "--preset", "loss_target", "--out", str(out),
                 "--set", "train.epochs=1"]) == 0
    lines = (out / "ablation_loss_target.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["train.loss_target", "HR@5", "HR@10", "HR@20",
                                    "NDCG@5", "NDCG@10", "NDCG@20"]
    assert [line.split("\t")[0] for line in lines[1:]] == ["x_prediction", "v_prediction"]


def test_console_entry_point_runs():
    proc = subprocess.run([sys.executable, "-m", "flowrec.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "recommend" in proc.stdout
