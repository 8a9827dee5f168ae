import subprocess
import sys

import pytest

from attnvar import data, harness
from attnvar.cli import main

TINY = [
    "--set", "hidden=8", "--set", "emb_dim=8", "--set", "vocab_size=60", "--set", "batch_size=4",
    "--set", "pretrain_iters=12", "--set", "finetune_iters=6", "--set", "eval_every=6",
    "--set", "beam_size=2", "--set", "max_decode_len=8", "--set", "seeds=0",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "data"), "--train", "30", "--val", "6", "--test", "5", "--seed", "1"]) == 0
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), *TINY]) == 0
    return root


def test_gen_data_writes_splits(workspace):
    d = workspace / "data"
    assert [len(data.read_corpus(d / f"{s}.tsv")) for s in ("train", "val", "test")] == [30, 6, 5]
    meta = harness.parse_key_values((d / "task.meta").read_text())
    assert meta["seed"] == "1" and meta["train"] == "30"


def test_train_writes_every_artifact(workspace):
    run = workspace / "run"
    for name in ("config.echo", "run.log", "metrics.csv", "decoded.txt", "attention_stats.csv", "final.ckpt", "phase1.ckpt"):
        assert (run / name).exists(), name
    assert len(list((run / "attention").iterdir())) == 5
    assert "hidden = 8" in (run / "config.echo").read_text()


def test_evaluate_decode_analyze(workspace, capsys):
    run, d = workspace / "run", workspace / "data"
    ck = str(run / "final.ckpt")
    assert main(["evaluate", "--checkpoint", ck, "--corpus", str(d / "test.tsv"), "--out", str(workspace / "ev"),
                 "--vocab", str(run / "vocab.txt")]) == 0
    assert "rouge1=" in capsys.readouterr().out
    assert (workspace / "ev" / "metrics.csv").read_text() == (run / "metrics.csv").read_text().replace("final,", "final,", 1)
    assert main(["decode", "--checkpoint", ck, "--input", str(d / "test.tsv"), "--output", str(workspace / "dec.txt")]) == 0
    assert (workspace / "dec.txt").read_text() == (run / "decoded.txt").read_text()
    assert main(["analyze", "--checkpoint", ck, "--corpus", str(d / "test.tsv"), "--out", str(workspace / "an")]) == 0
    assert (workspace / "an" / "attention_stats.csv").read_text() == (run / "attention_stats.csv").read_text()


def test_vocab_mismatch_exits_nonzero(workspace, tmp_path, capsys):
    bad = tmp_path / "vocab.txt"
    data.Vocabulary(["zzz"]).save(bad)
    code = main(["evaluate", "--checkpoint", str(workspace / "run" / "final.ckpt"),
                 "--corpus", str(workspace / "data" / "test.tsv"), "--out", str(tmp_path), "--vocab", str(bad)])
    assert code == 2 and "vocabulary" in capsys.readouterr().err


def test_bad_config_key_exits_nonzero(workspace, tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("wat = 3\n")
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path), "--config", str(cfg)]) == 2


def test_ablation_command(workspace, capsys):
    out = workspace / "abl"
    assert main(["ablation", "--data", str(workspace / "data"), "--out", str(out), *TINY]) == 0
    assert len(harness.read_csv(out / "ablation.csv")) == 4 + 4
    assert "pgn+aru+local+global" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "attnvar", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train", "evaluate", "decode", "analyze", "ablation"):
        assert cmd in res.stdout
