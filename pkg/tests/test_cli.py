import json
import subprocess
import sys

import pytest

from hulk.cli import main

MICRO = dict(d_model=16, enc_layers=1, dec_layers=1, heads=2, d_sem=16, patch_size=16)


@pytest.fixture
def run_dir(tmp_path):
    assert main(["gen-data", "--task", "attribute", "--n", "3", "--seed", "1",
                 "--out", str(tmp_path / "attr.jsonl")]) == 0
    cfg = {"model": MICRO,
           "tasks": [{"name": "attribute", "lambda": 1.0, "batch": 2, "data": "attr.jsonl"},
                     {"name": "skeleton", "lambda": 0.5, "batch": 2, "data": {"n": 2, "frames": 4}}],
           "optim": {"steps": 4, "warmup": 1, "seed": 0, "checkpoint_every": 2}}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    return tmp_path


def test_train_eval_translate(run_dir, capsys):
    out = run_dir / "out"
    assert main(["train", "--config", str(run_dir / "run.json"), "--out", str(out)]) == 0
    lines = (out / "loss_log.jsonl").read_text().splitlines()
    assert len(lines) == 4
    rec = json.loads(lines[0])
    assert set(rec) == {"step", "task", "loss", "components"}
    assert (out / "checkpoints" / "step_000002.ckpt").exists()
    capsys.readouterr()

    assert main(["eval", "--config", str(run_dir / "run.json"), "--ckpt", str(out / "final.ckpt"),
                 "--task", "attribute"]) == 0
    rep = json.loads(capsys.readouterr().out.strip())
    assert rep["task"] == "attribute" and set(rep["metrics"]) == {"mA"} and rep["n"] == 3
    assert main(["eval", "--config", str(run_dir / "run.json"), "--ckpt", str(out / "final.ckpt"),
                 "--task", "caption"]) == 2

    assert main(["translate", "--ckpt", str(out / "final.ckpt"), "--task", "attribute",
                 "--input", str(run_dir / "attr.jsonl")]) == 0
    res = json.loads(capsys.readouterr().out)
    assert res["task"] == "attribute" and isinstance(res["output"]["words"], list)

    # resume from the mid-run checkpoint gives the same final weights
    out2 = run_dir / "out2"
    assert main(["train", "--config", str(run_dir / "run.json"), "--out", str(out2),
                 "--resume", str(out / "checkpoints" / "step_000002.ckpt")]) == 0
    assert (out2 / "final.ckpt").read_bytes() == (out / "final.ckpt").read_bytes()


def test_resume_refuses_mismatch(run_dir, capsys):
    out = run_dir / "out"
    main(["train", "--config", str(run_dir / "run.json"), "--out", str(out)])
    cfg = json.loads((run_dir / "run.json").read_text())
    cfg["optim"]["lr"] = 5e-3
    (run_dir / "other.json").write_text(json.dumps(cfg))
    with pytest.raises(Exception, match="hash"):
        main(["train", "--config", str(run_dir / "other.json"), "--out", str(run_dir / "o"),
              "--resume", str(out / "final.ckpt")])


def test_gradcheck_cli(capsys):
    assert main(["gradcheck", "--task", "attribute"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "all groups within 0.0001" in out


def test_console_entry_point():
    r = subprocess.run([sys.executable, "-m", "hulk.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("train", "eval", "gradcheck", "translate", "gen-data"):
        assert cmd in r.stdout
