"""Train a small two-task model, checkpoint it, and translate one image.

Caption (image -> text) and 3-D pose (image -> sparse label) share the
encoder and decoder; only the codecs and indicators differ.
"""
import tempfile
from pathlib import Path

from hulk import harness as H
from hulk.checkpoint import save_checkpoint
from hulk.tasks import SyntheticDatasetConfig, synth_generate

cfg = H.RunConfig.from_dict({
    "model": {"patch_size": 8},
    "tasks": [{"name": "caption", "data": {"n": 8, "seed": 1}},
              {"name": "pose3d", "data": {"n": 8, "seed": 1}}],
    "optim": {"lr": 3e-3, "steps": 400, "warmup": 50, "weight_decay": 0.0,
              "precision": "single"}})

res = H.train(cfg, on_step=lambda r: r["step"] % 100 == 0 and
              print(f"step {r['step']:>4} {r['task']:<8} loss {r['loss']:.4f}"))
for k, rep in res.metrics.items():
    print(k, {m: round(v, 4) for m, v in rep.metrics.items()})

with tempfile.TemporaryDirectory() as d:
    ckpt = Path(d) / "demo.ckpt"
    save_checkpoint(ckpt, res.state(cfg))
    sample, truth = synth_generate(SyntheticDatasetConfig("caption", n=8, seed=1))[3]
    out = H.translate_once(ckpt, "caption", sample)
    print("target :", " ".join(truth["caption"]))
    print("decoded:", " ".join(out["output"]["words"]))
