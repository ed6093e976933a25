"""Command-line entry point: train, eval, gradcheck, translate, gen-data."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .checkpoint import save_checkpoint
from .gradcheck import model_gradcheck
from .tasks import TASK_NAMES, SyntheticDatasetConfig, save_dataset, synth_generate


def cmd_train(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.config).resolve().parent

    def show(rec):
        if args.verbose or rec["step"] % max(1, cfg.optim.steps // 20) == 0:
            print(f"step {rec['step']:>6}  {rec['task']:<12} loss {rec['loss']:.5f}",
                  file=sys.stderr)

    try:
        res = harness.train(cfg, log_path=out / "loss_log.jsonl",
                            checkpoint_dir=out / "checkpoints", resume=args.resume,
                            base_dir=base, on_step=show)
    except harness.TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    save_checkpoint(out / "final.ckpt", res.state(cfg))
    metrics = {k: r.metrics for k, r in res.metrics.items()}
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    cfg = harness.RunConfig.load(args.config)
    try:
        reports = harness.evaluate(cfg, args.ckpt, args.task,
                                   base_dir=Path(args.config).resolve().parent)
    except (KeyError, harness.CheckpointMismatch) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    for r in reports.values():
        print(r.to_json())
    return 0


def cmd_gradcheck(args) -> int:
    report = model_gradcheck(args.tol, args.task)
    for r in report.results:
        if r.max_rel_error is not None or args.verbose:
            print(r.line())
    if not report.passed:
        print("offending groups:", file=sys.stderr)
        for r in report.offenders:
            print(f"  {r.loss}/{r.group}: {r.max_rel_error:.3e}", file=sys.stderr)
        return 1
    print(f"all groups within {args.tol:g}")
    return 0


def cmd_translate(args) -> int:
    try:
        sample = harness.read_sample(args.input)
        out = harness.translate_once(args.ckpt, args.task, sample)
    except (KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(out))
    return 0


def cmd_gen_data(args) -> int:
    cfg = SyntheticDatasetConfig(args.task, n=args.n, seed=args.seed)
    save_dataset(args.out, args.task, synth_generate(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hulk")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train from a JSON run config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", default="run")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--task", nargs="*", default=None)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every task loss")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--task", nargs="*", default=None, choices=TASK_NAMES)
    g.add_argument("-v", "--verbose", action="store_true")
    g.set_defaults(fn=cmd_gradcheck)

    r = sub.add_parser("translate", help="run one sample through a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--task", required=True)
    r.add_argument("--input", required=True)
    r.set_defaults(fn=cmd_translate)

    d = sub.add_parser("gen-data", help="write a synthetic JSON-lines dataset")
    d.add_argument("--task", required=True, choices=TASK_NAMES)
    d.add_argument("--n", type=int, default=8)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
