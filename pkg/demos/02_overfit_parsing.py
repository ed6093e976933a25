"""Watch mIoU climb while a single-task model memorises eight parsing images."""
from hulk import harness as H

cfg = H.RunConfig.from_dict({
    "model": {"patch_size": 8},
    "tasks": [{"name": "parsing", "batch": 8, "data": {"n": 8, "seed": 1}}],
    "optim": {"lr": 3e-3, "steps": 800, "warmup": 50, "weight_decay": 0.0,
              "precision": "single"}})
data = {t.id: H.load_task_data(t) for t in cfg.tasks}

print("step    0  mIoU", round(H.evaluate_model(H.build_model(cfg), data)["parsing"].metrics["miou"], 4))
prev = None
for stop in (100, 200, 400, 800):
    res = H.train(cfg, data=data, stop_at=stop, resume=prev)
    prev = res.state(cfg)
    print(f"step {stop:>4}  mIoU {res.metrics['parsing'].metrics['miou']:.4f}")
