"""Training and evaluation engine.

Steps visit tasks round-robin, one task per optimisation step. Batches are
drawn from ``default_rng([seed, task_index, visit])`` and drop-path from a
torch seed derived from ``(seed, step)``, and the learning rate is a pure
function of the step, so the whole run state is the parameters, the
optimizer moments and the step counter.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from . import metrics as M
from .checkpoint import array_to_bytes, bytes_to_array, load_checkpoint, save_checkpoint
from .codecs import END_WORD, Modality, ModalitySample
from .model import HulkModel, ModelConfig
from .objectives import gradient_norm_probe
from .tasks import (ATTRIBUTES, DETECTION_CLASSES, JOINT_NAMES, SyntheticDatasetConfig,
                    encode_targets, get_task, load_dataset, synth_generate)


class TrainingError(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


# -- configuration ------------------------------------------------------------------

@dataclass
class TaskEntry:
    name: str
    id: str = ""
    lam: float = 1.0
    batch: int = 8
    data: Union[None, str, dict] = None

    def __post_init__(self):
        get_task(self.name)
        self.id = self.id or self.name
        if self.lam < 0:
            raise ValueError(f"task {self.id}: lambda must be >= 0")
        if self.batch < 1:
            raise ValueError(f"task {self.id}: batch must be >= 1")


@dataclass
class OptimConfig:
    lr: float = 1e-3
    warmup: int = 50
    steps: int = 1000
    weight_decay: float = 0.01
    seed: int = 0
    precision: str = "double"
    checkpoint_every: int = 0
    divergence_factor: float = 1e4

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if self.lr <= 0 or self.warmup < 0:
            raise ValueError("invalid learning-rate schedule")

    @property
    def dtype(self):
        return torch.float64 if self.precision == "double" else torch.float32

    def lr_at(self, step: int) -> float:
        warm = min(1.0, (step + 1) / self.warmup) if self.warmup else 1.0
        return self.lr * warm * 0.5 * (1.0 + math.cos(math.pi * step / self.steps))


@dataclass
class RunConfig:
    model: ModelConfig
    tasks: List[TaskEntry]
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("config needs at least one task")
        ids = [t.id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate dataset ids in {ids}")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "tasks", "optim"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        tasks = []
        for t in d.get("tasks", []):
            t = dict(t)
            if "lambda" in t:
                t["lam"] = t.pop("lambda")
            tasks.append(TaskEntry(**t))
        return cls(ModelConfig.from_dict(d.get("model", {})), tasks,
                   OptimConfig(**d.get("optim", {})))

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        tasks = []
        for t in self.tasks:
            e = asdict(t)
            e["lambda"] = e.pop("lam")
            tasks.append(e)
        return {"model": self.model.to_dict(), "tasks": tasks, "optim": asdict(self.optim)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


# -- data ---------------------------------------------------------------------------

@dataclass
class TaskData:
    entry: TaskEntry
    samples: List[ModalitySample]
    targets: List[dict]
    truth: List[dict]


def load_task_data(entry: TaskEntry, base_dir: Optional[Path] = None) -> TaskData:
    spec = get_task(entry.name)
    if isinstance(entry.data, str):
        path = Path(entry.data)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        pairs = load_dataset(path, entry.name)
    else:
        pairs = synth_generate(SyntheticDatasetConfig.from_dict(entry.name, entry.data or {}))
    if not pairs:
        raise ValueError(f"dataset for {entry.id} is empty")
    samples = [s for s, _ in pairs]
    truth = [g for _, g in pairs]
    hw = samples[0].image.shape[-2:] if samples[0].kind is Modality.IMAGE else None
    targets = [encode_targets(spec, g, hw) for g in truth]
    return TaskData(entry, samples, targets, truth)


def batch_indices(seed: int, task_index: int, visit: int, n: int, batch: int) -> List[int]:
    if batch >= n:
        return list(range(n))
    rng = np.random.default_rng([seed, task_index, visit])
    return sorted(rng.choice(n, size=batch, replace=False).tolist())


# -- model / checkpoint state ---------------------------------------------------------

def build_model(cfg: RunConfig) -> HulkModel:
    # init draws in f32 regardless of the global default so runs do not depend on it
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float32)
    try:
        torch.manual_seed(cfg.optim.seed)
        model = HulkModel(cfg.model, [(t.id, t.name) for t in cfg.tasks])
    finally:
        torch.set_default_dtype(prev)
    return model.to(cfg.optim.dtype)


def make_optimizer(model: HulkModel, cfg: RunConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(model.parameters(), lr=cfg.optim.lr,
                             weight_decay=cfg.optim.weight_decay)


def _np(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy()


def pack_state(model: HulkModel, optimizer, step: int, cfg: RunConfig) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for name, p in model.named_parameters():
        out[f"model/{name}"] = _np(p)
    if optimizer is not None:
        # parameter order, not first-use order, so files are reproducible after reload
        for n, p in model.named_parameters():
            st = optimizer.state.get(p)
            if not st:
                continue
            out[f"optim/{n}/exp_avg"] = _np(st["exp_avg"])
            out[f"optim/{n}/exp_avg_sq"] = _np(st["exp_avg_sq"])
            out[f"optim/{n}/step"] = np.asarray(float(st["step"]), dtype=np.float64)
    out["meta/step"] = np.asarray(float(step))
    out["meta/rng_seed"] = np.asarray(float(cfg.optim.seed))
    out["meta/config_hash"] = bytes_to_array(bytes.fromhex(cfg.hash()))
    out["meta/config"] = bytes_to_array(cfg.to_json().encode("utf-8"))
    return out


def checkpoint_config(tensors) -> RunConfig:
    raw = array_to_bytes(tensors["meta/config"]).decode("utf-8")
    return RunConfig.from_dict(json.loads(raw))


def checkpoint_hash(tensors) -> str:
    return array_to_bytes(tensors["meta/config_hash"]).hex()


def restore_state(tensors, model: HulkModel, optimizer=None) -> int:
    params = dict(model.named_parameters())
    missing = [n for n in params if f"model/{n}" not in tensors]
    if missing:
        raise CheckpointMismatch(f"checkpoint lacks parameters: {missing[:5]}")
    with torch.no_grad():
        for n, p in params.items():
            arr = tensors[f"model/{n}"]
            if arr.shape != tuple(p.shape):
                raise CheckpointMismatch(f"{n}: shape {arr.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    if optimizer is not None:
        for n, p in params.items():
            key = f"optim/{n}/exp_avg"
            if key in tensors:
                dt = p.dtype
                optimizer.state[p] = {
                    "step": torch.tensor(float(tensors[f"optim/{n}/step"])),
                    "exp_avg": torch.from_numpy(tensors[key]).to(dt),
                    "exp_avg_sq": torch.from_numpy(tensors[f"optim/{n}/exp_avg_sq"]).to(dt),
                }
    return int(tensors["meta/step"])


def check_compatible(tensors, cfg: RunConfig) -> None:
    got, want = checkpoint_hash(tensors), cfg.hash()
    if got != want:
        raise CheckpointMismatch(f"checkpoint config hash {got} does not match config {want}")


# -- metrics ------------------------------------------------------------------------

def task_metrics(task: str, preds: Sequence[dict], targets: Sequence[dict],
                 samples: Sequence[ModalitySample]) -> Dict[str, float]:
    if task == "parsing":
        return {"miou": M.miou([p["labels"] for p in preds], [t["labels"] for t in targets],
                               len(get_task(task).classes))}
    if task == "pose2d":
        h, w = samples[0].image.shape[-2:]
        joints = np.stack([p["joints"] for p in preds])
        gt = np.stack([t["joints"] for t in targets])
        return {"pck_0.1": M.pck(joints, gt, math.hypot(h, w), 0.1)}
    if task == "attribute":
        return {"mA": M.attribute_mA([p["bits"] for p in preds], [t["bits"] for t in targets])}
    if task == "caption":
        cands = [strip_end(p["caption"]) for p in preds]
        refs = [strip_end(t["words"]) for t in targets]
        return {"bleu4": float(np.mean([M.bleu4(c, [r]) if c else 0.0
                                        for c, r in zip(cands, refs)])),
                "exact": float(np.mean([c == r for c, r in zip(cands, refs)]))}
    if task == "detection":
        return M.detection_metrics([(p["boxes"], p["scores"]) for p in preds],
                                   [t["boxes"] for t in targets])
    if task == "pose3d":
        per = [M.pose3d_metrics(p["joints3d"], t["joints3d"]) for p, t in zip(preds, targets)]
        return {k: float(np.mean([r[k] for r in per])) for k in ("mpjpe", "pa_mpjpe")}
    if task == "mesh":
        return {"mpvpe": float(np.mean([M.mpvpe(p["vertices"], t["vertices"])
                                        for p, t in zip(preds, targets)]))}
    if task == "skeleton":
        return {"accuracy": M.action_accuracy([p["action"] for p in preds],
                                              [t["action"] for t in targets])}
    raise KeyError(task)


def strip_end(words):
    words = list(words)
    return words[:words.index(END_WORD)] if END_WORD in words else words


def evaluate_model(model: HulkModel, data: Dict[str, TaskData], batch: int = 16
                   ) -> Dict[str, M.MetricReport]:
    model.eval()
    reports = {}
    for ds, td in data.items():
        preds = []
        for i in range(0, len(td.samples), batch):
            preds += model.predict(ds, td.samples[i:i + batch])
        reports[ds] = M.MetricReport(task_metrics(td.entry.name, preds, td.targets, td.samples),
                                     len(td.samples), ds)
    return reports


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: HulkModel
    optimizer: torch.optim.Optimizer
    step: int
    log: List[dict]
    metrics: Dict[str, M.MetricReport]

    def state(self, cfg: RunConfig) -> Dict[str, np.ndarray]:
        return pack_state(self.model, self.optimizer, self.step, cfg)


def train(cfg: RunConfig, log_path=None, checkpoint_dir=None, resume=None,
          stop_at: Optional[int] = None, data: Optional[Dict[str, TaskData]] = None,
          base_dir=None, evaluate_at_end: bool = True,
          on_step: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Run the round-robin schedule from the start (or a checkpoint) to ``stop_at``.

    ``resume`` is a checkpoint path or tensor dict whose config hash must
    match ``cfg``.
    """
    prev_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train(cfg, log_path, checkpoint_dir, resume, stop_at, data, base_dir,
                      evaluate_at_end, on_step)
    finally:
        torch.set_num_threads(prev_threads)


def _train(cfg, log_path, checkpoint_dir, resume, stop_at, data, base_dir, evaluate_at_end,
           on_step):
    o = cfg.optim
    if data is None:
        data = {t.id: load_task_data(t, base_dir) for t in cfg.tasks}
    model = build_model(cfg)
    optimizer = make_optimizer(model, cfg)
    start = 0
    if resume is not None:
        tensors = load_checkpoint(resume) if not isinstance(resume, dict) else resume
        check_compatible(tensors, cfg)
        start = restore_state(tensors, model, optimizer)
    end = o.steps if stop_at is None else min(stop_at, o.steps)
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    log: List[dict] = []
    fh = open(log_path, "a" if start else "w", encoding="utf-8") if log_path else None
    first: Dict[str, float] = {}
    model.train()
    try:
        for step in range(start, end):
            k = step % len(cfg.tasks)
            entry = cfg.tasks[k]
            td = data[entry.id]
            idx = batch_indices(o.seed, k, step // len(cfg.tasks), len(td.samples), entry.batch)
            torch.manual_seed(o.seed * 1_000_003 + step)
            for g in optimizer.param_groups:
                g["lr"] = o.lr_at(step)
            report = model.loss(entry.id, [td.samples[i] for i in idx],
                                [td.targets[i] for i in idx])
            value = float(report.total.detach())
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (task {entry.id})")
            first.setdefault(entry.id, value)
            if value > o.divergence_factor * max(first[entry.id], 1e-8):
                raise TrainingError(f"loss diverged at step {step} (task {entry.id}): "
                                    f"{value:.4g} vs initial {first[entry.id]:.4g}")
            optimizer.zero_grad(set_to_none=True)
            (entry.lam * report.total).backward()
            optimizer.step()
            rec = {"step": step, "task": entry.id, "loss": value,
                   "components": report.scalars()}
            log.append(rec)
            if fh:
                fh.write(json.dumps(rec) + "\n")
            if on_step:
                on_step(rec)
            if checkpoint_dir is not None and o.checkpoint_every and (step + 1) % o.checkpoint_every == 0:
                save_checkpoint(Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt",
                                pack_state(model, optimizer, step + 1, cfg))
    finally:
        if fh:
            fh.close()
    step = max(end, start)
    metrics = evaluate_model(model, data) if evaluate_at_end else {}
    model.train()
    return TrainResult(model, optimizer, step, log, metrics)


# -- evaluation / inference ---------------------------------------------------------------

def load_model(tensors, cfg: Optional[RunConfig] = None) -> HulkModel:
    if cfg is None:
        cfg = checkpoint_config(tensors)
    else:
        check_compatible(tensors, cfg)
    model = build_model(cfg)
    restore_state(tensors, model)
    model.eval()
    return model


def evaluate(cfg: RunConfig, checkpoint, tasks: Optional[Sequence[str]] = None,
             base_dir=None) -> Dict[str, M.MetricReport]:
    tensors = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    model = load_model(tensors, cfg)
    ids = {t.id: t for t in cfg.tasks}
    wanted = list(tasks) if tasks else list(ids)
    for t in wanted:
        if t not in ids:
            raise KeyError(f"unknown task {t!r}; configured: {', '.join(ids)}")
    data = {t: load_task_data(ids[t], base_dir) for t in wanted}
    return evaluate_model(model, data)


def _prediction_json(task: str, pred: dict, model: HulkModel) -> dict:
    if task == "parsing":
        return {"modality": "dense", "labels": pred["labels"].tolist(),
                "classes": list(get_task(task).classes)}
    if task == "pose2d":
        return {"modality": "sparse", "points": [{"name": n, "xy": [float(v) for v in xy]}
                                                  for n, xy in zip(JOINT_NAMES, pred["joints"])]}
    if task == "attribute":
        return {"modality": "text",
                "words": [a for a, b in zip(ATTRIBUTES, pred["bits"]) if b]}
    if task == "caption":
        return {"modality": "text", "words": strip_end(pred["caption"])}
    if task == "detection":
        keep = np.where(pred["scores"] >= 0.5)[0]
        keep = keep[np.argsort(-pred["scores"][keep], kind="stable")]
        return {"modality": "sparse",
                "boxes": [{DETECTION_CLASSES[0]: [float(v) for v in pred["boxes"][i]],
                           "score": float(pred["scores"][i])} for i in keep]}
    if task == "pose3d":
        return {"modality": "sparse", "points": [{"name": n, "xyz": [float(v) for v in p]}
                                                  for n, p in zip(JOINT_NAMES, pred["joints3d"])]}
    if task == "mesh":
        return {"modality": "sparse", "vertices": pred["vertices"].tolist()}
    if task == "skeleton":
        return {"modality": "text", "words": [get_task(task).classes[pred["action"]]]}
    raise KeyError(task)


def read_sample(path) -> ModalitySample:
    with open(path, encoding="utf-8") as fh:
        text = fh.read().strip()
    try:
        rec = json.loads(text)
    except json.JSONDecodeError:
        # a JSON-lines dataset file: take its first record
        rec = json.loads(text.splitlines()[0])
    if "input" in rec and "kind" not in rec:
        rec = rec["input"]
    return ModalitySample.from_json(rec)


def translate_once(checkpoint, task: str, sample: ModalitySample) -> dict:
    tensors = load_checkpoint(checkpoint) if not isinstance(checkpoint, dict) else checkpoint
    model = load_model(tensors)
    matches = [ds for ds, spec in model.datasets.items() if ds == task] or \
              [ds for ds, spec in model.datasets.items() if spec.name == task]
    if not matches:
        raise KeyError(f"checkpoint has no dataset for task {task!r}")
    ds = matches[0]
    spec = model.datasets[ds]
    if sample.kind is not spec.input_modality:
        raise ValueError(f"task {spec.name} expects {spec.input_modality.value} input, "
                         f"got {sample.kind.value}")
    pred = model.predict(ds, [sample])[0]
    return {"task": spec.name, "output": _prediction_json(spec.name, pred, model)}


# -- task-weight calibration ------------------------------------------------------------------

GRID = (0.1, 0.3, 1.0, 3.0, 10.0)


@dataclass
class CalibrationResult:
    raw_norms: Dict[str, float]
    base_lambdas: Dict[str, float]
    multipliers: Dict[str, float]
    lambdas: Dict[str, float]
    calibrated_norms: Dict[str, float]

    @staticmethod
    def spread(norms: Dict[str, float]) -> float:
        v = np.asarray(list(norms.values()))
        return float(v.max() / v.min())


def probe_norms(model: HulkModel, data: Dict[str, TaskData],
                lambdas: Optional[Dict[str, float]] = None) -> Dict[str, float]:
    model.train()
    losses = {}
    for ds, td in data.items():
        lam = 1.0 if lambdas is None else lambdas[ds]
        losses[ds] = lam * model.loss(ds, td.samples, td.targets).total
    return gradient_norm_probe(model.probe, losses)


def calibrate_task_weights(model: HulkModel, data: Dict[str, TaskData], grid=GRID,
                           score_fn: Optional[Callable[[Dict[str, float]], float]] = None,
                           max_spread: float = 10.0) -> CalibrationResult:
    """Two-step task weighting.

    Step 1 sets ``lambda_i = ref / g_i`` where ``g_i`` is the probe gradient
    norm of task ``i`` and ``ref`` their geometric mean. Step 2 scales each
    weight in turn by a grid multiplier; ``score_fn(lambdas)`` (higher is
    better) sees the full candidate weight dict. A multiplier is only tried
    if the calibrated norms stay strictly within ``max_spread`` of each other.
    """
    raw = probe_norms(model, data)
    if any(v == 0 for v in raw.values()):
        raise ValueError(f"zero probe gradient: {raw}")
    ref = float(np.exp(np.mean(np.log(list(raw.values())))))
    base = {k: ref / v for k, v in raw.items()}
    mult = {k: 1.0 for k in raw}
    if score_fn is not None:
        best_score = score_fn(base)
        for k in raw:
            best = 1.0
            for m in grid:
                if m == 1.0:
                    continue
                trial = dict(mult, **{k: m})
                norms = {t: raw[t] * base[t] * trial[t] for t in raw}
                # strict, so measured norms cannot round onto the wrong side of the bound
                if CalibrationResult.spread(norms) >= max_spread:
                    continue
                s = score_fn({t: base[t] * trial[t] for t in raw})
                if s > best_score:
                    best, best_score = m, s
            mult[k] = best
    lambdas = {k: base[k] * mult[k] for k in raw}
    after = probe_norms(model, data, lambdas)
    return CalibrationResult(raw, base, mult, lambdas, after)
