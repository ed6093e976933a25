"""Central finite-difference checks of analytic gradients (double precision)."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

H = 1e-5
FLOOR = 1e-7


def relative_error(fd: float, an: float, floor: float = FLOOR) -> float:
    return abs(fd - an) / max(abs(fd), abs(an), floor)


def numeric_grad(f: Callable[[], torch.Tensor], x: torch.Tensor, h: float = H) -> torch.Tensor:
    """Elementwise central differences of scalar ``f()`` w.r.t. tensor ``x`` (in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            fp = float(f())
            flat[i] = orig - h
            fm = float(f())
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return g


def check_elementwise(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor],
                      h: float = H) -> float:
    """Max relative error between autograd and central differences over all inputs."""
    xs = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    grads = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    for k, x in enumerate(xs):
        an = grads[k] if grads[k] is not None else torch.zeros_like(x)
        fd = numeric_grad(lambda: f(*xs), x, h)
        for a, b in zip(fd.reshape(-1).tolist(), an.reshape(-1).tolist()):
            worst = max(worst, relative_error(a, b))
    return worst


def directional_error(f: Callable[[], torch.Tensor], params: Sequence[torch.Tensor],
                      grads: Sequence[torch.Tensor], direction: Sequence[torch.Tensor],
                      h: float = H) -> float:
    """Compare ``<grad, u>`` with ``(f(p + h u) - f(p - h u)) / 2h``."""
    an = float(sum((g * u).sum() for g, u in zip(grads, direction)))
    with torch.no_grad():
        for p, u in zip(params, direction):
            p.add_(h * u)
        fp = float(f())
        for p, u in zip(params, direction):
            p.sub_(2 * h * u)
        fm = float(f())
        for p, u in zip(params, direction):
            p.add_(h * u)
    return relative_error((fp - fm) / (2 * h), an)


@dataclass
class GroupResult:
    loss: str
    group: str
    max_rel_error: Optional[float]
    passed: bool
    notice: str = ""

    def line(self) -> str:
        if self.max_rel_error is None:
            return f"SKIP {self.loss:<10} {self.group:<36} {self.notice}"
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.loss:<10} {self.group:<36} max_rel={self.max_rel_error:.3e}"


@dataclass
class GradcheckReport:
    tolerance: float
    results: List[GroupResult] = field(default_factory=list)

    @property
    def offenders(self) -> List[GroupResult]:
        return [r for r in self.results if r.max_rel_error is not None and not r.passed]

    @property
    def passed(self) -> bool:
        return not self.offenders

    def lines(self) -> List[str]:
        return [r.line() for r in self.results]


def group_name(param_name: str) -> str:
    """``encoder.blocks.0.attn.qkv.weight`` -> ``encoder.blocks.0`` etc."""
    m = re.match(r"(.*?\.blocks\.\d+)\.", param_name)
    if m:
        return m.group(1)
    parts = param_name.split(".")
    return ".".join(parts[:3]) if len(parts) > 3 else ".".join(parts[:-1])


def parameter_groups(module: torch.nn.Module) -> Dict[str, List[torch.nn.Parameter]]:
    groups: Dict[str, List[torch.nn.Parameter]] = {}
    for name, p in module.named_parameters():
        groups.setdefault(group_name(name), []).append(p)
    return groups


def check_groups(loss_name: str, f: Callable[[], torch.Tensor],
                 groups: Dict[str, List[torch.nn.Parameter]], tolerance: float = 1e-4,
                 directions: int = 2, seed: int = 0, h: float = H,
                 corrupt: Optional[Callable[[str, List[torch.Tensor]], List[torch.Tensor]]] = None
                 ) -> List[GroupResult]:
    """Directional FD check of every parameter group of one scalar loss.

    ``corrupt(group, grads)`` may alter the analytic gradients before the
    comparison (negative-control fixture).
    """
    names = list(groups)
    flat = [p for n in names for p in groups[n]]
    loss = f()
    grads = torch.autograd.grad(loss, flat, allow_unused=True) if flat else []
    gen = torch.Generator().manual_seed(seed)
    out, k = [], 0
    for name in names:
        params = groups[name]
        gs = list(grads[k:k + len(params)])
        k += len(params)
        if sum(p.numel() for p in params) == 0:
            out.append(GroupResult(loss_name, name, None, True, "zero parameters, skipped"))
            continue
        if all(g is None for g in gs):
            out.append(GroupResult(loss_name, name, None, True, "not used by this loss, skipped"))
            continue
        gs = [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]
        if corrupt is not None:
            gs = corrupt(name, gs)
        worst = 0.0
        for _ in range(directions):
            u = [torch.randn(p.shape, generator=gen, dtype=p.dtype) for p in params]
            norm = float(torch.sqrt(sum((x ** 2).sum() for x in u)))
            u = [x / norm for x in u]
            worst = max(worst, directional_error(f, params, gs, u, h))
        out.append(GroupResult(loss_name, name, worst, worst <= tolerance))
    return out


def model_gradcheck(tolerance: float = 1e-4, tasks: Optional[Sequence[str]] = None,
                    seed: int = 0, corrupt=None, extra_groups=None,
                    directions: int = 2) -> GradcheckReport:
    """FD check of every task loss on a micro model (d_model 16, 1+1 layers)."""
    from .model import HulkModel, ModelConfig
    from .tasks import TASK_NAMES, SyntheticDatasetConfig, encode_targets, get_task, synth_generate

    tasks = list(tasks or TASK_NAMES)
    torch.manual_seed(seed)
    cfg = ModelConfig(d_model=16, enc_layers=1, dec_layers=1, heads=2, d_sem=16, patch_size=16,
                      caption_len=16)
    model = HulkModel(cfg, tasks).double()
    groups = parameter_groups(model)
    if extra_groups:
        groups.update(extra_groups)
    report = GradcheckReport(tolerance)
    for t in tasks:
        spec = get_task(t)
        sizes = {"frames": 4} if t == "skeleton" else {"image_hw": (32, 32)}
        data = synth_generate(SyntheticDatasetConfig(t, n=2, seed=seed, **sizes))
        hw = None if data[0][0].image is None else data[0][0].image.shape[-2:]
        targets = [encode_targets(spec, g, hw) for _, g in data]
        samples = [s for s, _ in data]
        report.results += check_groups(t, lambda: model.loss(t, samples, targets).total, groups,
                                       tolerance, directions, seed=seed, corrupt=corrupt)
    return report
