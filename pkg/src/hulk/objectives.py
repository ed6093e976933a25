"""Semantic contrastive loss, digit regression losses and per-task compositions."""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .blocks import similarity
from .embeddings import SemanticEmbeddingTable


@dataclass
class LossReport:
    total: torch.Tensor
    components: Dict[str, torch.Tensor] = field(default_factory=dict)
    weights: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def compose(cls, components: Mapping[str, torch.Tensor],
                weights: Optional[Mapping[str, float]] = None) -> "LossReport":
        weights = {k: float((weights or {}).get(k, 1.0)) for k in components}
        total = sum(weights[k] * v for k, v in components.items())
        return cls(total, dict(components), weights)

    def scalars(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


# -- semantic ------------------------------------------------------------------

def semantic_contrastive_loss(f_hat: torch.Tensor, targets, table: SemanticEmbeddingTable,
                              temperature: float = 1.0, weight=None, mask=None,
                              form: str = "softmax") -> torch.Tensor:
    """Mean cross-entropy of ``softmax(v . f / tau)`` against the target rows.

    ``form="ratio"`` evaluates the bare similarity ratio
    ``v_k.f / sum_j v_j.f`` instead (not a usable training loss; kept for
    study). ``weight`` is per-class, ``mask`` selects supervised positions.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    targets = torch.as_tensor(targets, dtype=torch.long, device=f_hat.device)
    c = len(table)
    if targets.numel() and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"target index out of range [0, {c})")
    sims = similarity(f_hat, table)
    if form == "ratio":
        ratio = sims.gather(-1, targets[..., None])[..., 0] / sims.sum(-1)
        per = ratio
    elif form == "softmax":
        logp = torch.log_softmax(sims / temperature, dim=-1)
        per = -logp.gather(-1, targets[..., None])[..., 0]
    else:
        raise ValueError(f"unknown form {form!r}")
    w = torch.ones_like(per)
    if weight is not None:
        w = torch.as_tensor(weight, dtype=per.dtype, device=per.device)[targets]
    if mask is not None:
        w = w * torch.as_tensor(mask, dtype=per.dtype, device=per.device)
    denom = w.sum()
    if denom <= 0:
        raise ValueError("no supervised positions")
    return (per * w).sum() / denom


def diagonal_presence_loss(f_hat: torch.Tensor, present, table: SemanticEmbeddingTable,
                           temperature: float = 1.0) -> torch.Tensor:
    """Binary cross-entropy on the diagonal class score.

    Position ``j`` scores ``p_j = softmax_k(v_k . f_j / tau)[j]``; present
    classes are pulled toward their own row (the contrastive term with target
    ``j``), absent ones pushed away with ``-log(1 - p_j)``.
    """
    sims = similarity(f_hat, table) / temperature
    logp = torch.log_softmax(sims, dim=-1)
    log_pj = torch.diagonal(logp, dim1=-2, dim2=-1)
    y = torch.as_tensor(present, dtype=sims.dtype, device=sims.device)
    # log(1 - p) computed stably from log p
    log_1m = torch.log(-torch.expm1(log_pj.clamp(max=-1e-12)))
    return -(y * log_pj + (1 - y) * log_1m).mean()


# -- digit ---------------------------------------------------------------------

def l1_regression_loss(pred: torch.Tensor, gt, mask=None) -> torch.Tensor:
    gt = torch.as_tensor(gt, dtype=pred.dtype, device=pred.device)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    err = (pred - gt).abs()
    if mask is None:
        return err.mean()
    m = torch.as_tensor(mask, dtype=torch.bool, device=pred.device).expand_as(err)
    if not m.any():
        raise ValueError("no supervised entries")
    return err[m].mean()


def _check_boxes(b, name):
    if b.shape[-1] != 4:
        raise ValueError(f"{name} must be (..., 4) x1y1x2y2 boxes")
    if not bool(((b[..., 2] > b[..., 0]) & (b[..., 3] > b[..., 1])).all()):
        raise ValueError(f"degenerate box in {name}: need x2 > x1 and y2 > y1")


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def pairwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """GIoU between every box of ``a (P,4)`` and ``b (G,4)`` -> ``(P, G)``."""
    a, b = a[:, None, :], b[None, :, :]
    return _giou(a, b)


def _giou(a, b):
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = _area(a) + _area(b) - inter
    elt = torch.minimum(a[..., :2], b[..., :2])
    erb = torch.maximum(a[..., 2:], b[..., 2:])
    enclose = (erb - elt).prod(-1)
    return inter / union - (enclose - union) / enclose


def giou_loss(pred_boxes: torch.Tensor, gt_boxes) -> torch.Tensor:
    gt_boxes = torch.as_tensor(gt_boxes, dtype=pred_boxes.dtype, device=pred_boxes.device)
    _check_boxes(pred_boxes, "pred_boxes")
    _check_boxes(gt_boxes, "gt_boxes")
    return (1.0 - _giou(pred_boxes, gt_boxes)).mean()


def dice_loss(pred_probs: torch.Tensor, gt_onehot, eps: float = 1.0) -> torch.Tensor:
    """``1 - mean_c (2 sum(p g) + eps) / (sum p + sum g + eps)`` over ``(..., C, H, W)``.

    Leading batch dimensions are averaged together with the classes.
    """
    gt = torch.as_tensor(gt_onehot, dtype=pred_probs.dtype, device=pred_probs.device)
    if pred_probs.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred_probs.shape)} vs {tuple(gt.shape)}")
    inter = (pred_probs * gt).sum((-1, -2))
    denom = pred_probs.sum((-1, -2)) + gt.sum((-1, -2))
    return 1.0 - ((2 * inter + eps) / (denom + eps)).mean()


# -- matching ------------------------------------------------------------------

@dataclass
class MatchAssignment:
    pairs: List[Tuple[int, int]]
    unmatched: List[int]
    cost: float

    @property
    def pred_indices(self):
        return [p for p, _ in self.pairs]

    @property
    def gt_indices(self):
        return [g for _, g in self.pairs]


def _assign(cost):
    r, c = linear_sum_assignment(cost)
    return list(zip(r.tolist(), c.tolist())), float(cost[r, c].sum())


def _forced_optimum(cost, fixed_rows, fixed_cols, skip_rows):
    """Optimal cost of the remaining problem once some rows/cols are decided."""
    rows = [i for i in range(cost.shape[0]) if i not in fixed_rows and i not in skip_rows]
    cols = [j for j in range(cost.shape[1]) if j not in fixed_cols]
    need = min(cost.shape) - len(fixed_rows)
    if need == 0:
        return 0.0
    if len(rows) < need or len(cols) < need:
        return np.inf
    sub = cost[np.ix_(rows, cols)]
    _, val = _assign(sub)
    return val


def hungarian_match(cost) -> MatchAssignment:
    """Minimum-cost bipartite assignment of predictions (rows) to ground truth.

    Among equal-cost optima the lexicographically smallest pair list (sorted by
    prediction index) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a P x G matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    P, G = cost.shape
    if P == 0 or G == 0:
        return MatchAssignment([], list(range(P)), 0.0)
    pairs, best = _assign(cost)
    tol = 1e-12 * (abs(best) + 1.0) + 1e-12 * np.abs(cost).max()

    # unique optimum <=> forbidding any chosen pair makes things strictly worse
    big = 2.0 * min(P, G) * np.abs(cost).max() + 1.0
    unique = True
    for i, j in pairs:
        forb = cost.copy()
        forb[i, j] = big
        _, alt = _assign(forb)
        if alt <= best + tol:
            unique = False
            break
    if not unique:
        pairs = _lexicographic_refine(cost, best, tol)
    pairs.sort()
    matched = {p for p, _ in pairs}
    return MatchAssignment(pairs, [i for i in range(P) if i not in matched],
                           float(sum(cost[i, j] for i, j in pairs)))


def _lexicographic_refine(cost, best, tol):
    P, G = cost.shape
    k = min(P, G)
    fixed: List[Tuple[int, int]] = []
    fixed_cost = 0.0
    skip = set()
    for i in range(P):
        if len(fixed) == k:
            break
        rows = {r for r, _ in fixed}
        cols = {c for _, c in fixed}
        placed = False
        for j in range(G):
            if j in cols:
                continue
            rest = _forced_optimum(cost, rows | {i}, cols | {j}, skip)
            if fixed_cost + cost[i, j] + rest <= best + tol:
                fixed.append((i, j))
                fixed_cost += cost[i, j]
                placed = True
                break
        if not placed:
            skip.add(i)
    return fixed


def brute_force_match_cost(cost) -> float:
    """Exhaustive minimum over all injective assignments (small matrices only)."""
    cost = np.asarray(cost, dtype=np.float64)
    P, G = cost.shape
    if P >= G:
        return min(sum(cost[p, g] for g, p in enumerate(perm))
                   for perm in itertools.permutations(range(P), G))
    return min(sum(cost[p, g] for p, g in enumerate(perm))
               for perm in itertools.permutations(range(G), P))


# -- mesh ----------------------------------------------------------------------

def _face_edges(faces):
    faces = torch.as_tensor(faces, dtype=torch.long)
    return faces, torch.stack([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=1)


def mesh_edge_normal_loss(pred_vertices: torch.Tensor, gt_vertices, faces):
    """Edge-length and edge-vs-normal L1 terms over all face edges.

    ``edge`` compares predicted and ground-truth edge lengths; ``normal``
    penalises ``|<unit predicted edge, gt face normal>|``. Zero-area ground
    truth faces are skipped (with a warning).
    """
    gt = torch.as_tensor(gt_vertices, dtype=pred_vertices.dtype, device=pred_vertices.device)
    faces, edges = _face_edges(faces)
    V = pred_vertices.shape[-2]
    if faces.numel() and (faces.min() < 0 or faces.max() >= V):
        raise ValueError("faces reference vertices out of range")

    def edge_vecs(v):
        return v[..., edges[..., 1], :] - v[..., edges[..., 0], :]   # (..., F, 3, 3)

    pe, ge = edge_vecs(pred_vertices), edge_vecs(gt)
    lp = pe.norm(dim=-1)
    lg = ge.norm(dim=-1)
    edge = (lp - lg).abs().mean()

    n = torch.cross(ge[..., 0, :], -ge[..., 2, :], dim=-1)   # (b - a) x (c - a)
    nn_ = n.norm(dim=-1, keepdim=True)
    ok = nn_[..., 0] > 1e-12
    skipped = int((~ok).sum())
    if skipped:
        warnings.warn(f"skipped {skipped} degenerate ground-truth faces")
    unit_n = n / nn_.clamp(min=1e-12)
    unit_e = pe / lp[..., None].clamp(min=1e-12)
    cos = (unit_e * unit_n[..., None, :]).sum(-1).abs()       # (..., F, 3)
    w = ok[..., None].to(cos.dtype).expand_as(cos)
    normal = (cos * w).sum() / w.sum().clamp(min=1)
    return edge, normal


def total_loss(reports: Sequence, weights: Sequence[float]) -> torch.Tensor:
    if len(reports) != len(weights):
        raise ValueError(f"{len(reports)} losses but {len(weights)} weights")
    if any(w < 0 for w in weights):
        raise ValueError("task weights must be >= 0")
    terms = [(r.total if isinstance(r, LossReport) else r) for r in reports]
    out = terms[0] * 0.0 if terms else torch.tensor(0.0)
    for w, t in zip(weights, terms):
        out = out + w * t
    return out


def gradient_norm_probe(probe: torch.nn.Parameter, task_losses: Mapping[str, torch.Tensor]):
    """L2 norm of each task loss's gradient at the probe parameter.

    Each task gets its own backward pass; the graphs are retained so the
    caller may still use them.
    """
    norms = {}
    for name, loss in task_losses.items():
        (g,) = torch.autograd.grad(loss, probe, retain_graph=True, allow_unused=True)
        if g is None:
            raise ValueError(f"task {name!r} does not reach the probe parameter")
        norms[name] = float(g.norm())
    return norms


# -- per-task compositions -------------------------------------------------------

@dataclass
class LossOptions:
    temperature: float = 1.0
    det_cost_cls: float = 1.0
    det_cost_l1: float = 5.0
    det_cost_giou: float = 2.0
    det_bg_weight: float = 0.1
    det_loss_l1: float = 5.0
    det_loss_giou: float = 2.0
    component_weights: Dict[str, float] = field(default_factory=dict)


def presence_contrastive_loss(f_avg: torch.Tensor, presence, table: SemanticEmbeddingTable,
                              temperature: float = 1.0) -> torch.Tensor:
    """Contrastive term on a pooled feature whose targets are all present classes.

    ``presence`` is ``(..., C)`` boolean; the target distribution is uniform
    over the present rows.
    """
    y = torch.as_tensor(np.asarray(presence, dtype=np.float64), dtype=f_avg.dtype,
                        device=f_avg.device)
    if bool((y.sum(-1) == 0).any()):
        raise ValueError("presence target with no present class")
    y = y / y.sum(-1, keepdim=True)
    logp = torch.log_softmax(similarity(f_avg, table) / temperature, dim=-1)
    return -(y * logp).sum(-1).mean()


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def detection_match(scores_fg: torch.Tensor, boxes: torch.Tensor, gt_boxes: torch.Tensor,
                    opts: LossOptions) -> MatchAssignment:
    """Match ``P`` predictions to ``G`` ground-truth boxes on the combined cost."""
    with torch.no_grad():
        l1 = torch.cdist(boxes, gt_boxes, p=1)
        giou = pairwise_giou(boxes, gt_boxes)
        cost = (-opts.det_cost_cls * scores_fg[:, None] + opts.det_cost_l1 * l1
                - opts.det_cost_giou * giou)
    return hungarian_match(cost.cpu().numpy())


def _stack(targets, key, dtype, device):
    return torch.as_tensor(np.stack([np.asarray(t[key]) for t in targets]), dtype=dtype,
                           device=device)


def task_loss(spec, outputs: Mapping[str, torch.Tensor], targets: Sequence[dict],
              table: Optional[SemanticEmbeddingTable], opts: Optional[LossOptions] = None
              ) -> LossReport:
    """Compose the primitive losses for one task over a batch.

    ``outputs`` holds the batched de-tokenizer outputs (see ``HulkModel``);
    ``targets`` is the list of per-sample records from ``encode_targets``.
    """
    opts = opts or LossOptions()
    tau = opts.temperature
    name = spec.name
    comps: Dict[str, torch.Tensor] = {}
    ref = next(iter(outputs.values()))
    dt, dev = ref.dtype, ref.device

    if name in ("parsing", "pose2d"):
        f_pix, sims = outputs["pixel_features"], outputs["sims"]
        labels = _stack(targets, "labels", torch.long, dev)
        if labels.shape != f_pix.shape[:-1]:
            raise ValueError(f"label maps {tuple(labels.shape)} do not match prediction "
                             f"{tuple(f_pix.shape[:-1])}")
        comps["contrastive"] = semantic_contrastive_loss(f_pix, labels, table, tau)
        comps["presence"] = presence_contrastive_loss(
            outputs["avg_features"], np.stack([t["presence"] for t in targets]), table, tau)
        if name == "parsing":
            onehot = _stack(targets, "onehot", dt, dev)
            comps["dice"] = dice_loss(torch.softmax(sims / tau, dim=-3), onehot)
    elif name == "attribute":
        comps["contrastive"] = diagonal_presence_loss(
            outputs["features"], np.stack([t["bits"] for t in targets]), table, tau)
    elif name == "skeleton":
        onehot = np.eye(len(table))[[t["action"] for t in targets]]
        comps["contrastive"] = diagonal_presence_loss(outputs["features"], onehot, table, tau)
    elif name == "caption":
        f = outputs["features"]
        L = f.shape[-2]
        ids = np.zeros((len(targets), L), dtype=np.int64)
        mask = np.zeros((len(targets), L), dtype=bool)
        for b, t in enumerate(targets):
            seq = np.asarray(t["ids"])
            if len(seq) > L:
                raise ValueError(f"caption of {len(seq)} tokens exceeds N' = {L}")
            ids[b, :len(seq)] = seq
            ids[b, len(seq):] = seq[-1]
            mask[b, :len(seq)] = True
        comps["contrastive"] = semantic_contrastive_loss(f, ids, table, tau, mask=mask)
    elif name == "detection":
        f, boxes = outputs["features"], outputs["boxes"]
        fg = torch.softmax(similarity(f, table) / tau, dim=-1)[..., 0]
        cls_t = np.ones(f.shape[:-1], dtype=np.int64)
        l1s, gious = [], []
        for b, t in enumerate(targets):
            gt = torch.as_tensor(t["boxes"], dtype=dt, device=dev)
            m = detection_match(fg[b], boxes[b], gt, opts)
            pi, gi = m.pred_indices, m.gt_indices
            cls_t[b, pi] = 0
            l1s.append(l1_regression_loss(boxes[b, pi], gt[gi]))
            gious.append(giou_loss(boxes[b, pi], gt[gi]))
        comps["contrastive"] = semantic_contrastive_loss(
            f, cls_t, table, tau, weight=[1.0, opts.det_bg_weight])
        comps["l1"] = torch.stack(l1s).mean()
        comps["giou"] = torch.stack(gious).mean()
    elif name in ("pose3d", "mesh"):
        key = "joints3d" if name == "pose3d" else "vertices"
        coords = outputs["coords"]
        gt = _stack(targets, key, dt, dev)
        comps["l3d" if name == "pose3d" else "vertex"] = l1_regression_loss(coords, gt)
        # orthographic camera: the 2-D projection drops depth
        comps["l2d"] = l1_regression_loss(coords[..., :2], gt[..., :2])
        if name == "pose3d":
            k = coords.shape[-2]
            comps["contrastive"] = semantic_contrastive_loss(
                outputs["features"], np.broadcast_to(np.arange(k), coords.shape[:-1]).copy(),
                table, tau)
        else:
            edge, normal = mesh_edge_normal_loss(coords, gt, targets[0]["faces"])
            comps["edge"] = edge
            comps["normal"] = normal
    else:
        raise ValueError(f"no loss for task {name!r}")
    weights = dict(opts.component_weights)
    if name == "detection":
        weights.setdefault("l1", opts.det_loss_l1)
        weights.setdefault("giou", opts.det_loss_giou)
    return LossReport.compose(comps, weights)
