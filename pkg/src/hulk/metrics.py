"""Evaluation metrics.

PCK stands in for OKS-based AP, AP@0.5 plus a simplified log-average miss
rate for the crowd-detection protocol, BLEU-4 for CIDEr-style caption scores.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np


@dataclass
class MetricReport:
    metrics: Dict[str, float] = field(default_factory=dict)
    n: int = 0
    task: str = ""

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "metrics": self.metrics, "n": self.n},
                          sort_keys=True)


def miou(pred_maps, gt_maps, num_classes: int | None = None) -> float:
    """Dataset-level mean IoU over classes present in prediction or ground truth."""
    pred = np.concatenate([np.asarray(p).reshape(-1) for p in _listify(pred_maps)])
    gt = np.concatenate([np.asarray(g).reshape(-1) for g in _listify(gt_maps)])
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground-truth maps differ in shape")
    if num_classes is None:
        num_classes = int(max(pred.max(), gt.max())) + 1
    conf = np.bincount(gt * num_classes + pred, minlength=num_classes ** 2)
    conf = conf.reshape(num_classes, num_classes)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(0) + conf.sum(1) - np.diag(conf)
    valid = union > 0
    return float(np.mean(inter[valid] / union[valid]))


def _listify(maps):
    if isinstance(maps, np.ndarray) and maps.ndim == 2:
        return [maps]
    return list(maps)


def pck(pred_joints, gt_joints, norm_size: float, alpha: float = 0.1, visible=None) -> float:
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    d = np.linalg.norm(pred - gt, axis=-1)
    hit = d <= alpha * norm_size
    if visible is not None:
        hit = hit[np.asarray(visible, dtype=bool)]
    return float(hit.mean())


def box_iou_np(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _score_matches(pred, gt, iou_thr):
    """Greedy score-ordered matching; returns (scores, is_tp) and #gt."""
    scores, tps = [], []
    n_gt = 0
    for (boxes, sc), g in zip(pred, gt):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        sc = np.asarray(sc, dtype=np.float64).reshape(-1)
        g = np.asarray(g, dtype=np.float64).reshape(-1, 4)
        n_gt += len(g)
        order = np.argsort(-sc, kind="stable")
        taken = np.zeros(len(g), dtype=bool)
        ious = box_iou_np(boxes, g) if len(boxes) and len(g) else np.zeros((len(boxes), len(g)))
        for i in order:
            tp = False
            if len(g):
                cand = np.where(~taken, ious[i], -1.0)
                j = int(np.argmax(cand))
                if cand[j] >= iou_thr:
                    taken[j] = True
                    tp = True
            scores.append(sc[i])
            tps.append(tp)
    return np.asarray(scores), np.asarray(tps, dtype=bool), n_gt


def detection_metrics(pred, gt, iou_thr: float = 0.5) -> Dict[str, float]:
    """AP at IoU 0.5 and log-average miss rate over FPPI in [1e-2, 1].

    ``pred`` is a list (per image) of ``(boxes (n,4), scores (n,))``; ``gt`` a
    list of ``(m, 4)`` box arrays.
    """
    scores, tps, n_gt = _score_matches(pred, gt, iou_thr)
    n_img = len(gt)
    if n_gt == 0:
        raise ValueError("no ground-truth boxes")
    if len(scores) == 0:
        return {"ap50": 0.0, "lamr": 1.0}
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tps[order])
    fp = np.cumsum(~tps[order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)

    # all-point interpolated AP
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.where(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))

    fppi = np.concatenate([[0.0], fp / n_img])
    miss = np.concatenate([[1.0], 1.0 - recall])
    refs = np.logspace(-2.0, 0.0, 9)
    mr = np.empty_like(refs)
    for k, r in enumerate(refs):
        j = np.where(fppi <= r)[0]
        mr[k] = miss[j[-1]] if j.size else 1.0
    lamr = float(np.exp(np.mean(np.log(np.maximum(mr, 1e-10)))))
    return {"ap50": ap, "lamr": lamr}


def attribute_mA(pred_bits, gt_bits) -> float:
    """Mean over attributes of (TPR + TNR) / 2.

    An attribute with no positives (or no negatives) contributes its TNR (or
    TPR) alone.
    """
    pred = np.asarray(pred_bits, dtype=bool)
    gt = np.asarray(gt_bits, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    if gt.ndim == 1:
        pred, gt = pred[:, None], gt[:, None]
    out = []
    for a in range(gt.shape[1]):
        g, p = gt[:, a], pred[:, a]
        pos, neg = g.sum(), (~g).sum()
        rates = []
        if pos:
            rates.append((p & g).sum() / pos)
        if neg:
            rates.append((~p & ~g).sum() / neg)
        out.append(np.mean(rates))
    return float(np.mean(out))


def _ngrams(words, n):
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    """Sentence BLEU-4 with add-one smoothing of zero-match orders n >= 2."""
    cand = list(candidate)
    if not cand:
        raise ValueError("candidate must be non-empty")
    refs = [list(r) for r in references]
    log_p = 0.0
    for n in range(1, 5):
        counts = _ngrams(cand, n)
        total = sum(counts.values())
        max_ref = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        match = sum(min(c, max_ref[g]) for g, c in counts.items())
        if match == 0:
            if n == 1:
                return 0.0
            p = 1.0 / (total + 1)
        else:
            p = match / total
        log_p += math.log(p) / 4
    c = len(cand)
    r = min((abs(len(x) - c), len(x)) for x in refs)[1]
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * math.exp(log_p)


def procrustes_align(pred, gt):
    """Similarity transform (scale, rotation, translation) of ``pred`` onto ``gt``."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    x, y = pred - mu_p, gt - mu_g
    var = (x ** 2).sum()
    u, s, vt = np.linalg.svd(x.T @ y)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.ones(len(s))
    fix[-1] = d if d != 0 else 1.0
    r = (u * fix) @ vt
    scale = (s * fix).sum() / var
    return scale * x @ r + mu_g


def pose3d_metrics(pred, gt, root: int = 0) -> Dict[str, float]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] < 3:
        raise ValueError("need matching (K, 3) joint sets with K >= 3")
    if np.allclose(gt, gt[0]):
        raise ValueError("degenerate ground truth: all joints coincide")
    mpjpe = np.linalg.norm((pred - pred[root]) - (gt - gt[root]), axis=-1).mean()
    pa = np.linalg.norm(procrustes_align(pred, gt) - gt, axis=-1).mean()
    return {"mpjpe": float(mpjpe), "pa_mpjpe": float(pa)}


def mpvpe(pred_vertices, gt_vertices, root: int = 0) -> float:
    """Mean per-vertex error after centring both meshes on the root vertex."""
    pred = np.asarray(pred_vertices, dtype=np.float64)
    gt = np.asarray(gt_vertices, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("shape mismatch")
    return float(np.linalg.norm((pred - pred[..., root:root + 1, :])
                                - (gt - gt[..., root:root + 1, :]), axis=-1).mean())


def action_accuracy(pred_ids, gt_ids) -> float:
    pred = np.asarray(pred_ids)
    gt = np.asarray(gt_ids)
    if pred.shape != gt.shape:
        raise ValueError("length mismatch")
    return float((pred == gt).mean())
