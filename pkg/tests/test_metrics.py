import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from hulk.metrics import (MetricReport, action_accuracy, attribute_mA, bleu4, detection_metrics,
                          miou, mpvpe, pck, pose3d_metrics)


def test_miou():
    gt = np.array([[0, 0], [1, 1]])
    assert miou(gt, gt) == 1.0
    assert abs(miou(np.array([[0, 1], [1, 1]]), gt) - 7 / 12) < 1e-12
    assert miou(np.zeros((2, 2), int), np.ones((2, 2), int)) == 0.0
    with pytest.raises(ValueError):
        miou(np.zeros((2, 3), int), gt)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_miou_relabel_symmetry(seed):
    r = np.random.default_rng(seed)
    gt, pred = r.integers(0, 5, size=(2, 6, 6))
    perm = r.permutation(5)
    assert abs(miou(pred, gt) - miou(perm[pred], perm[gt])) < 1e-12


def test_pck():
    gt = np.zeros((4, 2))
    assert pck(gt, gt, 10) == 1
    pred = gt.copy()
    pred[2] = [5, 0]
    assert pck(pred, gt, 10, 0.1) == 0.75
    assert pck(gt + 5, gt, 10) == 0
    with pytest.raises(ValueError):
        pck(gt, gt, 10, 0)


def test_detection_trivial():
    gt = [np.array([[0, 0, 1, 1], [2, 2, 3, 3.0]])]
    m = detection_metrics([(gt[0], np.ones(2))], gt)
    assert m["ap50"] == 1.0 and m["lamr"] < 1e-9
    m = detection_metrics([(np.zeros((0, 4)), np.zeros(0))], gt)
    assert m == {"ap50": 0.0, "lamr": 1.0}


def test_detection_hand_traced():
    # three images, four gt boxes; scores sorted: 0.9 TP, 0.8 FP, 0.7 TP, 0.6 FP, 0.5 TP
    box = np.array([[0, 0, 1, 1.0]])
    far = np.array([[5, 5, 6, 6.0]])
    gt = [np.vstack([box, box + 2]), box, box]
    pred = [(np.vstack([box, far]), np.array([0.9, 0.8])),
            (np.vstack([box, far]), np.array([0.7, 0.6])),
            (box, np.array([0.5]))]
    # precision after each: 1, 1/2, 2/3, 2/4, 3/5; recall 1/4, 1/4, 2/4, 2/4, 3/4
    # interpolated precision: recall .25 -> 1, .5 -> 2/3, .75 -> 3/5
    ap = 0.25 * 1 + 0.25 * (2 / 3) + 0.25 * (3 / 5)
    m = detection_metrics(pred, gt)
    assert abs(m["ap50"] - ap) < 1e-12
    # fppi after each detection: 0, 1/3, 1/3, 2/3, 2/3; miss: .75, .75, .5, .5, .25
    refs = np.logspace(-2, 0, 9)
    fppi = [0, 0, 1 / 3, 1 / 3, 2 / 3, 2 / 3]
    miss = [1, 0.75, 0.75, 0.5, 0.5, 0.25]
    mr = [miss[max(i for i, f in enumerate(fppi) if f <= r)] for r in refs]
    assert abs(m["lamr"] - math.exp(sum(math.log(x) for x in mr) / 9)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_detection_order_invariance(seed):
    r = np.random.default_rng(seed)
    lo = r.uniform(0, 1, size=(6, 2))
    gt = [np.hstack([lo, lo + 0.3])]
    lo = lo + r.normal(scale=0.1, size=lo.shape)
    boxes = np.hstack([lo, lo + 0.3])
    scores = r.permutation(6) / 6 + 0.05
    perm = r.permutation(6)
    a = detection_metrics([(boxes, scores)], gt)
    b = detection_metrics([(boxes[perm], scores[perm])], gt)
    assert a == b


def test_attribute_mA():
    g = np.array([[1, 0], [0, 1], [1, 1]])
    assert attribute_mA(g, g) == 1.0
    assert abs(attribute_mA([1, 0, 0, 0], [1, 1, 0, 0]) - 0.75) < 1e-12
    assert attribute_mA(1 - g, g) == 0.0


def test_bleu4():
    ref = "a person in a red top and blue trousers".split()
    assert bleu4(ref, [ref]) == 1.0
    cand = ref[:4]
    # every n-gram of the prefix matches: precisions 1, BP = exp(1 - 9/4)
    assert abs(bleu4(cand, [ref]) - math.exp(1 - 9 / 4)) < 1e-12
    cand = ["a", "b", "a", "c", "a"]
    # 1-gram 3/5 ("a" clipped to 3 of 3 in the reference), higher orders zero -> add-one
    r2 = ["a", "x", "a", "y", "a"]
    p = [3 / 5, 1 / 5, 1 / 4, 1 / 3]
    assert abs(bleu4(cand, [r2]) - math.exp(sum(math.log(x) for x in p) / 4)) < 1e-12
    assert 0 < bleu4(cand, [r2]) < 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.sampled_from(["a", "red", "box", "person", "<end>"]), min_size=1, max_size=12))
def test_bleu_self(x):
    assert bleu4(x, [x]) == 1.0


def test_pose3d_examples():
    r = np.random.default_rng(0)
    gt = r.normal(size=(17, 3)) * 100
    m = pose3d_metrics(gt, gt)
    assert m["mpjpe"] == 0 and m["pa_mpjpe"] < 1e-9
    assert pose3d_metrics(gt + [3, 0, 4], gt)["mpjpe"] < 1e-12
    pred = gt.copy()
    pred[1:, 0] += 5
    assert abs(pose3d_metrics(pred, gt)["mpjpe"] - 5 * 16 / 17) < 1e-12
    rot = Rotation.random(random_state=1).as_matrix()
    m = pose3d_metrics(gt @ rot.T, gt)
    assert m["pa_mpjpe"] < 1e-9 and m["mpjpe"] > 1
    with pytest.raises(ValueError, match="degenerate"):
        pose3d_metrics(gt, np.ones((17, 3)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_procrustes_similarity_invariance(seed):
    r = np.random.default_rng(seed)
    gt, pred = r.normal(size=(2, 17, 3))
    rot = Rotation.random(random_state=seed).as_matrix()
    s, t = r.uniform(0.1, 10), r.normal(size=3) * 5
    a = pose3d_metrics(pred, gt)["pa_mpjpe"]
    b = pose3d_metrics(s * pred @ rot.T + t, gt)["pa_mpjpe"]
    assert abs(a - b) <= 1e-8


def test_pa_can_exceed_mpjpe_with_one_outlier():
    # least-squares alignment spreads a single outlier over every joint
    gt = np.random.default_rng(0).normal(size=(17, 3))
    pred = gt.copy()
    pred[5] += [10, 0, 0]
    m = pose3d_metrics(pred, gt)
    assert m["pa_mpjpe"] > m["mpjpe"]


def test_mpvpe():
    r = np.random.default_rng(0)
    v = r.normal(size=(42, 3))
    assert mpvpe(v, v) == 0
    assert mpvpe(v + 2.0, v) < 1e-12
    p = r.normal(size=(42, 3))
    pc, vc = p - p[0], v - v[0]
    oracle = sum(math.sqrt(sum((pc[i, k] - vc[i, k]) ** 2 for k in range(3))) for i in range(42)) / 42
    assert abs(mpvpe(p, v) - oracle) < 1e-12
    with pytest.raises(ValueError):
        mpvpe(p[:4], v)


def test_action_accuracy_and_report():
    assert action_accuracy([1, 2], [1, 2]) == 1
    assert action_accuracy([0, 0], [1, 1]) == 0
    assert action_accuracy([1, 2, 3, 0], [1, 2, 3, 4]) == 0.75
    rec = json.loads(MetricReport({"mA": 0.5}, 3, "attribute").to_json())
    assert rec == {"task": "attribute", "metrics": {"mA": 0.5}, "n": 3}
