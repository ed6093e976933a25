import numpy as np
import pytest
import torch

from hulk.codecs import Modality
from hulk.embeddings import Vocabulary
from hulk.model import HulkModel, ModelConfig
from hulk.tasks import (TASK_NAMES, SyntheticDatasetConfig, encode_targets, gaussian_heatmaps,
                        get_task, load_dataset, save_dataset, synth_generate, task_registry,
                        dumps_sample)


def test_registry():
    reg = task_registry()
    assert len(reg) == 8
    io = {s.name: (s.input_modality, s.output_modality, s.mask_regime.value) for s in reg}
    I, T, S, D = Modality.IMAGE, Modality.TEXT, Modality.SPARSE, Modality.DENSE
    assert io == {
        "parsing": (I, D, "diagonal"), "pose2d": (I, D, "full"),
        "attribute": (I, T, "diagonal"), "caption": (I, T, "causal_diagonal"),
        "detection": (I, S, "diagonal"), "pose3d": (I, S, "full"), "mesh": (I, S, "full"),
        "skeleton": (S, T, "diagonal")}
    assert get_task("caption").resolve_n_prime(12) == 40
    assert get_task("parsing").resolve_n_prime(12) == 12
    assert get_task("attribute").resolve_n_prime(12) == 12 == len(get_task("attribute").classes)
    assert get_task("detection").resolve_n_prime(12) == 289
    with pytest.raises(KeyError):
        get_task("segmentation")


@pytest.mark.parametrize("task", TASK_NAMES)
def test_generator_deterministic(task):
    cfg = SyntheticDatasetConfig(task, n=3, seed=1)
    a = [dumps_sample(task, s, g) for s, g in synth_generate(cfg)]
    b = [dumps_sample(task, s, g) for s, g in synth_generate(cfg)]
    assert a == b
    c = [dumps_sample(task, s, g) for s, g in synth_generate(SyntheticDatasetConfig(task, n=3, seed=2))]
    assert a != c


def test_generator_contracts():
    for s, g in synth_generate(SyntheticDatasetConfig("detection", n=20, seed=3)):
        assert 1 <= len(g["boxes"]) <= 5
        assert np.all((g["boxes"] >= 0) & (g["boxes"] <= 1))
    for s, g in synth_generate(SyntheticDatasetConfig("mesh", n=4)):
        v, f = np.asarray(g["vertices"]), np.asarray(g["faces"])
        assert np.all(np.isfinite(v)) and f.min() >= 0 and f.max() < len(v)
    s, g = synth_generate(SyntheticDatasetConfig("skeleton", n=1, frames=5))[0]
    assert s.coords.shape == (5, 17, 2)
    with pytest.raises(ValueError):
        SyntheticDatasetConfig("parsing", image_hw=(60, 64))
    with pytest.raises(ValueError):
        SyntheticDatasetConfig("nope")


def test_heatmap_peak():
    heat = gaussian_heatmaps([[5.0, 7.0]], 16, 12)
    assert np.unravel_index(heat[0].argmax(), heat[0].shape) == (7, 5)


def test_encode_targets():
    s, g = synth_generate(SyntheticDatasetConfig("parsing", n=1))[0]
    t = encode_targets(get_task("parsing"), g)
    assert np.all(t["onehot"].sum(0) == 1)
    v = Vocabulary.from_words(["a", "red", "box", "<end>"])
    t = encode_targets(get_task("caption"), {"caption": ["a", "red", "box"]}, vocab=v)
    assert len(t["ids"]) == 4 and t["words"][-1] == "<end>"
    with pytest.raises(ValueError):
        encode_targets(get_task("detection"), {"boxes": [[0.1, 0.1, 1.2, 0.5]]})
    with pytest.raises(ValueError):
        encode_targets(get_task("pose2d"), {"joints": [[100.0, 0.0]] * 17}, (64, 48))
    with pytest.raises(ValueError):
        encode_targets(get_task("pose3d"), {"joints3d": [[2.0, 0, 0]] * 17})


@pytest.mark.parametrize("task", TASK_NAMES)
def test_serialization_round_trip(task, tmp_path):
    data = synth_generate(SyntheticDatasetConfig(task, n=2))
    p = tmp_path / "d.jsonl"
    save_dataset(p, task, data)
    back = load_dataset(p, task)
    assert [dumps_sample(task, s, g) for s, g in back] == [dumps_sample(task, s, g) for s, g in data]
    with pytest.raises(ValueError):
        load_dataset(p, "caption" if task != "caption" else "parsing")


def test_pipeline_smoke_all_tasks():
    torch.manual_seed(0)
    cfg = ModelConfig(d_model=16, enc_layers=1, dec_layers=1, heads=2, d_sem=16, patch_size=16)
    model = HulkModel(cfg, list(TASK_NAMES)).double()
    for task in TASK_NAMES:
        spec = get_task(task)
        sizes = {"frames": 4} if task == "skeleton" else {}
        data = synth_generate(SyntheticDatasetConfig(task, n=2, **sizes))
        hw = None if data[0][0].image is None else data[0][0].image.shape[-2:]
        targets = [encode_targets(spec, g, hw) for _, g in data]
        rep = model.loss(task, [s for s, _ in data], targets)
        assert torch.isfinite(rep.total)
        rep.total.backward()
        preds = model.predict(task, [s for s, _ in data])
        assert len(preds) == 2
