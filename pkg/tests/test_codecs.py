import numpy as np
import pytest
import torch
import torch.nn.functional as F

from hulk.blocks import ConvBlock, digit_detokenize, digit_tokenize, semantic_detokenize, semantic_tokenize
from hulk.codecs import (Modality, ModalitySample, dense_detokenize, dense_tokenize, image_tokenize,
                         sparse_detokenize, sparse_tokenize, text_caption_detokenize,
                         text_classify_detokenize, text_tokenize, word_features)
from hulk.embeddings import SemanticEmbeddingTable, Synthetic, Vocabulary, build_table
from hulk.gradcheck import check_elementwise


def zero_(block):
    with torch.no_grad():
        for p in block.parameters():
            p.zero_()
    return block


def identity_(block):
    with torch.no_grad():
        n = block.net[0].weight.shape[0]
        w = block.net[0].weight
        w.copy_(torch.eye(n).reshape(n, n, *[1] * (w.dim() - 2)))
        block.net[0].bias.zero_()
    return block


@pytest.fixture
def words():
    v = Vocabulary.from_words(["a", "person", "left", "knee", "nose", "pedestrian", "background", "<end>"])
    return v, build_table(v, Synthetic(0), 8)


def test_sample_validation():
    with pytest.raises(ValueError):
        ModalitySample(Modality.IMAGE, image=np.full((3, 4, 4), 2.0))
    with pytest.raises(ValueError):
        ModalitySample(Modality.TEXT, words=["a"], image=np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        ModalitySample(Modality.SPARSE, coords=np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        ModalitySample(Modality.SPARSE, names=["a", "b"], coords=np.zeros((3, 2)))
    s = ModalitySample(Modality.SPARSE, names=["nose"], coords=[[0.45, 0.26, -0.18]])
    assert ModalitySample.from_json(s.to_json()).coords.tolist() == [[0.45, 0.26, -0.18]]


def test_image_tokenize():
    b = ConvBlock(3, 8, 16, spatial_dims=2, bias=False)
    assert torch.all(image_tokenize(torch.zeros(3, 32, 32), b).data == 0)
    assert len(image_tokenize(torch.rand(3, 256, 192), b)) == 192
    x = torch.rand(3, 32, 32)
    assert torch.equal(image_tokenize(x, b).data, digit_tokenize(x, b).data)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        image_tokenize(torch.full((3, 32, 32), 1.5), b)


def test_text_tokenize(words):
    v, t = words
    b = ConvBlock(8, 6)
    assert len(text_tokenize(["person"], t, v, b)) == 1
    two = text_tokenize(["knee", "knee"], t, v, b).data
    assert torch.equal(two[0], two[1])
    ref = semantic_tokenize(word_features(["a", "person"], t, v), b).data
    assert torch.equal(text_tokenize(["a", "person"], t, v, b).data, ref)
    with pytest.raises(KeyError):
        text_tokenize(["zebra"], t, v, b)


def test_text_classify_detokenize(rng):
    c = 4
    table = SemanticEmbeddingTable(np.eye(c) * 5)
    b = identity_(ConvBlock(c, c))
    q = torch.tensor(np.eye(c) * 5)
    r = text_classify_detokenize(q, table, b)
    assert r.predicted.all()
    r = text_classify_detokenize(q, table, b, mode="action")
    assert int(r.predicted) in range(c)
    r = text_classify_detokenize(torch.zeros(c, c), table, zero_(ConvBlock(c, c)))
    assert torch.allclose(r.scores, torch.full((c,), 1 / c))
    assert not r.predicted.any()
    with pytest.raises(ValueError):
        text_classify_detokenize(torch.zeros(c + 1, c), table, b)

    table = SemanticEmbeddingTable(rng.normal(size=(5, 3)))
    b = ConvBlock(6, 3)
    q = torch.randn(5, 6)
    r = text_classify_detokenize(q, table, b)
    f = r.features.detach().numpy()
    for j in range(5):
        assert np.isclose(float(r.raw[j].detach()), sum(table.matrix[j, i] * f[j, i] for i in range(3)))


def test_caption_early_stop(words):
    v, t = words
    b = identity_(ConvBlock(8, 8))
    end = torch.tensor(t.row(v.lookup("<end>")))
    calls = []

    def step(prefix):
        calls.append(prefix)
        return end.expand(40, 8)

    assert text_caption_detokenize(step, t, v, b, max_len=40) == ["<end>"]
    assert len(calls) == 1
    person = torch.tensor(t.row(v.lookup("person")))
    out = text_caption_detokenize(lambda p: person.expand(40, 8), t, v, b, max_len=40)
    assert len(out) == 40
    with pytest.raises(ValueError):
        text_caption_detokenize(lambda p: person.expand(39, 8), t, v, b, max_len=40)
    with pytest.raises(ValueError):
        text_caption_detokenize(lambda p: person.expand(1, 8), t, v, b, max_len=0)


def test_sparse_tokenize(words):
    v, t = words
    bs, bd = ConvBlock(8, 6), ConvBlock(2, 6, bias=False)
    skel = torch.rand(175, 17, 2)
    names = ["nose"] * 17
    assert len(sparse_tokenize(names, skel, t, v, bs, bd, skeleton=True)) == 2975
    table_ii = [[0.47, -0.21], [0.48, -0.20]]
    assert len(sparse_tokenize(["left knee", "left knee"], table_ii, t, v, bs, bd)) == 2
    sem = semantic_tokenize(word_features(["nose", "knee"], t, v), bs).data
    zero = sparse_tokenize(["nose", "knee"], torch.zeros(2, 2), t, v, bs, bd).data
    assert torch.allclose(zero, sem)
    x = torch.randn(2, 2)
    full = sparse_tokenize(["nose", "knee"], x, t, v, bs, bd).data
    assert torch.allclose(full, sem + digit_tokenize(x, bd).data)
    assert torch.allclose(sparse_tokenize([], x, t, v, None, bd).data, digit_tokenize(x, bd).data)
    with pytest.raises(ValueError):
        sparse_tokenize(["nose"], x, t, v, bs, bd)


def test_sparse_detokenize(rng):
    table = SemanticEmbeddingTable(rng.normal(size=(2, 5)))
    bs, bd = ConvBlock(6, 5), ConvBlock(6, 4)
    q = torch.randn(7, 6)
    idx, coords, _ = sparse_detokenize(q, table, bs, bd, coord_dim=4)
    assert coords.shape == (7, 4) and idx.shape == (7,)
    _, ref_idx = semantic_detokenize(q, table, bs)
    assert torch.equal(idx, ref_idx)
    assert torch.allclose(coords, digit_detokenize(q, bd, (7, 4)))
    idx, coords, _ = sparse_detokenize(torch.zeros(3, 6), table, zero_(bs), zero_(bd), 4)
    assert torch.all(coords == 0) and idx.tolist() == [0, 0, 0]
    none, coords, _ = sparse_detokenize(q, None, None, bd, 3, with_semantics=False)
    assert none is None and coords.shape == (7, 3)
    with pytest.raises(ValueError):
        sparse_detokenize(q, table, bs, bd, 5)


def test_dense_tokenize(rng):
    table = SemanticEmbeddingTable(rng.normal(size=(2, 4)))
    b = ConvBlock(4, 6, 8, spatial_dims=2)
    uniform = torch.zeros(2, 32, 32)
    uniform[1] = 1
    tok = dense_tokenize(uniform, table, b).data
    assert torch.allclose(tok, tok[:1].expand_as(tok))
    assert torch.all(dense_tokenize(uniform, table, zero_(ConvBlock(4, 6, 8, spatial_dims=2))).data == 0)
    labels = rng.integers(0, 2, size=(32, 32))
    onehot = torch.tensor(np.eye(2)[labels].transpose(2, 0, 1))
    emb = torch.tensor(table.matrix[labels].transpose(2, 0, 1))
    ref = digit_tokenize(emb, b).data
    assert torch.allclose(dense_tokenize(onehot, table, b).data, ref, atol=1e-12)
    with pytest.raises(ValueError, match="one-hot"):
        dense_tokenize(onehot * 0.5, table, b)


def test_dense_detokenize():
    table = SemanticEmbeddingTable(np.eye(3))
    b = identity_(ConvBlock(3, 3))
    q = torch.tensor([[0.0, 1.0, 0.0]]).repeat(4, 1)
    idx, _ = dense_detokenize(q, (2, 2), table, b, (4, 4), 2)
    assert torch.all(idx == 1)
    q = torch.eye(3)[[0, 1, 2, 0]]
    idx, _ = dense_detokenize(q, (2, 2), table, b, (2, 2), 1)
    assert idx.tolist() == [[0, 1], [2, 0]]

    idx, sims = dense_detokenize(q, (2, 2), table, b, (4, 4), 2)
    grid = q.numpy().reshape(2, 2, 3)

    def src(o, n):
        # half-pixel bilinear source coordinate, clamped at the border
        return min(max((o + 0.5) * n / (2 * n) - 0.5, 0.0), n - 1.0)

    for y in range(4):
        for x in range(4):
            sy, sx = src(y, 2), src(x, 2)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, 1), min(x0 + 1, 1)
            wy, wx = sy - y0, sx - x0
            f = ((1 - wy) * (1 - wx) * grid[y0, x0] + (1 - wy) * wx * grid[y0, x1]
                 + wy * (1 - wx) * grid[y1, x0] + wy * wx * grid[y1, x1])
            assert np.allclose(sims[:, y, x].detach().numpy(), f)
            assert int(idx[y, x]) == int(np.argmax(f))
    with pytest.raises(ValueError):
        dense_detokenize(q, (2, 2), table, b, (5, 4), 2)


def test_dense_round_trip(rng):
    c = 4
    table = SemanticEmbeddingTable(np.eye(c))
    labels = rng.integers(0, c, size=(4, 4))
    onehot = torch.tensor(np.eye(c)[labels].transpose(2, 0, 1))
    tok = dense_tokenize(onehot, table, identity_(ConvBlock(c, c, 1, spatial_dims=2)))
    idx, _ = dense_detokenize(tok, tok.layout, table, identity_(ConvBlock(c, c)), (4, 4), 1)
    assert np.array_equal(idx.numpy(), labels)


def test_codec_gradients(words, rng):
    v, t = words
    bs, bd = ConvBlock(8, 5), ConvBlock(2, 5)
    names = ["nose", "left knee", "pedestrian"]
    assert check_elementwise(lambda c: sparse_tokenize(names, c, t, v, bs, bd).data.pow(2).sum(),
                             [torch.randn(3, 2)]) < 1e-4
    table = SemanticEmbeddingTable(rng.normal(size=(3, 4)))
    b = ConvBlock(5, 4)
    assert check_elementwise(lambda q: dense_detokenize(q, (2, 2), table, b, (4, 4), 2)[1].sin().sum(),
                             [torch.randn(4, 5)]) < 1e-4
    cb = ConvBlock(5, 4)
    assert check_elementwise(lambda q: text_classify_detokenize(q, table, cb).scores.log().sum(),
                             [torch.randn(3, 5)]) < 1e-4
