"""Full model: codecs + shared encoder/decoder under the three sharing schemes.

Scheme ``a`` shares one tokenizer/de-tokenizer per modality role, scheme
``b`` gives every dataset its own codecs, scheme ``c`` additionally gives
every dataset its own decoder and modality indicator. The encoder is always
shared.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .blocks import ConvBlock, TokenSequence, similarity
from .codecs import (Modality, ModalitySample, image_tokenize, sparse_detokenize,
                     sparse_tokenize, text_caption_detokenize)
from .embeddings import Synthetic, Vocabulary, build_table, phrase_table
from .objectives import LossOptions, LossReport, box_cxcywh_to_xyxy, task_loss
from .tasks import JOINT_NAMES, TaskSpec, all_words, get_task
from .translator import (Decoder, Encoder, ModalityIndicator, PEScheme,
                         TranslatorConfig, build_attention_mask, build_positional_embeddings,
                         make_indicators, positional_for)

SPARSE_DIGITS = 4


@dataclass
class ModelConfig:
    d_model: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    heads: int = 4
    mlp_ratio: float = 2.0
    drop_path: float = 0.0
    patch_size: int = 16
    sharing_scheme: str = "a"
    d_sem: int = 64
    embed_seed: int = 0
    encoded_block: str = "full"
    temperature: float = 1.0
    caption_len: int = 40
    det_cost_cls: float = 1.0
    det_cost_l1: float = 5.0
    det_cost_giou: float = 2.0
    det_bg_weight: float = 0.1
    det_loss_l1: float = 5.0
    det_loss_giou: float = 2.0

    def __post_init__(self):
        if self.sharing_scheme not in ("a", "b", "c"):
            raise ValueError(f"sharing_scheme must be a, b or c, got {self.sharing_scheme!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        self.translator  # validates the transformer dims

    @property
    def translator(self) -> TranslatorConfig:
        return TranslatorConfig(self.d_model, self.enc_layers, self.dec_layers, self.heads,
                                self.mlp_ratio, self.drop_path)

    @property
    def loss_options(self) -> LossOptions:
        return LossOptions(self.temperature, self.det_cost_cls, self.det_cost_l1,
                           self.det_cost_giou, self.det_bg_weight, self.det_loss_l1,
                           self.det_loss_giou)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class HulkModel(nn.Module):
    """``datasets`` is a list of ``(dataset_id, task_name)`` pairs (or task names)."""

    def __init__(self, cfg: ModelConfig, datasets: Sequence):
        super().__init__()
        self.cfg = cfg
        self.datasets: Dict[str, TaskSpec] = {}
        for d in datasets:
            ds, task = (d, d) if isinstance(d, str) else d
            if ds in self.datasets:
                raise ValueError(f"duplicate dataset id {ds!r}")
            self.datasets[ds] = get_task(task)

        self.vocab = Vocabulary.from_words(all_words())
        self.word_table = build_table(self.vocab, Synthetic(cfg.embed_seed), cfg.d_sem)
        self.class_tables = {}
        self.class_vocabs = {}
        for spec in self.datasets.values():
            if spec.classes and spec.name not in self.class_tables:
                self.class_tables[spec.name] = phrase_table(spec.classes, self.word_table,
                                                            self.vocab)
                self.class_vocabs[spec.name] = Vocabulary.from_words(spec.classes)

        tc = cfg.translator
        self.encoder = Encoder(tc)
        self.decoders = nn.ModuleDict()
        self.indicators = nn.ModuleDict()
        self.codecs = nn.ModuleDict()
        for ds, spec in self.datasets.items():
            self._build_codecs(ds, spec)
            dk = self.decoder_key(ds)
            if dk not in self.decoders:
                self.decoders[dk] = Decoder(tc)
            ik = self.indicator_key(ds)
            if ik not in self.indicators:
                self.indicators[ik] = ModalityIndicator(cfg.d_model)
        self._pe_cache = {}

    # -- parameter sharing ---------------------------------------------------------

    def _codec_key(self, role: str, modality: Modality, ds: str) -> str:
        if self.cfg.sharing_scheme == "a":
            return f"{role}_{modality.value}"
        return f"{role}_{modality.value}_{ds}"

    def tokenizer_key(self, ds: str) -> str:
        return self._codec_key("tok", self.datasets[ds].input_modality, ds)

    def detokenizer_key(self, ds: str) -> str:
        return self._codec_key("detok", self.datasets[ds].output_modality, ds)

    def feedback_key(self, ds: str) -> str:
        return self._codec_key("tok", Modality.TEXT, ds)

    def decoder_key(self, ds: str) -> str:
        return ds if self.cfg.sharing_scheme == "c" else "shared"

    def indicator_key(self, ds: str) -> str:
        if self.cfg.sharing_scheme == "c":
            return ds
        return self.datasets[ds].output_modality.value

    def _build_codecs(self, ds: str, spec: TaskSpec):
        c = self.cfg
        d, s = c.d_model, c.d_sem
        k = self.tokenizer_key(ds)
        if k not in self.codecs:
            if spec.input_modality is Modality.IMAGE:
                self.codecs[k] = nn.ModuleDict({"digit": ConvBlock(3, d, c.patch_size, 2)})
            elif spec.input_modality is Modality.SPARSE:
                self.codecs[k] = nn.ModuleDict({"semantic": ConvBlock(s, d),
                                                "digit": ConvBlock(SPARSE_DIGITS, d)})
            else:
                self.codecs[k] = nn.ModuleDict({"semantic": ConvBlock(s, d)})
        k = self.detokenizer_key(ds)
        if k not in self.codecs:
            mods = {"semantic": ConvBlock(d, s)}
            if spec.output_modality is Modality.SPARSE:
                mods["digit"] = ConvBlock(d, SPARSE_DIGITS)
            self.codecs[k] = nn.ModuleDict(mods)
        if spec.name == "caption":
            k = self.feedback_key(ds)
            if k not in self.codecs:
                self.codecs[k] = nn.ModuleDict({"semantic": ConvBlock(s, d)})

    @property
    def probe(self) -> nn.Parameter:
        """Task-shared gradient probe: the last LayerNorm weight of the decoder."""
        if self.cfg.sharing_scheme == "c":
            raise ValueError("scheme c has no task-shared decoder probe")
        return self.decoders["shared"].probe

    def encoder_dtype(self):
        return next(self.parameters()).dtype

    # -- inputs ------------------------------------------------------------------

    def collate(self, ds: str, samples: Sequence[ModalitySample]) -> torch.Tensor:
        spec = self.datasets[ds]
        dt = self.encoder_dtype()
        for smp in samples:
            if smp.kind is not spec.input_modality:
                raise ValueError(f"task {spec.name} expects {spec.input_modality.value} input, "
                                 f"got {smp.kind.value}")
        if spec.input_modality is Modality.IMAGE:
            return torch.as_tensor(np.stack([s.image for s in samples]), dtype=dt)
        if spec.input_modality is Modality.SPARSE:
            coords = np.stack([s.coords for s in samples])
            pad = SPARSE_DIGITS - coords.shape[-1]
            coords = np.concatenate([coords, np.zeros(coords.shape[:-1] + (pad,))], axis=-1)
            return torch.as_tensor(coords, dtype=dt)
        raise ValueError(f"unsupported input modality {spec.input_modality.value}")

    def tokenize(self, ds: str, x: torch.Tensor) -> TokenSequence:
        spec = self.datasets[ds]
        tok = self.codecs[self.tokenizer_key(ds)]
        if spec.input_modality is Modality.IMAGE:
            return image_tokenize(x, tok["digit"])
        names = list(JOINT_NAMES) if spec.name == "skeleton" else []
        return sparse_tokenize(names, x, self.word_table, self.vocab, tok["semantic"],
                               tok["digit"], skeleton=spec.name == "skeleton")

    # -- indicators ----------------------------------------------------------------

    def indicator_positional(self, ds: str, in_layout, n_prime: int):
        spec = self.datasets[ds]
        key = (spec.name, tuple(in_layout), n_prime)
        if key not in self._pe_cache:
            d = self.cfg.d_model
            anchors = None
            if spec.pe_scheme is PEScheme.ANCHOR_GRID:
                pe, anchors = build_positional_embeddings(spec.pe_scheme, spec.pe_layout, d,
                                                          count=n_prime)
            elif spec.pe_scheme is PEScheme.SUM3D:
                pe = build_positional_embeddings(spec.pe_scheme, spec.pe_layout, d, count=n_prime)
            elif spec.output_modality is Modality.DENSE:
                pe = build_positional_embeddings(spec.pe_scheme, in_layout, d)
            else:
                pe = build_positional_embeddings(spec.pe_scheme, (n_prime,), d)
            self._pe_cache[key] = (pe, anchors)
        return self._pe_cache[key]

    def n_prime(self, ds: str, n_input: int) -> int:
        spec = self.datasets[ds]
        if spec.name == "caption":
            return self.cfg.caption_len
        return spec.resolve_n_prime(n_input)

    # -- forward -------------------------------------------------------------------

    def encode(self, ds: str, x: torch.Tensor) -> TokenSequence:
        p = self.tokenize(ds, x)
        pos = positional_for(p.layout, self.cfg.d_model, p.data.dtype)
        return TokenSequence(self.encoder(p.data, pos), p.layout)

    def _decode(self, ds: str, h: TokenSequence, ind: torch.Tensor) -> torch.Tensor:
        spec = self.datasets[ds]
        mask = build_attention_mask(len(h), ind.shape[-2], spec.mask_regime,
                                    self.cfg.encoded_block)
        return self.decoders[self.decoder_key(ds)](h.data, ind, mask)

    def indicator_tokens(self, ds: str, h: TokenSequence) -> Tuple[torch.Tensor, Optional[np.ndarray]]:
        n_prime = self.n_prime(ds, len(h))
        pe, anchors = self.indicator_positional(ds, h.layout, n_prime)
        ind = make_indicators(self.indicators[self.indicator_key(ds)], n_prime, pe).data
        return ind, anchors

    def caption_feedback(self, ds: str, ids: torch.Tensor) -> torch.Tensor:
        """Word embeddings of ``ids`` shifted right by one, projected to d_model."""
        table = self.class_tables["caption"]
        v = torch.tensor(table.matrix, dtype=self.encoder_dtype())
        emb = self.codecs[self.feedback_key(ds)]["semantic"].forward_tokens(v[ids])
        out = torch.zeros(*ids.shape[:-1], self.cfg.caption_len, self.cfg.d_model,
                          dtype=emb.dtype)
        n = min(ids.shape[-1], self.cfg.caption_len - 1)
        out[..., 1:n + 1, :] = emb[..., :n, :]
        return out

    def forward(self, ds: str, x: torch.Tensor, caption_ids: Optional[torch.Tensor] = None):
        """Batched forward pass returning the de-tokenizer outputs used by the losses."""
        spec = self.datasets[ds]
        h = self.encode(ds, x)
        ind, anchors = self.indicator_tokens(ds, h)
        if spec.name == "caption" and caption_ids is not None:
            ind = ind + self.caption_feedback(ds, caption_ids)
        q = self._decode(ds, h, ind)
        return self.detokenize(ds, q, h.layout, x, anchors)

    def detokenize(self, ds, q, in_layout, x, anchors=None) -> Dict[str, torch.Tensor]:
        spec = self.datasets[ds]
        det = self.codecs[self.detokenizer_key(ds)]
        table = self.class_tables.get(spec.name)
        out: Dict[str, torch.Tensor] = {}
        if spec.output_modality is Modality.DENSE:
            H, W = x.shape[-2:]
            feats = det["semantic"].forward_tokens(q)
            gh, gw = in_layout
            up = torch.nn.functional.interpolate(
                feats.transpose(-1, -2).reshape(-1, feats.shape[-1], gh, gw), size=(H, W),
                mode="bilinear", align_corners=False).movedim(1, -1)
            out["pixel_features"] = up
            # same read-out as dense_detokenize, keeping the features for the loss
            out["sims"] = similarity(up, table).movedim(-1, -3)
            out["avg_features"] = feats.mean(-2)
        elif spec.output_modality is Modality.TEXT:
            out["features"] = det["semantic"].forward_tokens(q)
        else:
            _, digits, feats = sparse_detokenize(q, table, det["semantic"] if table else None,
                                                 det["digit"], spec.coord_dim,
                                                 with_semantics=table is not None)
            if feats is not None:
                out["features"] = feats
            if spec.name == "detection":
                a = torch.as_tensor(anchors, dtype=digits.dtype)
                centre = torch.sigmoid(torch.logit(a) + digits[..., :2])
                size = torch.sigmoid(digits[..., 2:4])
                out["boxes"] = box_cxcywh_to_xyxy(torch.cat([centre, size], dim=-1))
            else:
                out["coords"] = digits
        return out

    # -- losses and predictions --------------------------------------------------------

    def loss(self, ds: str, samples, targets) -> LossReport:
        spec = self.datasets[ds]
        x = self.collate(ds, samples)
        ids = None
        if spec.name == "caption":
            ids = caption_id_matrix(targets, self.cfg.caption_len)
        out = self.forward(ds, x, caption_ids=ids)
        return task_loss(spec, out, targets, self.class_tables.get(spec.name),
                         self.cfg.loss_options)

    @torch.no_grad()
    def predict(self, ds: str, samples) -> List[dict]:
        spec = self.datasets[ds]
        x = self.collate(ds, samples)
        if spec.name == "caption":
            return [{"caption": self.greedy_caption(ds, x[i:i + 1])} for i in range(len(x))]
        out = self.forward(ds, x)
        table = self.class_tables.get(spec.name)
        tau = self.cfg.temperature
        preds = []
        if spec.name == "parsing":
            lab = out["sims"].argmax(dim=-3).cpu().numpy()
            preds = [{"labels": m} for m in lab]
        elif spec.name == "pose2d":
            prob = torch.softmax(out["sims"] / tau, dim=-3)[:, 1:]
            W = prob.shape[-1]
            flat = prob.flatten(-2).argmax(-1).cpu().numpy()
            joints = np.stack([flat % W, flat // W], axis=-1).astype(np.float64)
            preds = [{"joints": j} for j in joints]
        elif spec.name in ("attribute", "skeleton"):
            mode = "attribute" if spec.name == "attribute" else "action"
            sims = similarity(out["features"], table)
            scores = torch.diagonal(torch.softmax(sims / tau, dim=-1), dim1=-2, dim2=-1)
            if mode == "attribute":
                preds = [{"bits": (s > 0.5).cpu().numpy().astype(np.int64)} for s in scores]
            else:
                preds = [{"action": int(s.argmax())} for s in scores]
        elif spec.name == "detection":
            fg = torch.softmax(similarity(out["features"], table) / tau, dim=-1)[..., 0]
            preds = [{"boxes": b.cpu().numpy(), "scores": s.cpu().numpy()}
                     for b, s in zip(out["boxes"], fg)]
        elif spec.name == "pose3d":
            preds = [{"joints3d": c.cpu().numpy()} for c in out["coords"]]
        elif spec.name == "mesh":
            preds = [{"vertices": c.cpu().numpy()} for c in out["coords"]]
        return preds

    def greedy_caption(self, ds: str, x: torch.Tensor) -> List[str]:
        """Greedy decode for a single image ``(1, C, H, W)``; returns words incl. <end>."""
        h = self.encode(ds, x)
        ind, _ = self.indicator_tokens(ds, h)
        L = self.cfg.caption_len
        det = self.codecs[self.detokenizer_key(ds)]

        def step(prefix):
            ids = torch.as_tensor([prefix], dtype=torch.long).reshape(1, -1)
            fb = self.caption_feedback(ds, ids) if prefix else 0.0
            return self._decode(ds, h, ind + fb)[0]

        return text_caption_detokenize(step, self.class_tables["caption"],
                                       self.class_vocabs["caption"], det["semantic"], max_len=L)


def caption_id_matrix(targets, length: int) -> torch.Tensor:
    ids = np.zeros((len(targets), length), dtype=np.int64)
    for b, t in enumerate(targets):
        seq = np.asarray(t["ids"])[:length]
        ids[b, :len(seq)] = seq
        ids[b, len(seq):] = seq[-1]
    return torch.as_tensor(ids)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
