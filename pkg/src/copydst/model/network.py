"""Full tracker network: featurization, batched forward/backward, bundles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import ROLES, USER_ROLES, Dialog, EncoderInput, GoldLabels, build_input
from ..ontology import BOOL_GATE_CLASSES, GATE_CLASSES, Ontology, SchemaError
from ..predictions import PredictionBundle
from ..tokenizer import PAD, UNK, Tokenizer
from ..tracker import AuxFeatures
from .config import TrainConfig
from .encoder import Encoder, init_encoder
from .heads import HeadOutputs, Targets, batch_loss, heads_backward, heads_forward, init_heads


@dataclass
class EncoderOutput:
    pooled: np.ndarray  # (d,)
    token_reps: np.ndarray  # (seq_len, d)


@dataclass
class Example:
    ids: np.ndarray
    roles: np.ndarray
    span_ok: np.ndarray
    aux: np.ndarray
    gate: np.ndarray | None = None
    bgate: np.ndarray | None = None
    span: np.ndarray | None = None
    refer: np.ndarray | None = None


@dataclass
class Batch:
    ids: np.ndarray
    roles: np.ndarray
    valid: np.ndarray
    span_ok: np.ndarray
    aux: np.ndarray
    lengths: np.ndarray
    targets: Targets | None = None


class DSTModel:
    def __init__(self, ontology: Ontology, vocab, cfg: TrainConfig, params: dict | None = None):
        self.ontology = ontology
        self.cfg = cfg
        self.vocab = sorted(set(vocab) | {PAD, UNK})
        self.tok2id = {t: i for i, t in enumerate(self.vocab)}
        self.tokenizer = Tokenizer(self.vocab)
        self.span_slots = [s for s in ontology.slot_ids if not ontology.is_boolean(s)]
        self.bool_slots = [s for s in ontology.slot_ids if ontology.is_boolean(s)]
        self.n = len(ontology)
        self.d = cfg.d_model
        self.d_in = self.d + 2 * self.n if cfg.use_aux else self.d
        self.encoder = Encoder(cfg.n_layers, cfg.n_heads, cfg.dropout, max(512, cfg.max_len))
        self.dtype = np.dtype(cfg.dtype)
        if params is None:
            rng = np.random.default_rng(cfg.seed)
            params = init_encoder(rng, len(self.vocab), len(ROLES), self.d, cfg.n_layers, cfg.d_ff)
            params.update(init_heads(rng, len(self.span_slots), len(self.bool_slots), self.n, self.d, self.d_in))
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}

    # -- featurization -----------------------------------------------------

    def input_for(self, dialog: Dialog, t: int) -> EncoderInput:
        c = self.cfg
        return build_input(dialog.turns[t], dialog.history(t), c.max_len, c.mask_history, self.tokenizer, c.use_history)

    def token_ids(self, tokens) -> np.ndarray:
        unk = self.tok2id[UNK]
        return np.array([self.tok2id.get(t, unk) for t in tokens], dtype=np.int64)

    def example(self, inp: EncoderInput, aux: AuxFeatures, gold: GoldLabels | None = None) -> Example:
        if len(inp) < 1:
            raise ValueError("encoder input is empty")
        roles = np.array([ROLES.index(r) for r in inp.segment_roles], dtype=np.int64)
        span_ok = np.array([r in USER_ROLES for r in inp.segment_roles])
        ex = Example(self.token_ids(inp.tokens), roles, span_ok, self._aux_vec(aux))
        if gold is not None:
            self._attach_targets(ex, gold)
        return ex

    def _aux_vec(self, aux: AuxFeatures) -> np.ndarray:
        if len(aux.inform_vec) != self.n or len(aux.ds_vec) != self.n:
            raise ValueError(
                f"aux vectors must have {self.n} entries, got {len(aux.inform_vec)}/{len(aux.ds_vec)}"
            )
        return np.concatenate([aux.inform_vec, aux.ds_vec]).astype(self.dtype)

    def _attach_targets(self, ex: Example, gold: GoldLabels) -> None:
        spans = gold.span or {}
        S = len(self.span_slots)
        ex.gate = np.zeros(S, dtype=np.int64)
        ex.span = np.full((S, 2), -1, dtype=np.int64)
        ex.refer = np.full(S, -1, dtype=np.int64)
        for i, slot in enumerate(self.span_slots):
            if slot not in gold.gate:
                raise SchemaError(f"gold gate class missing for slot {slot!r}")
            g = gold.gate[slot]
            ex.gate[i] = GATE_CLASSES.index(g)
            if g == "span" and slot in spans:
                ex.span[i] = spans[slot]
            elif g == "refer" and slot in gold.refer:
                ex.refer[i] = self.ontology.index(gold.refer[slot])
        ex.bgate = np.array([BOOL_GATE_CLASSES.index(gold.gate[s]) for s in self.bool_slots], dtype=np.int64)

    def collate(self, examples: list[Example]) -> Batch:
        B = len(examples)
        L = max(len(e.ids) for e in examples)
        ids = np.full((B, L), self.tok2id[PAD], dtype=np.int64)
        roles = np.zeros((B, L), dtype=np.int64)
        valid = np.zeros((B, L), dtype=bool)
        span_ok = np.zeros((B, L), dtype=bool)
        for b, e in enumerate(examples):
            n = len(e.ids)
            ids[b, :n] = e.ids
            roles[b, :n] = e.roles
            valid[b, :n] = True
            span_ok[b, :n] = e.span_ok
        aux = np.stack([e.aux for e in examples])
        lengths = np.array([len(e.ids) for e in examples])
        targets = None
        if all(e.gate is not None for e in examples):
            targets = Targets(
                np.stack([e.gate for e in examples]),
                np.stack([e.bgate for e in examples]).reshape(B, len(self.bool_slots)),
                np.stack([e.span for e in examples]),
                np.stack([e.refer for e in examples]),
            )
        return Batch(ids, roles, valid, span_ok, aux, lengths, targets)

    # -- compute -------------------------------------------------------------

    def forward_batch(self, batch: Batch, train: bool = False, rng=None):
        p = self.params
        pooled, tokens, ecache = self.encoder.forward(p, batch.ids, batch.roles, batch.valid, train, rng)
        z = np.concatenate([pooled, batch.aux], axis=1) if self.cfg.use_aux else pooled
        out, hcache = heads_forward(p, z, tokens, batch.span_ok)
        return out, (ecache, hcache)

    def loss(self, batch: Batch, train: bool = False, rng=None) -> float:
        out, _ = self.forward_batch(batch, train, rng)
        return batch_loss(out, batch.targets, self.cfg.loss_weights, self.n)[0]

    def loss_and_grads(self, batch: Batch, train: bool = True, rng=None):
        if batch.targets is None:
            raise ValueError("batch has no gold targets")
        out, (ecache, hcache) = self.forward_batch(batch, train, rng)
        loss, parts, dlogits = batch_loss(out, batch.targets, self.cfg.loss_weights, self.n)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        dz, dtokens = heads_backward(self.params, hcache, dlogits, grads)
        self.encoder.backward(self.params, ecache, dz[:, : self.d], dtokens, grads)
        return loss, parts, grads

    def bundles(self, out: HeadOutputs, batch: Batch) -> list[PredictionBundle]:
        res = []
        for b, n in enumerate(batch.lengths):
            pb = PredictionBundle()
            for i, slot in enumerate(self.span_slots):
                pb.gate[slot] = out.gate[b, i].astype(float)
                pb.start[slot] = out.start[b, i, :n].astype(float)
                pb.end[slot] = out.end[b, i, :n].astype(float)
                pb.refer[slot] = out.refer[b, i].astype(float)
            for i, slot in enumerate(self.bool_slots):
                pb.gate[slot] = out.bgate[b, i].astype(float)
            res.append(pb)
        return res

    def encode(self, inp: EncoderInput, train_mode: bool = False, rng=None) -> EncoderOutput:
        """Single-input encoder contract; dropout only in ``train_mode``."""
        ex = self.example(inp, AuxFeatures(np.zeros(self.n), np.zeros(self.n)))
        b = self.collate([ex])
        if train_mode and rng is None:
            rng = np.random.default_rng(self.cfg.seed)
        pooled, tokens, _ = self.encoder.forward(self.params, b.ids, b.roles, b.valid, train_mode, rng)
        return EncoderOutput(pooled[0], tokens[0])

    def forward(self, inp: EncoderInput, aux: AuxFeatures) -> PredictionBundle:
        b = self.collate([self.example(inp, aux)])
        out, _ = self.forward_batch(b)
        return self.bundles(out, b)[0]

    def predict_batch(self, inputs: list[EncoderInput], auxes: list[AuxFeatures]) -> list[PredictionBundle]:
        b = self.collate([self.example(i, a) for i, a in zip(inputs, auxes)])
        out, _ = self.forward_batch(b)
        return self.bundles(out, b)
