"""Adam training loop with warmup/decay, early stopping and batched tracking."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ..corpus import Corpus, Dialog, EncoderInput, LabelReport, label_dialog
from ..eval import joint_goal_accuracy
from ..ontology import Ontology
from ..predictions import PredictionBundle
from ..tokenizer import UNK, build_vocab
from ..tracker import DialogState, InformMemory, aux_features, apply_turn
from .config import TrainConfig
from .network import DSTModel, Example

log = logging.getLogger(__name__)


def lr_at(step: int, total: int, lr: float, warmup_proportion: float) -> float:
    """Linear warmup to ``lr`` over the first steps, then linear decay to 0."""
    warm = warmup_proportion * total
    if step < warm:
        return lr * step / warm
    if total <= warm:
        return lr
    return lr * max(0.0, (total - step) / (total - warm))


class Adam:
    def __init__(self, params: dict[str, np.ndarray], b1=0.9, b2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads, lr: float) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k in sorted(params):
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            params[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
    if max_norm and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= s
    return norm


def corpus_texts(corpus: Corpus):
    for d in corpus.dialogs:
        for t in d.turns:
            yield t.user_utterance
            yield t.system_utterance


def has_refer_labels(corpus: Corpus) -> bool:
    return any(t.gold is not None and "refer" in t.gold.gate.values() for d in corpus.dialogs for t in d.turns)


def build_examples(model: DSTModel, corpus: Corpus) -> tuple[list[Example], LabelReport]:
    """Training examples with gold aux features (pre-turn gold state)."""
    c = model.cfg
    report = LabelReport()
    out: list[Example] = []
    for d in corpus.dialogs:
        labels, inputs, r = label_dialog(
            d, model.ontology, model.tokenizer, c.max_len, c.use_history, c.single_copy, c.mask_history
        )
        report.merge(r)
        prev: dict[str, str] = {}
        for turn, g, inp in zip(d.turns, labels, inputs):
            aux = aux_features(InformMemory.from_turn(turn), prev, model.ontology)
            out.append(model.example(inp, aux, g))
            prev = g.state
    return out, report


def _value_positions(ex: Example) -> np.ndarray:
    pos = np.zeros(len(ex.ids), dtype=bool)
    for s, e in ex.span:
        if s >= 0:
            pos[s : e + 1] = True
    return pos


def make_batches(examples: list[Example], batch_size: int, rng: np.random.Generator, pool: int = 50):
    """Shuffled batches of similar length to limit padding."""
    order = rng.permutation(len(examples))
    chunk = batch_size * pool
    batches = []
    for i in range(0, len(order), chunk):
        part = sorted(order[i : i + chunk].tolist(), key=lambda j: (len(examples[j].ids), j))
        batches.extend(part[k : k + batch_size] for k in range(0, len(part), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def _drop_values(ex: Example, value_pos: np.ndarray, rate: float, rng: np.random.Generator, unk: int) -> Example:
    """Slot value dropout: gold value tokens become [UNK] with probability ``rate``."""
    drop = value_pos & (rng.random(len(ex.ids)) < rate)
    return replace(ex, ids=np.where(drop, unk, ex.ids))


@dataclass
class TrackOutput:
    states: dict[str, list[DialogState]]
    bundles: dict[str, list[PredictionBundle]]
    inputs: dict[str, list[EncoderInput]]


def predict_corpus(model: DSTModel, corpus: Corpus, batch_size: int = 64) -> TrackOutput:
    """Track every dialog with the model, feeding predicted states back as aux.

    Turns are batched across dialogs at equal turn depth.
    """
    dialogs: list[Dialog] = corpus.dialogs
    inputs = {d.dialog_id: [model.input_for(d, t) for t in range(len(d.turns))] for d in dialogs}
    states = {d.dialog_id: [] for d in dialogs}
    bundles = {d.dialog_id: [] for d in dialogs}
    current = {d.dialog_id: DialogState() for d in dialogs}
    depth = max((len(d.turns) for d in dialogs), default=0)
    for t in range(depth):
        live = [d for d in dialogs if len(d.turns) > t]
        for i in range(0, len(live), batch_size):
            group = live[i : i + batch_size]
            inps = [inputs[d.dialog_id][t] for d in group]
            auxes = [aux_features(InformMemory.from_turn(d.turns[t]), current[d.dialog_id], model.ontology)
                     for d in group]
            for d, inp, pb in zip(group, inps, model.predict_batch(inps, auxes)):
                ds = apply_turn(current[d.dialog_id], d.turns[t], pb, inp, model.ontology)
                current[d.dialog_id] = ds
                states[d.dialog_id].append(ds)
                bundles[d.dialog_id].append(pb)
    return TrackOutput(states, bundles, inputs)


def corpus_jga(model: DSTModel, corpus: Corpus) -> float:
    pred = predict_corpus(model, corpus).states
    gold = [[DialogState(t.gold.state) for t in d.turns] for d in corpus.dialogs]
    return joint_goal_accuracy([pred[d.dialog_id] for d in corpus.dialogs], gold, model.ontology)


@dataclass
class TrainResult:
    model: DSTModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev_jga: float = float("nan")
    label_report: LabelReport = field(default_factory=LabelReport)
    seconds: float = 0.0


def train(
    train_corpus: Corpus,
    dev_corpus: Corpus | None,
    ontology: Ontology,
    cfg: TrainConfig,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Fit a fresh model; keeps the parameters with the best dev JGA."""
    if not train_corpus.dialogs:
        raise ValueError("train split is empty")
    if dev_corpus is not None and not dev_corpus.dialogs:
        raise ValueError("dev split is empty")
    t0 = time.perf_counter()
    if not has_refer_labels(train_corpus) and cfg.loss_weights[2] > 0:
        cfg = cfg.without_refer()
    vocab = build_vocab(corpus_texts(train_corpus), min_count=cfg.min_count)
    model = DSTModel(ontology, vocab, cfg)
    examples, report = build_examples(model, train_corpus)
    if not any(ex.refer is not None and (ex.refer >= 0).any() for ex in examples) and cfg.loss_weights[2] > 0:
        # every refer label collapsed (e.g. the single-copy ablation)
        model.cfg = cfg = cfg.without_refer()
    value_pos = [_value_positions(ex) for ex in examples]
    rng = np.random.default_rng([cfg.seed, 1])
    n_batches = -(-len(examples) // cfg.batch_size)
    total = cfg.epochs * n_batches
    opt = Adam(model.params)
    unk = model.tok2id[UNK]
    result = TrainResult(model, label_report=report)
    best = None
    stale = 0
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for idx in make_batches(examples, cfg.batch_size, rng):
            exs = [examples[j] for j in idx]
            if cfg.slot_value_dropout > 0:
                exs = [_drop_values(ex, value_pos[j], cfg.slot_value_dropout, rng, unk) for ex, j in zip(exs, idx)]
            batch = model.collate(exs)
            loss, _, grads = model.loss_and_grads(batch, train=True, rng=rng)
            clip_grads(grads, cfg.grad_clip)
            opt.step(model.params, grads, lr_at(step, total, cfg.lr, cfg.warmup_proportion))
            step += 1
            losses.append(loss)
        rec = {"epoch": epoch, "loss": float(np.mean(losses))}
        if dev_corpus is not None:
            rec["dev_jga"] = corpus_jga(model, dev_corpus)
            if best is None or rec["dev_jga"] > result.best_dev_jga:
                best = {k: v.copy() for k, v in model.params.items()}
                result.best_dev_jga = rec["dev_jga"]
                result.best_epoch = epoch
                stale = 0
            else:
                stale += 1
        result.history.append(rec)
        log.info("epoch %d loss %.4f dev_jga %s", epoch, rec["loss"], rec.get("dev_jga"))
        if on_epoch:
            on_epoch(rec)
        if cfg.patience is not None and stale >= cfg.patience:
            break
    if best is not None:
        model.params = best
    else:
        result.best_epoch = len(result.history)
    result.seconds = time.perf_counter() - t0
    return result
