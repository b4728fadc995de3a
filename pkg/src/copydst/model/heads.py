"""Per-slot gate, span and refer heads plus the masked joint loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..corpus import GoldLabels
from ..ontology import BOOL_GATE_CLASSES, GATE_CLASSES, Ontology, SchemaError
from ..predictions import PredictionBundle
from .encoder import softmax

_TINY = 1e-300


def init_heads(rng, n_span_slots: int, n_bool_slots: int, n_slots: int, d: int, d_in: int, std=0.02):
    return {
        "head.gate.w": rng.normal(0, std, (n_span_slots, len(GATE_CLASSES), d_in)),
        "head.gate.b": np.zeros((n_span_slots, len(GATE_CLASSES))),
        "head.bgate.w": rng.normal(0, std, (n_bool_slots, len(BOOL_GATE_CLASSES), d_in)),
        "head.bgate.b": np.zeros((n_bool_slots, len(BOOL_GATE_CLASSES))),
        "head.span.w": rng.normal(0, std, (n_span_slots, 2, d)),
        "head.span.b": np.zeros((n_span_slots, 2)),
        "head.refer.w": rng.normal(0, std, (n_span_slots, n_slots + 1, d_in)),
        "head.refer.b": np.zeros((n_span_slots, n_slots + 1)),
    }


@dataclass
class HeadOutputs:
    """Batched distributions. Non-boolean slots index the first three."""

    gate: np.ndarray  # (B, S, 5)
    bgate: np.ndarray  # (B, Sb, 4)
    start: np.ndarray  # (B, S, L)
    end: np.ndarray  # (B, S, L)
    refer: np.ndarray  # (B, S, N+1)


@dataclass
class Targets:
    """Class indices; -1 marks an unsupervised span or refer entry."""

    gate: np.ndarray  # (B, S)
    bgate: np.ndarray  # (B, Sb)
    span: np.ndarray  # (B, S, 2)
    refer: np.ndarray  # (B, S)


def _linear(z, w, b):
    # z (B, D), w (S, K, D) -> (B, S, K)
    S, K, D = w.shape
    return (z @ w.reshape(S * K, D).T).reshape(-1, S, K) + b


def heads_forward(p, z, tokens, span_mask):
    """``z`` is pooled (+ aux), ``tokens`` the token reps, ``span_mask`` (B, L) bool."""
    B, L, d = tokens.shape
    S = p["head.span.w"].shape[0]
    gate = softmax(_linear(z, p["head.gate.w"], p["head.gate.b"]))
    bgate = softmax(_linear(z, p["head.bgate.w"], p["head.bgate.b"]))
    refer = softmax(_linear(z, p["head.refer.w"], p["head.refer.b"]))
    sl = tokens.reshape(B * L, d) @ p["head.span.w"].reshape(S * 2, d).T
    sl = sl.reshape(B, L, S, 2).transpose(0, 2, 3, 1) + p["head.span.b"][None, :, :, None]  # (B,S,2,L)
    sl = np.where(span_mask[:, None, None, :], sl, -1e9)
    sp = softmax(sl, axis=-1)
    out = HeadOutputs(gate, bgate, sp[:, :, 0], sp[:, :, 1], refer)
    return out, (z, tokens)


def _ce(probs, idx):
    """Cross-entropy of ``probs[..., idx]`` and the softmax logit gradient."""
    safe = np.where(idx < 0, 0, idx)
    picked = np.take_along_axis(probs, safe[..., None], axis=-1)[..., 0]
    ce = -np.log(np.maximum(picked, np.finfo(probs.dtype).tiny))
    grad = probs.copy()
    np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, axis=-1)
    return ce, grad


def batch_loss(out: HeadOutputs, tg: Targets, weights, n_slots: int):
    """Joint loss averaged over turns and logit gradients for each head.

    Span and refer terms are taken only over slots labeled for them, so an
    unlabeled slot's span or refer head contributes exactly nothing.
    """
    wg, ws, wr = weights
    B = tg.gate.shape[0]
    ce_g, d_g = _ce(out.gate, tg.gate)
    ce_b, d_b = _ce(out.bgate, tg.bgate)
    l_gate = (ce_g.sum(1) + ce_b.sum(1)) / n_slots
    cg = wg / (B * n_slots)
    d_g *= cg
    d_b *= cg

    span_on = tg.span[..., 0] >= 0  # (B, S)
    k = span_on.sum(1)
    ce_s, d_s = _ce(out.start, tg.span[..., 0])
    ce_e, d_e = _ce(out.end, tg.span[..., 1])
    per = np.where(span_on, 0.5 * (ce_s + ce_e), 0.0)
    l_span = np.where(k > 0, per.sum(1) / np.maximum(k, 1), 0.0)
    cs = np.where(span_on, ws * 0.5 / (B * np.maximum(k, 1))[:, None], 0.0)[..., None]
    d_s *= cs
    d_e *= cs

    ref_on = tg.refer >= 0
    m = ref_on.sum(1)
    ce_r, d_r = _ce(out.refer, tg.refer)
    l_ref = np.where(m > 0, np.where(ref_on, ce_r, 0.0).sum(1) / np.maximum(m, 1), 0.0)
    d_r *= np.where(ref_on, wr / (B * np.maximum(m, 1))[:, None], 0.0)[..., None]

    total = wg * l_gate + ws * l_span + wr * l_ref
    parts = {"gate": float(l_gate.mean()), "span": float(l_span.mean()), "refer": float(l_ref.mean())}
    return float(total.mean()), parts, (d_g, d_b, d_s, d_e, d_r)


def heads_backward(p, cache, dlogits, grads):
    z, tokens = cache
    d_g, d_b, d_s, d_e, d_r = dlogits
    B, L, d = tokens.shape
    dz = np.zeros_like(z)
    for name, dl in (("gate", d_g), ("bgate", d_b), ("refer", d_r)):
        w = p[f"head.{name}.w"]
        S, K, D = w.shape
        flat = dl.reshape(B, S * K)
        grads[f"head.{name}.w"] += (flat.T @ z).reshape(S, K, D)
        grads[f"head.{name}.b"] += dl.sum(0)
        dz += flat @ w.reshape(S * K, D)
    w = p["head.span.w"]
    S = w.shape[0]
    dsl = np.stack([d_s, d_e], axis=2)  # (B,S,2,L)
    grads["head.span.b"] += dsl.sum((0, 3))
    flat = dsl.transpose(0, 3, 1, 2).reshape(B * L, S * 2)
    grads["head.span.w"] += (flat.T @ tokens.reshape(B * L, d)).reshape(S, 2, d)
    dtokens = (flat @ w.reshape(S * 2, d)).reshape(B, L, d)
    return dz, dtokens


def joint_loss(bundle: PredictionBundle, gold: GoldLabels, ontology: Ontology, weights=(0.8, 0.1, 0.1)) -> float:
    """Per-turn joint loss computed directly from distributions.

    Reference form of ``batch_loss`` for a single turn; raises when a slot
    has no gold gate class.
    """
    wg, ws, wr = weights
    n = len(ontology)
    spans = gold.span or {}
    l_gate = 0.0
    span_terms, ref_terms = [], []
    for slot in ontology.slot_ids:
        if slot not in gold.gate:
            raise SchemaError(f"gold gate class missing for slot {slot!r}")
        g = gold.gate[slot]
        classes = BOOL_GATE_CLASSES if ontology.is_boolean(slot) else GATE_CLASSES
        l_gate -= np.log(max(float(bundle.gate[slot][classes.index(g)]), _TINY))
        if g == "span" and slot in spans:
            s, e = spans[slot]
            span_terms.append(-0.5 * (np.log(max(float(bundle.start[slot][s]), _TINY))
                                      + np.log(max(float(bundle.end[slot][e]), _TINY))))
        if g == "refer" and slot in gold.refer:
            j = ontology.index(gold.refer[slot])
            ref_terms.append(-np.log(max(float(bundle.refer[slot][j]), _TINY)))
    loss = wg * l_gate / n
    if span_terms:
        loss += ws * float(np.mean(span_terms))
    if ref_terms:
        loss += wr * float(np.mean(ref_terms))
    return float(loss)
