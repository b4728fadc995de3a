"""Joint goal accuracy, slot gate metrics, recall by training frequency, OOV study."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Dialog, DialogTurn, GoldLabels, prepare_corpus
from .ontology import ALL_GATE_CLASSES, DONTCARE, Ontology, SchemaError, canonicalize

BUCKETS = ((0, 0, "0"), (1, 9, "1-9"), (10, 49, "10-49"), (50, math.inf, "50+"))

State = Mapping[str, str]


def _turn_correct(pred: State, gold: State, ontology: Ontology) -> bool:
    for slot in ontology.slot_ids:
        p, g = pred.get(slot), gold.get(slot)
        if p is None and g is None:
            continue
        if p is None or g is None or not ontology.normalize_match(slot, p, g):
            return False
    return True


def _flatten(pred: Sequence[Sequence[State]], gold: Sequence[Sequence[State]]):
    if len(pred) != len(gold):
        raise ValueError(f"predicted states cover {len(pred)} dialogs, gold has {len(gold)}")
    for i, (pd, gd) in enumerate(zip(pred, gold)):
        if len(pd) != len(gd):
            raise ValueError(f"dialog #{i}: {len(pd)} predicted turns vs {len(gd)} gold turns")
        yield from zip(pd, gd)


def joint_goal_accuracy(pred: Sequence[Sequence[State]], gold: Sequence[Sequence[State]], ontology: Ontology) -> float:
    """Fraction of turns whose full predicted state matches gold.

    Every ontology slot is checked; a slot absent from gold must be absent
    from the prediction as well.
    """
    pairs = list(_flatten(pred, gold))
    if not pairs:
        return float("nan")
    return sum(_turn_correct(p, g, ontology) for p, g in pairs) / len(pairs)


def per_slot_accuracy(pred, gold, ontology: Ontology) -> dict[str, float]:
    pairs = list(_flatten(pred, gold))
    out = {}
    for slot in ontology.slot_ids:
        ok = 0
        for p, g in pairs:
            a, b = p.get(slot), g.get(slot)
            ok += (a is None and b is None) or (a is not None and b is not None and ontology.normalize_match(slot, a, b))
        out[slot] = ok / len(pairs) if pairs else float("nan")
    return out


@dataclass
class GateMetrics:
    joint_acc: float
    per_slot_acc: dict[str, float]
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]

    def to_json(self) -> dict:
        return {
            "joint_acc": self.joint_acc,
            "per_slot_acc": self.per_slot_acc,
            "per_class": {
                c: {"precision": self.precision[c], "recall": self.recall[c], "f1": self.f1[c],
                    "support": self.support[c], "zero_support": self.support[c] == 0}
                for c in self.f1
            },
        }


def gate_metrics(pred: Sequence[Mapping[str, str]], gold: Sequence[Mapping[str, str]]) -> GateMetrics:
    """Joint and per-class one-vs-rest gate metrics over (turn, slot) pairs.

    ``pred`` and ``gold`` hold one slot->class map per turn. A class that is
    neither predicted nor present in gold reports F1 = 1.0 with support 0.
    """
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted turns vs {len(gold)} gold turns")
    tp, fp, fn = Counter(), Counter(), Counter()
    support = Counter()
    joint = 0
    slot_ok: Counter = Counter()
    slot_n: Counter = Counter()
    for p, g in zip(pred, gold):
        if set(p) != set(g):
            raise ValueError("predicted and gold gate maps cover different slots")
        all_ok = True
        for slot, gc in g.items():
            pc = p[slot]
            for c in (pc, gc):
                if c not in ALL_GATE_CLASSES:
                    raise SchemaError(f"unknown gate class {c!r}")
            support[gc] += 1
            slot_n[slot] += 1
            if pc == gc:
                tp[gc] += 1
                slot_ok[slot] += 1
            else:
                fp[pc] += 1
                fn[gc] += 1
                all_ok = False
        joint += all_ok
    prec, rec, f1 = {}, {}, {}
    for c in ALL_GATE_CLASSES:
        if tp[c] + fp[c] + fn[c] == 0:
            prec[c] = rec[c] = f1[c] = 1.0
            continue
        prec[c] = tp[c] / (tp[c] + fp[c]) if tp[c] + fp[c] else 0.0
        rec[c] = tp[c] / (tp[c] + fn[c]) if tp[c] + fn[c] else 0.0
        f1[c] = 2 * tp[c] / (2 * tp[c] + fp[c] + fn[c])
    return GateMetrics(
        joint / len(gold) if gold else float("nan"),
        {s: slot_ok[s] / slot_n[s] for s in sorted(slot_n)},
        prec, rec, f1,
        {c: support[c] for c in ALL_GATE_CLASSES},
    )


# ---------------------------------------------------------------------------
# recall by training frequency


def value_updates(dialog: Dialog) -> list[tuple[int, str, str]]:
    """(turn position, slot, value) wherever the gold value of a slot changes."""
    out = []
    prev: dict[str, str] = {}
    for t, turn in enumerate(dialog.turns):
        state = turn.gold.state if turn.gold else {}
        for slot, v in sorted(state.items()):
            if prev.get(slot) != v:
                out.append((t, slot, v))
        prev = dict(state)
    return out


def train_value_counts(corpus: Corpus, ontology: Ontology, per_slot: bool = False) -> Counter:
    """How often each canonical value is introduced in training dialogs.

    By default a value is counted across slots ("north" as restaurant area and
    as hotel area is one value), since span copying does not depend on the
    slot. ``per_slot`` keys the counts by (slot, value) instead.
    """
    counts: Counter = Counter()
    for d in corpus.dialogs:
        for _, slot, v in value_updates(d):
            cv = ontology.canonical_value(slot, v)
            counts[(slot, cv) if per_slot else cv] += 1
    return counts


def _seen(counts: Mapping, slot: str, value: str) -> int:
    # accepts both key styles of train_value_counts
    return counts.get((slot, value), counts.get(value, 0))


def bucket_of(n: int) -> str:
    for lo, hi, name in BUCKETS:
        if lo <= n <= hi:
            return name
    raise AssertionError(n)


def recall_by_seen_count(
    pred: Mapping[str, Sequence[State]],
    gold: Corpus,
    train_counts: Mapping,
    ontology: Ontology,
    skip_dontcare: bool = True,
) -> dict[str, dict]:
    """Recall of gold value introductions, bucketed by training frequency.

    A value counts as recalled when the predicted state of that turn holds
    it for the slot. Empty buckets carry ``recall: None``.
    """
    hits: Counter = Counter()
    total: Counter = Counter()
    for d in gold.dialogs:
        states = pred[d.dialog_id]
        for t, slot, v in value_updates(d):
            if skip_dontcare and v == DONTCARE or ontology.is_boolean(slot):
                continue
            b = bucket_of(_seen(train_counts, slot, ontology.canonical_value(slot, v)))
            total[b] += 1
            p = states[t].get(slot)
            hits[b] += p is not None and ontology.normalize_match(slot, p, v)
    return {
        name: {"recall": hits[name] / total[name] if total[name] else None, "count": total[name]}
        for _, _, name in BUCKETS
    }


# ---------------------------------------------------------------------------
# OOV substitution


@dataclass
class OOVReport:
    oov_rate: float
    unique_pairs: int
    oov_pairs: int
    per_slot_rate: dict[str, float] = field(default_factory=dict)
    downgraded: int = 0

    def to_json(self) -> dict:
        return {"oov_rate": self.oov_rate, "unique_pairs": self.unique_pairs, "oov_pairs": self.oov_pairs,
                "per_slot_rate": self.per_slot_rate, "downgraded": self.downgraded}


def oov_rate(corpus: Corpus, train_values: Mapping[str, set[str]], ontology: Ontology) -> OOVReport:
    pairs = set()
    for d in corpus.dialogs:
        for t in d.turns:
            for slot, v in (t.gold.state if t.gold else {}).items():
                if v != DONTCARE and not ontology.is_boolean(slot):
                    pairs.add((slot, ontology.canonical_value(slot, v)))
    known = {s: {ontology.canonical_value(s, v) for v in vs} for s, vs in train_values.items() if s in ontology}
    oov = {(s, v) for s, v in pairs if v not in known.get(s, set())}
    per_slot = {}
    for slot in sorted({s for s, _ in pairs}):
        n = sum(1 for s, _ in pairs if s == slot)
        per_slot[slot] = sum(1 for s, _ in oov if s == slot) / n
    return OOVReport(len(oov) / len(pairs) if pairs else 0.0, len(pairs), len(oov), per_slot)


def oov_substitution(
    corpus: Corpus,
    replacement: Mapping[str, str],
    ontology: Ontology,
    train_values: Mapping[str, set[str]],
) -> tuple[Corpus, OOVReport]:
    """Consistently replace values in utterances, informs and gold labels.

    ``replacement`` maps old values to fresh ones. Span labels are
    regenerated and the achieved OOV rate is reported.
    """
    every_train = {canonicalize(v) for vs in train_values.values() for v in vs}
    mapping = {canonicalize(k): canonicalize(v) for k, v in replacement.items() if canonicalize(k) != canonicalize(v)}
    for old, new in mapping.items():
        if new in every_train:
            raise ValueError(f"replacement {old!r} -> {new!r} collides with a training value")
    if mapping:
        pattern = re.compile(
            r"(?<![\w])(" + "|".join(re.escape(k) for k in sorted(mapping, key=len, reverse=True)) + r")(?![\w])",
            re.IGNORECASE,
        )

        def sub_text(s: str) -> str:
            return pattern.sub(lambda m: mapping[m.group(1).lower()], s)
    else:
        def sub_text(s: str) -> str:
            return s

    def sub_value(v: str) -> str:
        return mapping.get(canonicalize(v), v)

    dialogs = []
    changed = False
    for d in corpus.dialogs:
        turns = []
        for t in d.turns:
            gold = None
            if t.gold is not None:
                gold = GoldLabels(dict(t.gold.gate), t.gold.span, dict(t.gold.refer),
                                  {s: sub_value(v) for s, v in t.gold.state.items()})
            nt = DialogTurn(t.turn_index, sub_text(t.user_utterance), sub_text(t.system_utterance),
                            {s: sub_value(v) for s, v in t.system_informs.items()}, gold)
            changed |= nt.user_utterance != t.user_utterance or nt.system_utterance != t.system_utterance
            turns.append(nt)
        dialogs.append(Dialog(d.dialog_id, turns))
    out = Corpus(dialogs, corpus.split, dict(corpus.meta))
    downgraded = 0
    labeled = all(t.gold is not None and t.gold.gate for d in dialogs for t in d.turns)
    if changed and labeled:
        had_spans = any(t.gold.span is not None for d in dialogs for t in d.turns)
        for d in dialogs:
            for t in d.turns:
                t.gold.span = None
        # token positions moved, so spans are recomputed against the new text
        prepared, rep = prepare_corpus(out, ontology, int(corpus.meta.get("max_len", 180)))
        downgraded = len(rep.downgraded)
        if had_spans:
            out = prepared
    report = oov_rate(out, train_values, ontology)
    report.downgraded = downgraded
    return out, report


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    jga: float
    gate_joint_acc: float | None
    gate_f1: dict[str, float] | None
    per_slot_acc: dict[str, float]
    recall_buckets: dict[str, dict] | None = None
    runs: list[dict] = field(default_factory=list)
    mean: dict[str, float] = field(default_factory=dict)
    std: dict[str, float] = field(default_factory=dict)
    gates: GateMetrics | None = None

    def to_json(self) -> dict:
        out = {
            "jga": _r(self.jga),
            "gate_joint_acc": _r(self.gate_joint_acc),
            "gate_f1": {k: _r(v) for k, v in (self.gate_f1 or {}).items()} or None,
            "per_slot_acc": {k: _r(v) for k, v in self.per_slot_acc.items()},
            "recall_buckets": self.recall_buckets and {
                k: {"recall": _r(b["recall"]), "count": b["count"]} for k, b in self.recall_buckets.items()
            },
        }
        if self.gates is not None:
            out["gates"] = _round_tree(self.gates.to_json())
        if self.runs:
            out["runs"] = self.runs
            out["mean"] = {k: _r(v) for k, v in self.mean.items()}
            out["std"] = {k: _r(v) for k, v in self.std.items()}
        return out

    def table(self) -> str:
        lines = [f"{'metric':<28}{'value':>10}"]

        def row(name, v):
            lines.append(f"{name:<28}{'n/a' if v is None else f'{v:.4f}':>10}")

        if self.runs:
            for k in sorted(self.mean):
                lines.append(f"{k:<28}{self.mean[k]:>10.4f} +- {self.std[k]:.4f}")
        else:
            row("jga", self.jga)
            row("gate_joint_acc", self.gate_joint_acc)
            for c, v in (self.gate_f1 or {}).items():
                row(f"gate_f1[{c}]", v)
            for s, v in self.per_slot_acc.items():
                row(f"slot_acc[{s}]", v)
            for b, v in (self.recall_buckets or {}).items():
                row(f"recall[{b}] (n={v['count']})", v["recall"])
        return "\n".join(lines) + "\n"


def _r(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return None
    return round(float(v), 6)


def _round_tree(obj):
    if isinstance(obj, dict):
        return {k: _round_tree(v) for k, v in obj.items()}
    if isinstance(obj, float):
        return _r(obj)
    return obj


def evaluate(
    pred: Mapping[str, Sequence[State]],
    gold: Corpus,
    ontology: Ontology,
    pred_gates: Mapping[str, Sequence[Mapping[str, str]]] | None = None,
    train_counts: Mapping | None = None,
) -> EvalReport:
    missing = [d.dialog_id for d in gold.dialogs if d.dialog_id not in pred]
    if missing:
        raise ValueError(f"no predicted states for dialog {missing[0]!r}")
    p = [pred[d.dialog_id] for d in gold.dialogs]
    g = [[t.gold.state for t in d.turns] for d in gold.dialogs]
    jga = joint_goal_accuracy(p, g, ontology)
    gm = None
    if pred_gates is not None:
        pg = [m for d in gold.dialogs for m in pred_gates[d.dialog_id]]
        gg = [t.gold.gate for d in gold.dialogs for t in d.turns]
        gm = gate_metrics(pg, gg)
    buckets = recall_by_seen_count(pred, gold, train_counts, ontology) if train_counts is not None else None
    return EvalReport(
        jga,
        gm.joint_acc if gm else None,
        gm.f1 if gm else None,
        per_slot_accuracy(p, g, ontology),
        buckets,
        gates=gm,
    )


def aggregate(reports: Mapping[str, EvalReport]) -> EvalReport:
    """Mean and standard deviation of headline metrics over seeds."""
    keys = ["jga", "gate_joint_acc"]
    runs = []
    for seed, r in reports.items():
        runs.append({"seed": seed, "jga": _r(r.jga), "gate_joint_acc": _r(r.gate_joint_acc)})
    mean, std = {}, {}
    for k in keys:
        vals = [getattr(r, k) for r in reports.values() if getattr(r, k) is not None]
        if vals:
            mean[k] = float(np.mean(vals))
            std[k] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    first = next(iter(reports.values()))
    per_slot = {s: float(np.mean([r.per_slot_acc[s] for r in reports.values()])) for s in first.per_slot_acc}
    return EvalReport(mean["jga"], mean.get("gate_joint_acc"), None, per_slot, None, runs, mean, std)
