"""Gold-driven prediction provider and brute-force metric oracles."""

from __future__ import annotations

from typing import Sequence

from .corpus import DEFAULT_MAX_LEN, Corpus, Dialog, DialogTurn, EncoderInput, build_input, label_dialog
from .ontology import BOOL_GATE_CLASSES, GATE_CLASSES, Ontology
from .predictions import PredictionBundle, one_hot
from .tracker import DialogState, track_dialog


def oracle_predictions(turn: DialogTurn, inp: EncoderInput, ontology: Ontology) -> PredictionBundle:
    """One-hot distributions that reproduce the turn's gold labels."""
    gold = turn.gold
    if gold is None or not gold.gate:
        raise ValueError(f"turn {turn.turn_index} has no gold gate labels")
    n = len(ontology)
    spans = gold.span or {}
    b = PredictionBundle()
    for slot in ontology.slot_ids:
        g = gold.gate.get(slot, "none")
        if ontology.is_boolean(slot):
            b.gate[slot] = one_hot(BOOL_GATE_CLASSES.index(g), 4)
            continue
        b.gate[slot] = one_hot(GATE_CLASSES.index(g), 5)
        s, e = spans.get(slot, (0, 0))
        if g == "span" and slot not in spans:
            raise ValueError(f"turn {turn.turn_index}: slot {slot!r} is span-gated but has no span label")
        b.start[slot] = one_hot(s, len(inp))
        b.end[slot] = one_hot(e, len(inp))
        src = gold.refer.get(slot)
        b.refer[slot] = one_hot(n if src is None else ontology.index(src), n + 1)
    return b


class OracleSource:
    """Head source for ``track_dialog`` replaying gold labels.

    Span labels missing from the corpus are generated on the fly with the
    same input settings the corpus was prepared with.
    """

    def __init__(self, ontology: Ontology, max_len: int = DEFAULT_MAX_LEN):
        self.ontology = ontology
        self.max_len = max_len
        self._cache: dict[str, Dialog] = {}

    def _labeled(self, dialog: Dialog) -> Dialog:
        if all(t.gold is not None and t.gold.span is not None and t.gold.gate for t in dialog.turns):
            return dialog
        if dialog.dialog_id not in self._cache:
            labels, _, _ = label_dialog(dialog, self.ontology, None, self.max_len)
            turns = [DialogTurn(t.turn_index, t.user_utterance, t.system_utterance, t.system_informs, g)
                     for t, g in zip(dialog.turns, labels)]
            self._cache[dialog.dialog_id] = Dialog(dialog.dialog_id, turns)
        return self._cache[dialog.dialog_id]

    def __call__(self, dialog: Dialog, t: int, state: DialogState):
        dialog = self._labeled(dialog)
        turn = dialog.turns[t]
        inp = build_input(turn, dialog.history(t), self.max_len)
        return oracle_predictions(turn, inp, self.ontology), inp


def oracle_track(corpus: Corpus, ontology: Ontology) -> dict[str, list[DialogState]]:
    source = OracleSource(ontology, int(corpus.meta.get("max_len", DEFAULT_MAX_LEN)))
    return {d.dialog_id: track_dialog(d, source, ontology) for d in corpus.dialogs}


def brute_force_jga(
    predicted: Sequence[Sequence[dict]],
    gold: Sequence[Sequence[dict]],
    ontology_json: dict,
) -> float:
    """Independent JGA: expand every gold value into its accepted surfaces.

    Works from the raw ontology JSON so it shares no lookup code with the
    metric it checks.
    """
    slots = [s["id"] for s in ontology_json["slots"]]
    variants = ontology_json.get("variants", {})

    def norm(x):
        return " ".join(x.lower().split())

    def accepted(slot, value):
        v = norm(value)
        out = {v}
        for canon, surfaces in variants.get(slot, {}).items():
            group = {norm(canon)} | {norm(s) for s in surfaces}
            if v in group:
                out |= group
        return out

    total = correct = 0
    for pd, gd in zip(predicted, gold, strict=True):
        for ps, gs in zip(pd, gd, strict=True):
            total += 1
            ok = True
            for slot in slots:
                if slot not in gs:
                    ok = slot not in ps
                elif slot not in ps:
                    ok = False
                else:
                    ok = ps[slot] == gs[slot] or norm(ps[slot]) in accepted(slot, gs[slot])
                if not ok:
                    break
            correct += ok
    return correct / total if total else float("nan")


def brute_force_f1(pairs: Sequence[tuple[str, str]], cls: str) -> float:
    """F1 of one class from (predicted, gold) label pairs by direct counting."""
    tp = sum(1 for p, g in pairs if p == cls and g == cls)
    fp = sum(1 for p, g in pairs if p == cls and g != cls)
    fn = sum(1 for p, g in pairs if p != cls and g == cls)
    if tp + fp + fn == 0:
        return 1.0
    return 2 * tp / (2 * tp + fp + fn)


