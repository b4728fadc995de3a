"""Dialog records, encoder input assembly, partial masking and span labels."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ontology import (
    BOOL_GATE_CLASSES,
    DONTCARE,
    GATE_CLASSES,
    Ontology,
    SchemaError,
    canonicalize,
)
from .tokenizer import CLS, SEP, UNK, Piece, Tokenizer, join_pieces

SPECIAL = "special"
USER = "user"
SYSTEM = "system"
HIST_USER = "history-user"
HIST_SYSTEM = "history-system"
ROLES = (SPECIAL, USER, SYSTEM, HIST_USER, HIST_SYSTEM)
USER_ROLES = frozenset({USER, HIST_USER})

DEFAULT_MAX_LEN = 180
BASIC_TOKENIZER = Tokenizer()


class CorpusError(ValueError):
    """Validation failure; the message names dialog, turn and field."""


@dataclass
class GoldLabels:
    gate: dict[str, str] = field(default_factory=dict)
    span: dict[str, tuple[int, int]] | None = None
    refer: dict[str, str] = field(default_factory=dict)
    state: dict[str, str] = field(default_factory=dict)


@dataclass
class DialogTurn:
    turn_index: int
    user_utterance: str
    system_utterance: str = ""
    system_informs: dict[str, str] = field(default_factory=dict)
    gold: GoldLabels | None = None


@dataclass
class Dialog:
    dialog_id: str
    turns: list[DialogTurn]

    def history(self, t: int) -> list[DialogTurn]:
        """Turns before position ``t`` (0-based), most recent first."""
        return self.turns[:t][::-1]


@dataclass
class Corpus:
    dialogs: list[Dialog]
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.dialogs)

    def __len__(self):
        return len(self.dialogs)

    @property
    def n_turns(self) -> int:
        return sum(len(d.turns) for d in self.dialogs)


@dataclass(frozen=True)
class Segment:
    role: str
    turn_offset: int  # 0 = current turn, k = k turns back
    start: int
    end: int  # exclusive


@dataclass
class EncoderInput:
    """``[CLS] U_t [SEP] M_t [SEP] H_t [SEP]`` with per-token bookkeeping."""

    tokens: list[str]
    segment_roles: list[str]
    surfaces: list[str]
    joined: list[bool]
    segments: list[Segment]
    max_len: int

    def __len__(self):
        return len(self.tokens)

    def user_segments(self) -> list[Segment]:
        """User segments in span search order: current turn, then newest history."""
        segs = [s for s in self.segments if s.role in USER_ROLES]
        return sorted(segs, key=lambda s: s.turn_offset)

    def decode(self, start: int, end: int) -> str:
        return join_pieces(self.surfaces[start : end + 1], [False] + self.joined[start + 1 : end + 1])


# ---------------------------------------------------------------------------
# masking and input assembly


def _mask_pieces(pieces: list[Piece], values: Iterable[str], tokenizer: Tokenizer) -> list[int]:
    """Indices of pieces covered by an occurrence of any value."""
    hit: set[int] = set()
    surf = [p.surface for p in pieces]
    for v in values:
        vt = [p.surface for p in tokenizer.tokenize_aligned(canonicalize(v))]
        n = len(vt)
        if not n:
            continue
        for i in range(len(surf) - n + 1):
            if surf[i : i + n] == vt:
                hit.update(range(i, i + n))
    return sorted(hit)


def mask_values(system_utterance: str, informed_values: Sequence[str], tokenizer: Tokenizer | None = None) -> str:
    """Replace every token of every informed value with ``[UNK]``.

    The token count of the result equals that of the input.
    """
    tokenizer = tokenizer or BASIC_TOKENIZER
    pieces = tokenizer.tokenize_aligned(system_utterance)
    hits = _mask_pieces(pieces, informed_values, tokenizer)
    if not hits:
        return system_utterance
    out = []
    pos = 0
    for i in hits:
        p = pieces[i]
        out.append(system_utterance[pos : p.start])
        out.append(UNK)
        pos = p.end
    out.append(system_utterance[pos:])
    return "".join(out)


def build_input(
    turn: DialogTurn,
    history: Sequence[DialogTurn],
    max_len: int = DEFAULT_MAX_LEN,
    mask_history: bool = False,
    tokenizer: Tokenizer | None = None,
    use_history: bool = True,
) -> EncoderInput:
    """Assemble the encoder input for ``turn``; ``history`` is most-recent-first.

    Whole history turns are kept newest first while they fit; only the newest
    turn is ever cut token-wise, from its far end. The current turn and the
    four special tokens are always kept.
    """
    tokenizer = tokenizer or BASIC_TOKENIZER
    user = tokenizer.tokenize_aligned(turn.user_utterance)
    system = tokenizer.tokenize_aligned(turn.system_utterance)
    frame = len(user) + len(system) + 4
    if frame > max_len:
        raise ValueError(
            f"max_len={max_len} is smaller than the current turn frame ({frame} tokens) "
            f"at turn {turn.turn_index}"
        )

    tokens: list[str] = []
    roles: list[str] = []
    surfaces: list[str] = []
    joined: list[bool] = []
    segments: list[Segment] = []

    def special(tok):
        tokens.append(tok)
        roles.append(SPECIAL)
        surfaces.append(tok)
        joined.append(False)

    def add(pieces, role, offset):
        if not pieces:
            return
        start = len(tokens)
        for k, p in enumerate(pieces):
            tokens.append(p.token)
            roles.append(role)
            surfaces.append(p.surface)
            joined.append(p.joined and k > 0)
        segments.append(Segment(role, offset, start, len(tokens)))

    special(CLS)
    add(user, USER, 0)
    special(SEP)
    add(system, SYSTEM, 0)
    special(SEP)
    budget = max_len - frame
    if use_history:
        for k, h in enumerate(history, start=1):
            sys_text = h.system_utterance
            if mask_history and h.system_informs:
                sys_text = mask_values(sys_text, list(h.system_informs.values()), tokenizer)
            hu = tokenizer.tokenize_aligned(h.user_utterance)
            hs = tokenizer.tokenize_aligned(sys_text)
            if len(hu) + len(hs) > budget:
                if k == 1:
                    # even the newest turn is too long: keep what fits of it
                    hs = hs[: max(0, budget - len(hu))]
                    hu = hu[:budget]
                    add(hu, HIST_USER, k)
                    add(hs, HIST_SYSTEM, k)
                break
            add(hu, HIST_USER, k)
            add(hs, HIST_SYSTEM, k)
            budget -= len(hu) + len(hs)
    special(SEP)
    return EncoderInput(tokens, roles, surfaces, joined, segments, max_len)


# ---------------------------------------------------------------------------
# span labels


def _value_token_forms(value: str, slot: str, ontology: Ontology, tokenizer: Tokenizer) -> list[list[str]]:
    forms = []
    for v in sorted(ontology.variants(slot, value)):
        toks = [p.surface for p in tokenizer.tokenize_aligned(v)]
        if toks and toks not in forms:
            forms.append(toks)
    # longer surfaces first so "city centre" beats "centre" at the same start
    forms.sort(key=lambda f: -len(f))
    return forms


def find_value_span(
    inp: EncoderInput,
    value: str,
    slot: str,
    ontology: Ontology,
    tokenizer: Tokenizer | None = None,
    current_only: bool = False,
) -> tuple[int, int] | None:
    """First occurrence of any variant of ``value`` in the user segments.

    The current user utterance is searched left to right, then history user
    utterances from newest to oldest.
    """
    tokenizer = tokenizer or BASIC_TOKENIZER
    forms = _value_token_forms(value, slot, ontology, tokenizer)
    for seg in inp.user_segments():
        if current_only and seg.turn_offset:
            break
        surf = inp.surfaces[seg.start : seg.end]
        for i in range(len(surf)):
            for f in forms:
                if surf[i : i + len(f)] == f:
                    return seg.start + i, seg.start + i + len(f) - 1
    return None


def generate_span_labels(
    turn: DialogTurn,
    history: Sequence[DialogTurn],
    gold_value: str,
    slot: str,
    ontology: Ontology,
    inp: EncoderInput | None = None,
    tokenizer: Tokenizer | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> tuple[int, int] | None:
    """Span label for a span-gated slot in assembled-input coordinates."""
    if turn.gold is None or turn.gold.gate.get(slot) != "span":
        raise ValueError(f"slot {slot!r} is not span-labeled at turn {turn.turn_index}")
    if inp is None:
        inp = build_input(turn, history, max_len, tokenizer=tokenizer)
    return find_value_span(inp, gold_value, slot, ontology, tokenizer)


@dataclass
class LabelReport:
    downgraded: list[tuple[str, int, str, str]] = field(default_factory=list)
    gate_counts: Counter = field(default_factory=Counter)

    def merge(self, other: "LabelReport") -> None:
        self.downgraded.extend(other.downgraded)
        self.gate_counts.update(other.gate_counts)

    def to_json(self) -> dict:
        return {
            "downgraded": [
                {"dialog_id": d, "turn": t, "slot": s, "value": v} for d, t, s, v in self.downgraded
            ],
            "gate_counts": dict(sorted(self.gate_counts.items())),
        }


def _holds(ontology: Ontology, slot: str, state: Mapping[str, str], value: str) -> bool:
    return slot in state and ontology.normalize_match(slot, state[slot], value)


def derive_gates(
    dialog: Dialog,
    ontology: Ontology,
    tokenizer: Tokenizer | None = None,
    max_len: int = DEFAULT_MAX_LEN,
) -> list[tuple[dict[str, str], dict[str, str]]]:
    """Gate and refer labels reconstructed from cumulative gold states.

    For each slot whose value changed: dontcare and booleans map directly;
    otherwise a mention in the current user turn gives span, a matching
    system inform gives inform, another slot already holding the value gives
    refer, a mention in the user history gives span, and anything else none.
    """
    out = []
    prev: dict[str, str] = {}
    for t, turn in enumerate(dialog.turns):
        state = turn.gold.state if turn.gold else {}
        inp = build_input(turn, dialog.history(t), max_len, tokenizer=tokenizer)
        gate = {s: "none" for s in ontology.slot_ids}
        refer: dict[str, str] = {}
        for slot in ontology.slot_ids:
            if slot not in state or _holds(ontology, slot, prev, state[slot]):
                continue
            v = state[slot]
            if ontology.is_boolean(slot):
                gate[slot] = canonicalize(v)
            elif canonicalize(v) == DONTCARE:
                gate[slot] = "dontcare"
            elif find_value_span(inp, v, slot, ontology, tokenizer, current_only=True):
                gate[slot] = "span"
            elif slot in turn.system_informs and ontology.normalize_match(slot, turn.system_informs[slot], v):
                gate[slot] = "inform"
            else:
                src = next(
                    (s for s in ontology.slot_ids if s != slot and s in prev and ontology.normalize_match(slot, prev[s], v)),
                    None,
                )
                if src is not None:
                    gate[slot] = "refer"
                    refer[slot] = src
                elif find_value_span(inp, v, slot, ontology, tokenizer):
                    gate[slot] = "span"
        out.append((gate, refer))
        prev = dict(state)
    return out


def label_dialog(
    dialog: Dialog,
    ontology: Ontology,
    tokenizer: Tokenizer | None = None,
    max_len: int = DEFAULT_MAX_LEN,
    use_history: bool = True,
    single_copy: bool = False,
    mask_history: bool = False,
) -> tuple[list[GoldLabels], list[EncoderInput], LabelReport]:
    """Fill span labels (deriving gates first when absent) for one dialog.

    With ``single_copy`` inform and refer labels collapse to span when the
    value occurs in a user utterance and to none otherwise.
    """
    report = LabelReport()
    derived = None
    if any(t.gold is not None and not t.gold.gate for t in dialog.turns):
        derived = derive_gates(dialog, ontology, tokenizer, max_len)
    labels: list[GoldLabels] = []
    inputs: list[EncoderInput] = []
    for t, turn in enumerate(dialog.turns):
        if turn.gold is None:
            raise CorpusError(f"dialog {dialog.dialog_id!r} turn {turn.turn_index}: gold labels missing")
        gate = dict(derived[t][0]) if derived else dict(turn.gold.gate)
        refer = dict(derived[t][1]) if derived else dict(turn.gold.refer)
        inp = build_input(turn, dialog.history(t), max_len, mask_history, tokenizer, use_history)
        spans: dict[str, tuple[int, int]] = {}
        for slot in ontology.slot_ids:
            g = gate.setdefault(slot, "none")
            if single_copy and g in ("inform", "refer"):
                g = gate[slot] = "span"
                refer.pop(slot, None)
            if g != "span":
                continue
            value = turn.gold.state.get(slot)
            span = None if value is None else find_value_span(inp, value, slot, ontology, tokenizer)
            if span is None:
                gate[slot] = "none"
                if not single_copy:
                    report.downgraded.append((dialog.dialog_id, turn.turn_index, slot, value or ""))
            else:
                spans[slot] = span
        report.gate_counts.update(gate.values())
        labels.append(GoldLabels(gate, spans, refer, dict(turn.gold.state)))
        inputs.append(inp)
    return labels, inputs, report


def prepare_corpus(
    corpus: Corpus,
    ontology: Ontology,
    max_len: int = DEFAULT_MAX_LEN,
    single_copy: bool = False,
) -> tuple[Corpus, LabelReport]:
    """Corpus with gold gates and span labels filled under the basic tokenizer."""
    report = LabelReport()
    dialogs = []
    for d in corpus.dialogs:
        labels, _, r = label_dialog(d, ontology, None, max_len, single_copy=single_copy)
        report.merge(r)
        dialogs.append(Dialog(d.dialog_id, [replace(t, gold=g) for t, g in zip(d.turns, labels)]))
    meta = dict(corpus.meta, max_len=max_len, prepared=True)
    return Corpus(dialogs, corpus.split, meta), report


# ---------------------------------------------------------------------------
# JSON I/O


def _where(did, t, fld):
    return f"dialog {did!r} turn {t} field {fld!r}"


def _check_slot(ontology, slot, did, t, fld):
    if slot not in ontology:
        raise CorpusError(f"{_where(did, t, fld)}: unknown slot {slot!r}")


def _gold_from_json(obj, ontology: Ontology, did, t) -> GoldLabels:
    if not isinstance(obj, dict):
        raise CorpusError(f"{_where(did, t, 'gold')}: expected an object")
    for fld in ("gate", "span", "refer", "state"):
        for slot in obj.get(fld) or {}:
            _check_slot(ontology, slot, did, t, f"gold.{fld}")
    gate = {}
    if obj.get("gate") is not None:
        for slot in ontology.slot_ids:
            g = obj["gate"].get(slot, "none")
            allowed = BOOL_GATE_CLASSES if ontology.is_boolean(slot) else GATE_CLASSES
            if g not in allowed:
                raise CorpusError(f"{_where(did, t, 'gold.gate')}: class {g!r} invalid for slot {slot!r}")
            gate[slot] = g
    span = None
    if obj.get("span") is not None:
        span = {}
        for slot, se in obj["span"].items():
            if not (isinstance(se, (list, tuple)) and len(se) == 2 and all(isinstance(x, int) for x in se)):
                raise CorpusError(f"{_where(did, t, 'gold.span')}: malformed span for {slot!r}")
            span[slot] = (se[0], se[1])
    refer = dict(obj.get("refer") or {})
    for slot, src in refer.items():
        _check_slot(ontology, src, did, t, "gold.refer")
    if gate:
        for slot in ontology.slot_ids:
            if (gate[slot] == "refer") != (slot in refer):
                raise CorpusError(f"{_where(did, t, 'gold.refer')}: refer entry mismatch for {slot!r}")
            if span is not None and (gate[slot] == "span") != (slot in span):
                raise CorpusError(f"{_where(did, t, 'gold.span')}: span entry mismatch for {slot!r}")
    state = {k: str(v) for k, v in (obj.get("state") or {}).items()}
    return GoldLabels(gate, span, refer, state)


def corpus_from_json(obj, ontology: Ontology) -> Corpus:
    if not isinstance(obj, dict) or not isinstance(obj.get("dialogs"), list):
        raise CorpusError("corpus must be an object with a 'dialogs' list")
    split = obj.get("split", "train")
    meta = dict(obj.get("meta") or {})
    seen: set[str] = set()
    dialogs = []
    for dobj in obj["dialogs"]:
        did = dobj.get("id")
        if not isinstance(did, str):
            raise CorpusError(f"dialog without string id in split {split!r}")
        if did in seen:
            raise CorpusError(f"duplicate dialog id {did!r} in split {split!r}")
        seen.add(did)
        turns = []
        for t, tobj in enumerate(dobj.get("turns", []), start=1):
            if not isinstance(tobj.get("usr", ""), str) or not isinstance(tobj.get("sys", ""), str):
                raise CorpusError(f"{_where(did, t, 'usr/sys')}: utterances must be strings")
            informs = dict(tobj.get("informs") or {})
            for slot in informs:
                _check_slot(ontology, slot, did, t, "informs")
            gold = _gold_from_json(tobj["gold"], ontology, did, t) if tobj.get("gold") is not None else None
            turns.append(DialogTurn(t, tobj.get("usr", ""), tobj.get("sys", ""), informs, gold))
        dialogs.append(Dialog(did, turns))
    corpus = Corpus(dialogs, split, meta)
    _check_span_bounds(corpus)
    return corpus


def _check_span_bounds(corpus: Corpus) -> None:
    max_len = int(corpus.meta.get("max_len", DEFAULT_MAX_LEN))
    for d in corpus.dialogs:
        for t, turn in enumerate(d.turns):
            if turn.gold is None or not turn.gold.span:
                continue
            inp = build_input(turn, d.history(t), max_len)
            for slot, (s, e) in turn.gold.span.items():
                if not (0 <= s <= e < len(inp)) or inp.segment_roles[s] not in USER_ROLES or inp.segment_roles[e] not in USER_ROLES:
                    raise CorpusError(f"{_where(d.dialog_id, turn.turn_index, 'gold.span')}: span {s, e} for {slot!r} out of bounds")


def _gold_to_json(g: GoldLabels) -> dict:
    out: dict = {}
    if g.gate:
        out["gate"] = {s: c for s, c in g.gate.items() if c != "none"}
    if g.span is not None:
        out["span"] = {s: [a, b] for s, (a, b) in g.span.items()}
    if g.refer:
        out["refer"] = dict(g.refer)
    out["state"] = dict(g.state)
    return out


def corpus_to_json(corpus: Corpus) -> dict:
    obj: dict = {"split": corpus.split}
    if corpus.meta:
        obj["meta"] = corpus.meta
    obj["dialogs"] = [
        {
            "id": d.dialog_id,
            "turns": [
                {
                    "sys": t.system_utterance,
                    "usr": t.user_utterance,
                    "informs": dict(t.system_informs),
                    **({"gold": _gold_to_json(t.gold)} if t.gold is not None else {}),
                }
                for t in d.turns
            ],
        }
        for d in corpus.dialogs
    ]
    return obj


def load_corpus(path: str | Path, ontology: Ontology) -> Corpus:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise CorpusError(f"{path}: malformed JSON ({e})") from None
    return corpus_from_json(obj, ontology)


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(corpus_to_json(corpus), f, indent=1)
        f.write("\n")


__all__ = [
    "CorpusError",
    "SchemaError",
    "GoldLabels",
    "DialogTurn",
    "Dialog",
    "Corpus",
    "EncoderInput",
    "Segment",
    "build_input",
    "mask_values",
    "find_value_span",
    "generate_span_labels",
    "derive_gates",
    "label_dialog",
    "prepare_corpus",
    "load_corpus",
    "save_corpus",
]
