"""Rule-based dialog state update driven by slot gates and the three copy mechanisms."""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .corpus import USER_ROLES, Dialog, DialogTurn, EncoderInput
from .ontology import DONTCARE, Ontology, SchemaError
from .predictions import PredictionBundle


class DialogState(Mapping[str, str]):
    """Immutable slot -> value assignment; never stores the value none."""

    __slots__ = ("_d",)

    def __init__(self, assignments: Mapping[str, str] | None = None):
        d = {k: v for k, v in (assignments or {}).items() if v is not None and v != "none"}
        self._d = MappingProxyType(d)

    def __getitem__(self, k):
        return self._d[k]

    def __iter__(self) -> Iterator[str]:
        return iter(self._d)

    def __len__(self):
        return len(self._d)

    def __repr__(self):
        return f"DialogState({dict(self._d)!r})"

    @property
    def assignments(self) -> dict[str, str]:
        return dict(self._d)

    def updated(self, changes: Mapping[str, str]) -> "DialogState":
        if not changes:
            return self
        return DialogState({**self._d, **changes})


@dataclass(frozen=True)
class InformMemory:
    """Values the system informed in the current turn only."""

    last_informed: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_turn(cls, turn: DialogTurn) -> "InformMemory":
        return cls(dict(turn.system_informs))


@dataclass(frozen=True)
class AuxFeatures:
    inform_vec: np.ndarray
    ds_vec: np.ndarray


def aux_features(inform_mem: InformMemory, ds: Mapping[str, str], ontology: Ontology) -> AuxFeatures:
    n = len(ontology)
    inform = np.zeros(n)
    filled = np.zeros(n)
    for slot in inform_mem.last_informed:
        inform[ontology.index(slot)] = 1.0
    for slot in ds:
        filled[ontology.index(slot)] = 1.0
    return AuxFeatures(inform, filled)


def resolve_span(start_dist, end_dist, inp: EncoderInput) -> str:
    """Decode argmax start/end into text; an inverted span decodes to ''.

    Positions outside user utterances are zeroed before the argmax.
    """
    start_dist = np.asarray(start_dist, dtype=float)
    end_dist = np.asarray(end_dist, dtype=float)
    if len(start_dist) != len(inp) or len(end_dist) != len(inp):
        raise ValueError(
            f"span distributions have lengths {len(start_dist)}/{len(end_dist)}, input has {len(inp)} tokens"
        )
    allowed = np.array([r in USER_ROLES for r in inp.segment_roles])
    if not allowed.any():
        return ""
    start = int(np.argmax(np.where(allowed, start_dist, -1.0)))
    end = int(np.argmax(np.where(allowed, end_dist, -1.0)))
    if end < start:
        return ""
    return inp.decode(start, end)


def apply_turn(
    ds: DialogState,
    turn: DialogTurn,
    preds: PredictionBundle,
    inp: EncoderInput,
    ontology: Ontology,
) -> DialogState:
    """Return the state after ``turn``. Refer copies read the pre-turn state."""
    memory = InformMemory.from_turn(turn)
    changes: dict[str, str] = {}
    for slot in ontology.slot_ids:
        if slot not in preds.gate:
            raise SchemaError(f"prediction bundle lacks slot {slot!r}")
        boolean = ontology.is_boolean(slot)
        if boolean and slot in preds.refer:
            raise SchemaError(f"refer prediction for boolean slot {slot!r}")
        label = preds.gate_label(slot, ontology)
        if label == "none":
            continue
        if label == "dontcare":
            changes[slot] = DONTCARE
        elif label in ("true", "false"):
            changes[slot] = label
        elif label == "span":
            value = resolve_span(preds.start[slot], preds.end[slot], inp)
            if value:
                changes[slot] = value
        elif label == "inform":
            if slot in memory.last_informed:
                changes[slot] = memory.last_informed[slot]
        elif label == "refer":
            src = preds.refer_source(slot, ontology)
            if src is not None and src in ds:
                changes[slot] = ds[src]
    return ds.updated(changes)


HeadSource = Callable[[Dialog, int, DialogState], "tuple[PredictionBundle, EncoderInput]"]


def track_dialog(dialog: Dialog, head_source: HeadSource, ontology: Ontology) -> list[DialogState]:
    """Fold ``apply_turn`` over the dialog from the empty state.

    ``head_source(dialog, t, state)`` returns the bundle and encoder input for
    0-based turn ``t`` given the state before it.
    """
    states: list[DialogState] = []
    ds = DialogState()
    for t, turn in enumerate(dialog.turns):
        preds, inp = head_source(dialog, t, ds)
        ds = apply_turn(ds, turn, preds, inp, ontology)
        states.append(ds)
    return states


def states_to_records(dialog_id: str, states: Sequence[DialogState]) -> list[dict]:
    return [
        {"dialog_id": dialog_id, "turn": t, "state": dict(sorted(s.items()))}
        for t, s in enumerate(states, start=1)
    ]
