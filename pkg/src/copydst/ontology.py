"""Slot schema, gate vocabularies and value normalization."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

DONTCARE = "dontcare"

_WS = re.compile(r"\s+")


class SchemaError(ValueError):
    """Raised when data refers to slots or classes the ontology does not know."""


class GateClass(str, Enum):
    NONE = "none"
    DONTCARE = "dontcare"
    SPAN = "span"
    INFORM = "inform"
    REFER = "refer"


class BoolGateClass(str, Enum):
    NONE = "none"
    DONTCARE = "dontcare"
    TRUE = "true"
    FALSE = "false"


GATE_CLASSES: tuple[str, ...] = tuple(c.value for c in GateClass)
BOOL_GATE_CLASSES: tuple[str, ...] = tuple(c.value for c in BoolGateClass)
ALL_GATE_CLASSES: tuple[str, ...] = GATE_CLASSES + ("true", "false")


def canonicalize(value: str) -> str:
    """Lowercase, trim and collapse internal whitespace."""
    return _WS.sub(" ", value.strip().lower())


@dataclass(frozen=True)
class SlotDef:
    slot_id: str
    is_boolean: bool = False

    @property
    def domain(self) -> str:
        return self.slot_id.split("-", 1)[0]

    @property
    def name(self) -> str:
        return self.slot_id.split("-", 1)[-1]

    def gate_classes(self) -> tuple[str, ...]:
        return BOOL_GATE_CLASSES if self.is_boolean else GATE_CLASSES


@dataclass(frozen=True)
class Ontology:
    """Ordered domain-slot pairs plus the label-variant equivalence map.

    ``variant_map[slot][canonical]`` is the set of accepted surface strings
    for that canonical value; the canonical value is always a member.
    """

    slots: tuple[SlotDef, ...]
    variant_map: Mapping[str, Mapping[str, frozenset[str]]] = field(default_factory=dict)
    _index: Mapping[str, int] = field(init=False, repr=False, compare=False)
    _reverse: Mapping[str, Mapping[str, str]] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index: dict[str, int] = {}
        for i, s in enumerate(self.slots):
            if s.slot_id in index:
                raise SchemaError(f"duplicate slot id {s.slot_id!r}")
            index[s.slot_id] = i
        variants: dict[str, dict[str, frozenset[str]]] = {}
        reverse: dict[str, dict[str, str]] = {}
        for slot, classes in self.variant_map.items():
            if slot not in index:
                raise SchemaError(f"variant map names unknown slot {slot!r}")
            variants[slot] = {}
            reverse[slot] = {}
            for canonical, surfaces in classes.items():
                canon = canonicalize(canonical)
                members = frozenset({canon} | {canonicalize(s) for s in surfaces})
                for m in members:
                    if reverse[slot].get(m, canon) != canon:
                        raise SchemaError(
                            f"surface {m!r} of slot {slot!r} belongs to two variant classes"
                        )
                    reverse[slot][m] = canon
                variants[slot][canon] = members
        object.__setattr__(self, "variant_map", variants)
        object.__setattr__(self, "_index", index)
        object.__setattr__(self, "_reverse", reverse)

    @classmethod
    def from_slots(cls, slot_ids: Iterable[str], boolean: Iterable[str] = (), variants=None):
        boolean = set(boolean)
        return cls(tuple(SlotDef(s, s in boolean) for s in slot_ids), variants or {})

    @property
    def slot_ids(self) -> list[str]:
        return [s.slot_id for s in self.slots]

    def __len__(self) -> int:
        return len(self.slots)

    def __contains__(self, slot_id: str) -> bool:
        return slot_id in self._index

    def index(self, slot_id: str) -> int:
        try:
            return self._index[slot_id]
        except KeyError:
            raise SchemaError(f"unknown slot id {slot_id!r}") from None

    def slot(self, slot_id: str) -> SlotDef:
        return self.slots[self.index(slot_id)]

    def is_boolean(self, slot_id: str) -> bool:
        return self.slot(slot_id).is_boolean

    def canonical_value(self, slot_id: str, value: str) -> str:
        self.index(slot_id)
        v = canonicalize(value)
        return self._reverse.get(slot_id, {}).get(v, v)

    def variants(self, slot_id: str, value: str) -> frozenset[str]:
        """All accepted surfaces for ``value``, including the value itself."""
        canon = self.canonical_value(slot_id, value)
        members = self.variant_map.get(slot_id, {}).get(canon)
        if members is None:
            return frozenset({canon, canonicalize(value)})
        return members | {canonicalize(value)}

    def normalize_match(self, slot_id: str, predicted: str, gold: str) -> bool:
        self.index(slot_id)
        if predicted == gold:
            return True
        return self.canonical_value(slot_id, predicted) == self.canonical_value(slot_id, gold)

    def to_json(self) -> dict:
        return {
            "slots": [{"id": s.slot_id, "boolean": s.is_boolean} for s in self.slots],
            "variants": {
                slot: {canon: sorted(m - {canon}) for canon, m in sorted(cl.items())}
                for slot, cl in sorted(self.variant_map.items())
            },
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "Ontology":
        try:
            slots = tuple(SlotDef(s["id"], bool(s.get("boolean", False))) for s in obj["slots"])
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed ontology: {e}") from None
        return cls(slots, obj.get("variants", {}))


def load_ontology(path: str | Path) -> Ontology:
    with open(path) as f:
        return Ontology.from_json(json.load(f))


def default_ontology() -> Ontology:
    """The multi-domain ontology shipped for the synthetic corpus."""
    return load_ontology(Path(__file__).parent / "data" / "ontology.json")
