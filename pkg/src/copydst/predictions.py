"""Per-turn prediction bundles and their JSON-lines record form."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .ontology import BOOL_GATE_CLASSES, GATE_CLASSES, Ontology, SchemaError


@dataclass
class PredictionBundle:
    """Distributions for one turn, keyed by slot id.

    ``refer[slot]`` has N+1 entries: one per ontology slot, then "none".
    Boolean slots only carry a 4-class gate distribution.
    """

    gate: dict[str, np.ndarray] = field(default_factory=dict)
    start: dict[str, np.ndarray] = field(default_factory=dict)
    end: dict[str, np.ndarray] = field(default_factory=dict)
    refer: dict[str, np.ndarray] = field(default_factory=dict)

    def gate_label(self, slot: str, ontology: Ontology) -> str:
        classes = BOOL_GATE_CLASSES if ontology.is_boolean(slot) else GATE_CLASSES
        dist = self.gate[slot]
        if len(dist) != len(classes):
            raise SchemaError(f"gate distribution for {slot!r} has {len(dist)} classes, expected {len(classes)}")
        return classes[int(np.argmax(dist))]

    def refer_source(self, slot: str, ontology: Ontology) -> str | None:
        dist = self.refer.get(slot)
        if dist is None:
            return None
        i = int(np.argmax(dist))
        return None if i == len(ontology) else ontology.slot_ids[i]

    def to_record(self, ontology: Ontology) -> dict:
        slots = {}
        for slot in ontology.slot_ids:
            rec = {"gate": self.gate_label(slot, ontology)}
            if not ontology.is_boolean(slot):
                rec["start"] = int(np.argmax(self.start[slot]))
                rec["end"] = int(np.argmax(self.end[slot]))
                rec["refer"] = self.refer_source(slot, ontology)
            slots[slot] = rec
        return slots

    @classmethod
    def from_record(cls, slots: dict, ontology: Ontology, seq_len: int) -> "PredictionBundle":
        b = cls()
        n = len(ontology)
        for slot in ontology.slot_ids:
            rec = slots.get(slot, {"gate": "none"})
            boolean = ontology.is_boolean(slot)
            classes = BOOL_GATE_CLASSES if boolean else GATE_CLASSES
            if rec["gate"] not in classes:
                raise SchemaError(f"gate {rec['gate']!r} is not valid for slot {slot!r}")
            b.gate[slot] = one_hot(classes.index(rec["gate"]), len(classes))
            if boolean:
                if rec.get("refer") is not None:
                    raise SchemaError(f"boolean slot {slot!r} cannot carry a refer prediction")
                continue
            b.start[slot] = one_hot(rec.get("start", 0), seq_len)
            b.end[slot] = one_hot(rec.get("end", 0), seq_len)
            src = rec.get("refer")
            b.refer[slot] = one_hot(n if src is None else ontology.index(src), n + 1)
        return b


def one_hot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v
