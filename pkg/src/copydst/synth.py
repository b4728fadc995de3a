"""Templated multi-domain dialog generator.

Dialog flow lives here; every surface string comes from a template file
(``data/templates.json`` by default) so phenomena can be extended without
touching code. Generated gold labels are internally consistent: span values
occur in the user turn, refer sources are filled earlier, inform values
come from the same turn's system informs.
"""

from __future__ import annotations

import json
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, Dialog, DialogTurn, GoldLabels
from .ontology import DONTCARE, GATE_CLASSES, Ontology

PLACE_DOMAINS = ("restaurant", "hotel", "attraction")
NAMED_SLOTS = ("restaurant-name", "hotel-name", "attraction-name", "restaurant-food")


def load_templates(path: str | Path | None = None) -> dict:
    path = path or Path(__file__).parent / "data" / "templates.json"
    with open(path) as f:
        return json.load(f)


@dataclass
class SynthSpec:
    n_dialogs: int = 200
    seed: int = 0
    split: str = "train"
    p_bare_intro: float = 0.35
    p_ask: float = 0.8
    p_refer: float = 0.3
    p_dontcare: float = 0.2
    p_offer: float = 0.65
    p_reject: float = 0.3
    p_taxi: float = 0.9
    p_taxi_leg: float = 0.4
    p_taxi_refer: float = 0.5
    p_taxi_second: float = 0.7
    p_taxi_both: float = 0.0
    p_variant: float = 0.3
    p_domain_ask: float = 0.5
    refer: bool = True


@dataclass
class SynthReport:
    n_dialogs: int = 0
    n_turns: int = 0
    gate_counts: Counter = field(default_factory=Counter)

    def gate_share(self) -> dict[str, float]:
        """Share of each gate class among the non-none labels (none: among all)."""
        active = sum(c for k, c in self.gate_counts.items() if k != "none")
        total = sum(self.gate_counts.values())
        out = {}
        for k in GATE_CLASSES + ("true", "false"):
            c = self.gate_counts.get(k, 0)
            out[k] = c / total if k == "none" else (c / active if active else 0.0)
        return out

    def to_json(self) -> dict:
        return {
            "n_dialogs": self.n_dialogs,
            "n_turns": self.n_turns,
            "gate_counts": dict(sorted(self.gate_counts.items())),
            "gate_share": {k: round(v, 6) for k, v in self.gate_share().items()},
        }


class _DialogBuilder:
    def __init__(self, ontology: Ontology, tpl: dict, rng: random.Random, spec: SynthSpec):
        self.ont = ontology
        self.tpl = tpl
        self.rng = rng
        self.spec = spec
        self.turns: list[DialogTurn] = []
        self.state: dict[str, str] = {}
        self.sys = ""
        # the previous turn named the current domain: a neutral question is resolvable from it
        self.cue_fresh = False

    def pick(self, options):
        return self.rng.choice(options)

    def surface(self, slot: str, value: str) -> str:
        """Occasionally realize a value through one of its label variants."""
        alts = sorted(self.ont.variants(slot, value) - {value})
        if alts and self.rng.random() < self.spec.p_variant:
            return self.pick(alts)
        return value

    def emit(self, usr: str, updates: dict[str, tuple[str, str, str | None]], informs=None):
        gate = {s: "none" for s in self.ont.slot_ids}
        refer = {}
        for slot, (g, value, src) in updates.items():
            gate[slot] = g
            self.state[slot] = value
            if src is not None:
                refer[slot] = src
        gold = GoldLabels(gate, None, refer, dict(self.state))
        self.turns.append(DialogTurn(len(self.turns) + 1, usr, self.sys, dict(informs or {}), gold))
        self.sys = ""

    def has(self, slot):
        return slot in self.ont

    def value(self, key):
        return self.pick(self.tpl["values"][key])

    def noun(self, domain):
        return self.pick(self.tpl["nouns"][domain])

    # -- place domains ------------------------------------------------------

    def constraints(self, domain):
        names = {"restaurant": ("area", "food", "pricerange"), "hotel": ("area", "pricerange", "parking"),
                 "attraction": ("area",)}[domain]
        return [n for n in names if self.has(f"{domain}-{n}")]

    def intro(self, domain):
        cons = self.constraints(domain)
        if self.rng.random() < self.spec.p_bare_intro or not cons:
            self.emit(self.pick(self.tpl["intro_bare"]).format(noun=self.noun(domain)), {})
            self.cue_fresh = True
            return []
        usable = [t for t in self.tpl["intro"][domain]
                  if all(("{%s}" % c) not in t or c in cons for c in ("area", "food", "pricerange", "parking"))]
        template = self.pick(usable)
        used = [c for c in cons if "{%s}" % c in template]
        fill, updates = {}, {}
        for c in used:
            slot = f"{domain}-{c}"
            if c == "parking":
                fill[c] = self.pick(self.tpl["parking_phrase"])
                updates[slot] = ("true", "true", None)
            else:
                v = self.value(c)
                fill[c] = self.surface(slot, v)
                updates[slot] = ("span", v, None)
        self.emit(template.format(**fill), updates)
        self.cue_fresh = True
        return used

    def refer_source(self, domain, c):
        cands = [f"{d}-{c}" for d in PLACE_DOMAINS
                 if d != domain and f"{d}-{c}" in self.state and self.state[f"{d}-{c}"] != DONTCARE]
        return self.pick(cands) if cands else None

    def ask(self, domain, c):
        slot = f"{domain}-{c}"
        named = not self.cue_fresh or self.rng.random() < self.spec.p_domain_ask
        if c in self.tpl["ask_domain"] and named:
            self.sys = self.pick(self.tpl["ask_domain"][c]).format(noun=self.noun(domain))
        else:
            self.sys = self.pick(self.tpl["ask"][c])
        self.cue_fresh = False
        r = self.rng.random()
        if c == "parking":
            g = "true" if r < 0.45 else "false" if r < 0.8 else "dontcare"
            self.emit(self.pick(self.tpl["parking"][g]), {slot: (g, g, None)})
            return
        src = self.refer_source(domain, c) if self.spec.refer and c in self.tpl["refer_same"] else None
        if src is not None and r < self.spec.p_refer:
            text = self.pick(self.tpl["refer_same"][c]).format(src=self.tpl["nouns"][src.split("-")[0]][0])
            self.emit(text, {slot: ("refer", self.state[src], src)})
        elif self.rng.random() < self.spec.p_dontcare:
            self.emit(self.pick(self.tpl["dontcare"]), {slot: ("dontcare", DONTCARE, None)})
        else:
            v = self.value(c)
            self.emit(self.pick(self.tpl["answer"][c]).format(value=self.surface(slot, v)), {slot: ("span", v, None)})

    def name(self, domain):
        slot = f"{domain}-name"
        if not self.has(slot):
            return
        pool = self.tpl["values"][slot]
        if self.rng.random() >= self.spec.p_offer:
            asks = self.tpl["ask_name"]
            if not self.cue_fresh:
                asks = [a for a in asks if "{noun}" in a] or asks
            self.sys = self.pick(asks).format(noun=self.noun(domain))
            v = self.pick(pool)
            self.emit(self.pick(self.tpl["give_name"]).format(name=v), {slot: ("span", v, None)})
            return
        offered = self.rng.sample(pool, 2)
        if self.rng.random() < self.spec.p_reject:
            self.sys = self.pick(self.tpl["offer"]).format(name=offered[1], noun=self.noun(domain))
            self.emit(self.pick(self.tpl["reject"]), {}, informs={slot: offered[1]})
        self.sys = self.pick(self.tpl["offer"]).format(name=offered[0], noun=self.noun(domain))
        self.emit(self.pick(self.tpl["accept"]), {slot: ("inform", offered[0], None)}, informs={slot: offered[0]})

    def place_task(self, domain):
        used = self.intro(domain)
        rest = [c for c in self.constraints(domain) if c not in used]
        self.rng.shuffle(rest)
        asked = [c for c in rest if self.rng.random() < self.spec.p_ask]
        if not used and rest and not asked:
            asked = rest[:1]
        for c in asked:
            self.ask(domain, c)
        self.name(domain)
        self.sys = self.pick(self.tpl["next_domain"])

    # -- taxi -----------------------------------------------------------------

    def taxi_end(self, exclude=None, avoid=None):
        names = [f"{d}-name" for d in PLACE_DOMAINS if f"{d}-name" in self.state and f"{d}-name" != exclude]
        if self.spec.refer and names and self.rng.random() < self.spec.p_taxi_refer:
            src = self.pick(names)
            noun = self.tpl["nouns"][src.split("-")[0]][0]
            return f"the {noun}", ("refer", self.state[src], src), src
        v = self.pick([p for p in self.tpl["values"]["place"] if p != avoid])
        return v, ("span", v, None), None

    def taxi_task(self):
        slots = {"dest": "taxi-destination", "depart": "taxi-departure"}
        ends = [e for e in ("dest", "depart") if self.has(slots[e])]
        if not ends:
            return
        if self.rng.random() >= 0.6:
            ends.reverse()
        if len(ends) == 2 and self.rng.random() < self.spec.p_taxi_both:
            fill, updates = {}, {}
            fill["dest"], updates[slots["dest"]], src = self.taxi_end()
            fill["depart"], updates[slots["depart"]], _ = self.taxi_end(exclude=src, avoid=fill["dest"])
            self.emit(self.pick(self.tpl["taxi"]["both"]).format(**fill), updates)
        else:
            # one end per user turn; the system asks for the other one
            src = text = None
            for j, end in enumerate(ends):
                if j and self.rng.random() >= self.spec.p_taxi_second:
                    break
                text, upd, src = self.taxi_end(exclude=src, avoid=text)
                if j:
                    self.sys = self.pick(self.tpl["taxi_ask"][end])
                tpl = self.tpl["taxi_answer" if j else "taxi"][end]
                self.emit(self.pick(tpl).format(**{end: text}), {slots[end]: upd})
        if self.has("taxi-leaveat"):
            self.sys = self.pick(self.tpl["ask"]["leaveat"])
            if self.rng.random() < self.spec.p_dontcare:
                self.emit(self.pick(self.tpl["dontcare"]), {"taxi-leaveat": ("dontcare", DONTCARE, None)})
            else:
                v = self.value("time")
                self.emit(self.pick(self.tpl["answer"]["leaveat"]).format(value=v), {"taxi-leaveat": ("span", v, None)})
        self.sys = self.pick(self.tpl["next_domain"])

    def build(self):
        domains = [d for d in PLACE_DOMAINS if any(s.startswith(d + "-") for s in self.ont.slot_ids)]
        k = min(len(domains), self.pick([1, 2, 2, 3]))
        for i, d in enumerate(self.rng.sample(domains, k)):
            # a taxi leg between two place tasks
            if i and self.has("taxi-destination") and self.rng.random() < self.spec.p_taxi_leg:
                self.taxi_task()
            self.place_task(d)
        if self.has("taxi-destination") and self.rng.random() < self.spec.p_taxi:
            self.taxi_task()
        self.emit(self.pick(self.tpl["goodbye"]), {})
        return self.turns


def synth_corpus(
    spec: SynthSpec,
    ontology: Ontology,
    templates: dict | None = None,
) -> tuple[Corpus, SynthReport]:
    tpl = templates or load_templates()
    domains = {s.domain for s in ontology.slots}
    if spec.refer and len(domains & {*PLACE_DOMAINS, "taxi"}) < 2:
        raise ValueError("refer phenomena need at least two domains in the ontology")
    rng = random.Random(spec.seed)
    report = SynthReport()
    dialogs = []
    for i in range(spec.n_dialogs):
        turns = _DialogBuilder(ontology, tpl, rng, spec).build()
        dialogs.append(Dialog(f"{spec.split}-{spec.seed}-{i:04d}", turns))
        report.n_turns += len(turns)
        for t in turns:
            report.gate_counts.update(t.gold.gate.values())
    report.n_dialogs = len(dialogs)
    return Corpus(dialogs, spec.split, {"generator": "synth", "seed": spec.seed}), report


def known_values(ontology: Ontology, templates: dict | None = None) -> dict[str, set[str]]:
    """Every value the generator can draw for each non-boolean slot."""
    vals = (templates or load_templates())["values"]
    names = set(vals["restaurant-name"]) | set(vals["hotel-name"]) | set(vals["attraction-name"])
    out = {}
    for s in ontology.slots:
        if s.is_boolean:
            continue
        if s.slot_id in vals:
            out[s.slot_id] = set(vals[s.slot_id])
        elif s.name in vals:
            out[s.slot_id] = set(vals[s.name])
        elif s.name in ("departure", "destination"):
            out[s.slot_id] = set(vals["place"]) | names
        elif s.name == "leaveat":
            out[s.slot_id] = set(vals["time"])
    return out


def oov_replacement_map(corpus: Corpus, seed: int, templates: dict | None = None) -> dict[str, str]:
    """Map every named-entity value of ``corpus`` to a fresh fictional value."""
    tpl = templates or load_templates()
    rng = random.Random(seed)
    taken = {w for vs in tpl["values"].values() for v in vs for w in v.split()}
    syl = tpl["oov"]["syllables"]
    seen: dict[str, str] = {}
    used: set[str] = set()
    for d in corpus.dialogs:
        for t in d.turns:
            for slot in NAMED_SLOTS:
                v = t.gold.state.get(slot) if t.gold else None
                if v is None or v == DONTCARE or v in seen:
                    continue
                while True:
                    word = "".join(rng.sample(syl, 2))
                    new = rng.choice(tpl["oov"][slot]).format(w=word)
                    if word not in taken and new not in used:
                        break
                used.add(new)
                seen[v] = new
    return seen


def synth_oov_split(corpus: Corpus, ontology: Ontology, seed: int, templates: dict | None = None):
    """Copy of ``corpus`` with all named-entity values replaced by OOV values."""
    from .eval import oov_substitution

    tpl = templates or load_templates()
    mapping = oov_replacement_map(corpus, seed, tpl)
    out, rep = oov_substitution(corpus, mapping, ontology, known_values(ontology, tpl))
    out.split = corpus.split + "_oov"
    return out, rep
