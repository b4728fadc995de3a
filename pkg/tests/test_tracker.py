import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copydst.corpus import build_input
from copydst.ontology import BOOL_GATE_CLASSES, GATE_CLASSES, SchemaError
from copydst.predictions import PredictionBundle, one_hot
from copydst.tracker import (
    DialogState,
    InformMemory,
    apply_turn,
    aux_features,
    resolve_span,
    states_to_records,
)

from conftest import turn


def bundle(ontology, inp, gates=None, spans=None, refer=None):
    """All-none bundle with selected overrides."""
    gates, spans, refer = gates or {}, spans or {}, refer or {}
    n = len(ontology)
    b = PredictionBundle()
    for slot in ontology.slot_ids:
        classes = BOOL_GATE_CLASSES if ontology.is_boolean(slot) else GATE_CLASSES
        b.gate[slot] = one_hot(classes.index(gates.get(slot, "none")), len(classes))
        if ontology.is_boolean(slot):
            continue
        s, e = spans.get(slot, (0, 0))
        b.start[slot] = one_hot(s, len(inp))
        b.end[slot] = one_hot(e, len(inp))
        src = refer.get(slot)
        b.refer[slot] = one_hot(n if src is None else ontology.index(src), n + 1)
    return b


def test_dialog_state_is_immutable_and_drops_none():
    ds = DialogState({"hotel-area": "north", "hotel-name": "none"})
    assert dict(ds) == {"hotel-area": "north"}
    ds2 = ds.updated({"hotel-stars": "4"})
    assert "hotel-stars" not in ds and ds2["hotel-stars"] == "4"
    with pytest.raises(TypeError):
        ds["x"] = "y"


def test_aux_features(ontology):
    a = aux_features(InformMemory({"hotel-name": "avalon"}), {"hotel-area": "north"}, ontology)
    assert a.inform_vec.shape == a.ds_vec.shape == (len(ontology),)
    assert a.inform_vec[ontology.index("hotel-name")] == 1 and a.inform_vec.sum() == 1
    assert a.ds_vec[ontology.index("hotel-area")] == 1 and a.ds_vec.sum() == 1


def test_span_update(ontology):
    t = turn(1, "somewhere in the north .")
    inp = build_input(t, [])
    pos = inp.tokens.index("north")
    ds = apply_turn(DialogState(), t, bundle(ontology, inp, {"hotel-area": "span"}, {"hotel-area": (pos, pos)}),
                    inp, ontology)
    assert dict(ds) == {"hotel-area": "north"}


def test_inform_copies_current_turn_offer(ontology):
    t = turn(2, "yes please .", "how about avalon ?", {"hotel-name": "avalon"})
    inp = build_input(t, [])
    ds = apply_turn(DialogState(), t, bundle(ontology, inp, {"hotel-name": "inform"}), inp, ontology)
    assert dict(ds) == {"hotel-name": "avalon"}


def test_inform_without_offer_leaves_slot(ontology):
    t = turn(2, "yes please .", "anything else ?")
    inp = build_input(t, [])
    before = DialogState({"hotel-name": "old"})
    assert dict(apply_turn(before, t, bundle(ontology, inp, {"hotel-name": "inform"}), inp, ontology)) == {"hotel-name": "old"}


def test_refer_reads_pre_turn_state(ontology):
    # restaurant-name changes in the same turn, the refer must see the old value
    t = turn(3, "to the restaurant , and make it the other one .", "", {"restaurant-name": "the new place"})
    inp = build_input(t, [])
    before = DialogState({"restaurant-name": "the bedouin"})
    b = bundle(ontology, inp, {"taxi-destination": "refer", "restaurant-name": "inform"},
               refer={"taxi-destination": "restaurant-name"})
    after = apply_turn(before, t, b, inp, ontology)
    assert after["taxi-destination"] == "the bedouin"
    assert after["restaurant-name"] == "the new place"


def test_refer_to_empty_slot_is_noop(ontology):
    t = turn(1, "to the restaurant .")
    inp = build_input(t, [])
    b = bundle(ontology, inp, {"taxi-destination": "refer"}, refer={"taxi-destination": "restaurant-name"})
    assert dict(apply_turn(DialogState(), t, b, inp, ontology)) == {}


def test_dontcare_and_booleans(ontology):
    t = turn(1, "any area , free parking please .")
    inp = build_input(t, [])
    b = bundle(ontology, inp, {"hotel-area": "dontcare", "hotel-parking": "true"})
    assert dict(apply_turn(DialogState(), t, b, inp, ontology)) == {"hotel-area": "dontcare", "hotel-parking": "true"}


def test_none_gate_carries_state_over(ontology):
    t = turn(2, "thanks .")
    inp = build_input(t, [])
    before = DialogState({"hotel-area": "north"})
    assert apply_turn(before, t, bundle(ontology, inp), inp, ontology) is before


def test_refer_on_boolean_slot_rejected(ontology):
    t = turn(1, "hi .")
    inp = build_input(t, [])
    b = bundle(ontology, inp)
    b.refer["hotel-parking"] = one_hot(0, len(ontology) + 1)
    with pytest.raises(SchemaError):
        apply_turn(DialogState(), t, b, inp, ontology)


def test_missing_slot_rejected(ontology):
    t = turn(1, "hi .")
    inp = build_input(t, [])
    b = bundle(ontology, inp)
    del b.gate["hotel-area"]
    with pytest.raises(SchemaError, match="hotel-area"):
        apply_turn(DialogState(), t, b, inp, ontology)


def test_resolve_span_ignores_non_user_positions():
    t = turn(1, "the north .", "how about the south ?")
    inp = build_input(t, [])
    start = np.zeros(len(inp))
    end = np.zeros(len(inp))
    south = inp.tokens.index("south")
    start[south] = end[south] = 1.0
    start[2] = end[2] = 0.5
    assert resolve_span(start, end, inp) == "north"


def test_resolve_span_length_mismatch():
    inp = build_input(turn(1, "north ."), [])
    with pytest.raises(ValueError):
        resolve_span(np.ones(3), np.ones(len(inp)), inp)


@settings(max_examples=200)
@given(st.data())
def test_inverted_span_is_empty(data):
    inp = build_input(turn(1, "i would like the north part of town please ."), [])
    user = [i for i, r in enumerate(inp.segment_roles) if r == "user"]
    s = data.draw(st.sampled_from(user[1:]))
    e = data.draw(st.sampled_from([u for u in user if u < s]))
    start = np.full(len(inp), 0.01)
    end = np.full(len(inp), 0.01)
    start[s] = end[e] = 1.0
    assert resolve_span(start, end, inp) == ""


def test_states_to_records():
    recs = states_to_records("d1", [DialogState({"b": "2", "a": "1"})])
    assert recs == [{"dialog_id": "d1", "turn": 1, "state": {"a": "1", "b": "2"}}]
    assert list(recs[0]["state"]) == ["a", "b"]
