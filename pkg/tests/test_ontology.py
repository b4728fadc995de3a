import pytest
from hypothesis import given, strategies as st

from copydst.ontology import (
    BOOL_GATE_CLASSES,
    GATE_CLASSES,
    BoolGateClass,
    GateClass,
    Ontology,
    SchemaError,
    canonicalize,
)


def test_gate_vocabularies():
    assert [g.value for g in GateClass] == ["none", "dontcare", "span", "inform", "refer"]
    assert [g.value for g in BoolGateClass] == ["none", "dontcare", "true", "false"]
    assert GATE_CLASSES == tuple(g.value for g in GateClass)
    assert BOOL_GATE_CLASSES == tuple(g.value for g in BoolGateClass)


@pytest.mark.parametrize(
    "pred, gold, ok",
    [("center", "centre", True), ("centre", "centre", True), ("north", "centre", False),
     ("  City   Centre ", "centre", True), ("CENTRE", "center", True)],
)
def test_normalize_match(ontology, pred, gold, ok):
    assert ontology.normalize_match("hotel-area", pred, gold) is ok


def test_unknown_slot_is_schema_error(ontology):
    with pytest.raises(SchemaError, match="nowhere-area"):
        ontology.normalize_match("nowhere-area", "a", "a")


def test_boolean_slots(ontology):
    assert ontology.is_boolean("hotel-parking")
    assert ontology.slot("hotel-parking").gate_classes() == BOOL_GATE_CLASSES
    assert ontology.slot("hotel-area").gate_classes() == GATE_CLASSES


def test_variant_sets_contain_canonical(ontology):
    for slot, classes in ontology.variant_map.items():
        for canon, members in classes.items():
            assert canon in members


def test_duplicate_slots_rejected():
    with pytest.raises(SchemaError):
        Ontology.from_slots(["a-b", "a-b"])


def test_overlapping_variant_classes_rejected():
    with pytest.raises(SchemaError):
        Ontology.from_slots(["a-area"], variants={"a-area": {"x": ["y"], "z": ["y"]}})


def test_json_round_trip(ontology):
    again = Ontology.from_json(ontology.to_json())
    assert again.slot_ids == ontology.slot_ids
    assert again.normalize_match("hotel-area", "city centre", "center")


def test_canonicalize():
    assert canonicalize("  The   North\t") == "the north"


values = st.sampled_from(["centre", "center", "city centre", "north", "south", "moderate", "moderately priced", "x"])


@given(values, values, values)
def test_match_is_an_equivalence(ontology, a, b, c):
    m = lambda x, y: ontology.normalize_match("restaurant-area", x, y)
    assert m(a, a)
    assert m(a, b) == m(b, a)
    if m(a, b) and m(b, c):
        assert m(a, c)
