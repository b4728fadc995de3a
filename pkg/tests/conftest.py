import pytest

from copydst.corpus import DialogTurn, Dialog, GoldLabels, prepare_corpus
from copydst.ontology import default_ontology
from copydst.synth import SynthSpec, synth_corpus


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture(scope="session")
def small_corpus(ontology):
    corpus, _ = synth_corpus(SynthSpec(n_dialogs=12, seed=11), ontology)
    return prepare_corpus(corpus, ontology)[0]


def turn(i, usr, sys="", informs=None, gate=None, state=None, refer=None, span=None):
    gold = None
    if gate is not None or state is not None:
        gold = GoldLabels(dict(gate or {}), span, dict(refer or {}), dict(state or {}))
    return DialogTurn(i, usr, sys, dict(informs or {}), gold)


@pytest.fixture
def bedouin_dialog():
    """Restaurant booked via inform, then a taxi that refers back to it."""
    t1 = turn(1, "i want a cheap restaurant in the north .", "",
              gate={"restaurant-pricerange": "span", "restaurant-area": "span"},
              state={"restaurant-pricerange": "cheap", "restaurant-area": "north"})
    t2 = turn(2, "that sounds good .", "how about the bedouin ?", {"restaurant-name": "the bedouin"},
              gate={"restaurant-name": "inform"},
              state={"restaurant-pricerange": "cheap", "restaurant-area": "north", "restaurant-name": "the bedouin"})
    t3 = turn(3, "i need a taxi to the restaurant .", "anything else ?",
              gate={"taxi-destination": "refer"}, refer={"taxi-destination": "restaurant-name"},
              state={"restaurant-pricerange": "cheap", "restaurant-area": "north", "restaurant-name": "the bedouin",
                     "taxi-destination": "the bedouin"})
    return Dialog("fixture-1", [t1, t2, t3])


# acceptance criterion number -> one-line verdict, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
