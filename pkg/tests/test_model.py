import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from copydst.corpus import Corpus, GoldLabels
from copydst.ontology import GATE_CLASSES, SchemaError
from copydst.model import (
    DSTModel,
    TrainConfig,
    grad_check,
    joint_loss,
    load_checkpoint,
    lr_at,
    save_checkpoint,
    train,
)
from copydst.model.train import build_examples, corpus_texts
from copydst.predictions import PredictionBundle, one_hot
from copydst.tokenizer import UNK, build_vocab
from copydst.tracker import AuxFeatures

TINY = dict(d_model=16, n_layers=1, n_heads=2, d_ff=32, dropout=0.0)


@pytest.fixture(scope="module")
def tiny(small_corpus, ontology):
    cfg = TrainConfig(**TINY, dtype="float64")
    model = DSTModel(ontology, build_vocab(corpus_texts(small_corpus)), cfg)
    examples, _ = build_examples(model, small_corpus)
    return model, examples


def labeled_batch(model, examples, kinds=("span", "refer", "inform")):
    """A few examples covering the requested gate classes."""
    picked = []
    for kind in kinds:
        c = GATE_CLASSES.index(kind)
        picked.append(next(e for e in examples if (e.gate == c).any()))
    return model.collate(picked)


def test_encode_shapes_and_determinism(tiny, small_corpus):
    model, _ = tiny
    inp = model.input_for(small_corpus.dialogs[0], 2)
    a = model.encode(inp)
    b = model.encode(inp)
    assert a.pooled.shape == (16,) and a.token_reps.shape == (len(inp), 16)
    assert np.array_equal(a.pooled, b.pooled)


def test_encode_train_mode_uses_dropout(small_corpus, ontology):
    cfg = TrainConfig(**{**TINY, "dropout": 0.5})
    model = DSTModel(ontology, build_vocab(corpus_texts(small_corpus)), cfg)
    inp = model.input_for(small_corpus.dialogs[0], 1)
    assert not np.array_equal(model.encode(inp, True, np.random.default_rng(1)).token_reps,
                              model.encode(inp).token_reps)


def test_distributions_sum_to_one(tiny, small_corpus, ontology):
    model, _ = tiny
    n = len(ontology)
    inp = model.input_for(small_corpus.dialogs[1], 3)
    pb = model.forward(inp, AuxFeatures(np.zeros(n), np.ones(n)))
    for d in (*pb.gate.values(), *pb.start.values(), *pb.end.values(), *pb.refer.values()):
        assert np.all(d >= 0) and abs(d.sum() - 1) < 1e-6
    assert all(len(r) == n + 1 for r in pb.refer.values())
    user = np.array([r in ("user", "history-user") for r in inp.segment_roles])
    assert all(np.all(s[~user] < 1e-12) for s in pb.start.values())


def test_aux_dimension_checked(tiny, small_corpus):
    model, _ = tiny
    inp = model.input_for(small_corpus.dialogs[0], 0)
    with pytest.raises(ValueError, match="aux"):
        model.forward(inp, AuxFeatures(np.zeros(3), np.zeros(3)))


def test_zero_weights_give_uniform(small_corpus, ontology):
    model = DSTModel(ontology, build_vocab(corpus_texts(small_corpus)), TrainConfig(**TINY))
    for k in model.params:
        if k.startswith("head."):
            model.params[k][...] = 0
    n = len(ontology)
    pb = model.forward(model.input_for(small_corpus.dialogs[0], 0), AuxFeatures(np.zeros(n), np.zeros(n)))
    assert np.allclose(pb.gate["hotel-area"], 0.2)
    assert np.allclose(pb.gate["hotel-parking"], 0.25)
    assert np.allclose(pb.refer["hotel-area"], 1 / (n + 1))


def _bundle(ontology, seq_len, fill):
    n = len(ontology)
    b = PredictionBundle()
    for s in ontology.slot_ids:
        k = 4 if ontology.is_boolean(s) else 5
        b.gate[s] = fill(k)
        if k == 5:
            b.start[s], b.end[s], b.refer[s] = fill(seq_len), fill(seq_len), fill(n + 1)
    return b


def test_joint_loss_examples(ontology):
    gold = GoldLabels({s: "none" for s in ontology.slot_ids}, {}, {}, {})
    gold.gate["hotel-area"] = "span"
    gold.span = {"hotel-area": (2, 3)}
    perfect = _bundle(ontology, 6, lambda k: one_hot(0, k))
    perfect.gate["hotel-area"] = one_hot(GATE_CLASSES.index("span"), 5)
    perfect.start["hotel-area"] = one_hot(2, 6)
    perfect.end["hotel-area"] = one_hot(3, 6)
    assert joint_loss(perfect, gold, ontology) == 0.0

    no_span = GoldLabels({s: "none" for s in ontology.slot_ids}, {}, {}, {})
    uniform = _bundle(ontology, 6, lambda k: np.full(k, 1 / k))
    n_bool = sum(ontology.is_boolean(s) for s in ontology.slot_ids)
    n = len(ontology)
    expect = 0.8 * ((n - n_bool) * math.log(5) + n_bool * math.log(4)) / n
    assert joint_loss(uniform, no_span, ontology) == pytest.approx(expect)

    with pytest.raises(SchemaError):
        joint_loss(uniform, GoldLabels({}, {}, {}, {}), ontology)


def test_batch_loss_matches_reference_form(tiny, ontology):
    model, examples = tiny
    batch = labeled_batch(model, examples)
    out, _ = model.forward_batch(batch)
    bundles = model.bundles(out, batch)
    ref = []
    for b, pb in enumerate(bundles):
        gold = GoldLabels({}, {}, {}, {})
        for i, s in enumerate(model.span_slots):
            gold.gate[s] = GATE_CLASSES[batch.targets.gate[b, i]]
            if batch.targets.span[b, i, 0] >= 0:
                gold.span[s] = tuple(batch.targets.span[b, i])
            if batch.targets.refer[b, i] >= 0:
                gold.refer[s] = ontology.slot_ids[batch.targets.refer[b, i]]
        for i, s in enumerate(model.bool_slots):
            gold.gate[s] = ("none", "dontcare", "true", "false")[batch.targets.bgate[b, i]]
        ref.append(joint_loss(pb, gold, ontology, model.cfg.loss_weights))
    assert model.loss(batch) == pytest.approx(np.mean(ref), rel=1e-9)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["head.span.w", "head.span.b", "head.refer.w", "head.refer.b"]))
def test_loss_masking(tiny, seed, name):
    model, examples = tiny
    batch = labeled_batch(model, examples, ("inform",))
    tg = batch.targets
    rng = np.random.default_rng(seed)
    kind_on = tg.span[0, :, 0] >= 0 if "span" in name else tg.refer[0] >= 0
    free = np.flatnonzero(~kind_on)
    slot = int(rng.choice(free))
    before = model.loss(batch)
    old = model.params[name].copy()
    try:
        model.params[name][slot] += rng.normal(0, 1.0, old[slot].shape)
        assert model.loss(batch) == before
    finally:
        model.params[name][...] = old


def test_grad_check_small(tiny):
    model, examples = tiny
    batch = labeled_batch(model, examples)
    err, per = grad_check(model, batch, eps=1e-4, n_params=120)
    assert err < 1e-3
    for head in ("gate", "bgate", "span", "refer"):
        assert f"head.{head}.w" in per
    assert any(k.startswith("layer0.") for k in per)


def test_grad_check_preconditions(tiny, small_corpus, ontology):
    model, examples = tiny
    batch = labeled_batch(model, examples)
    with pytest.raises(ValueError, match="eps"):
        grad_check(model, batch, eps=1e-2)
    noisy = DSTModel(ontology, model.vocab, TrainConfig(**{**TINY, "dropout": 0.1}))
    with pytest.raises(ValueError, match="dropout"):
        grad_check(noisy, batch, train_mode=True)


def test_lr_schedule():
    total, lr = 100, 1e-3
    lrs = [lr_at(s, total, lr, 0.1) for s in range(total)]
    assert lrs[0] < lrs[5] < lrs[9]
    assert max(lrs) == pytest.approx(lr)
    assert int(np.argmax(lrs)) == 10
    assert lrs[-1] < lrs[50] and lrs[-1] >= 0
    assert lr_at(0, 10, lr, 0.0) == lr


def test_config_validation(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(loss_weights=(0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        TrainConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        TrainConfig(dropout=1.5)
    with pytest.raises(ValueError):
        TrainConfig.from_json({"learning_rate": 1})
    cfg = TrainConfig(lr=2e-3, epochs=3)
    assert TrainConfig.from_json(cfg.to_json()) == cfg
    assert cfg.without_refer().loss_weights == (0.8, 0.2, 0.0)


def test_checkpoint_round_trip(tmp_path, tiny, small_corpus, ontology):
    model, _ = tiny
    path = tmp_path / "m.npz"
    save_checkpoint(model, path, {"epoch": 3})
    again, extra = load_checkpoint(path)
    assert extra == {"epoch": 3}
    assert again.vocab == model.vocab and again.cfg == model.cfg
    n = len(ontology)
    inp = model.input_for(small_corpus.dialogs[0], 1)
    aux = AuxFeatures(np.zeros(n), np.zeros(n))
    a, b = model.forward(inp, aux), again.forward(inp, aux)
    for s in ontology.slot_ids:
        assert np.array_equal(a.gate[s], b.gate[s])


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "bad.npz"
    np.savez(p, x=np.zeros(2))
    with pytest.raises(ValueError):
        load_checkpoint(p)


def test_train_is_deterministic_and_learns(small_corpus, ontology):
    cfg = TrainConfig(**{**TINY, "dropout": 0.1}, epochs=3, lr=3e-3, batch_size=8)
    a = train(small_corpus, small_corpus, ontology, cfg)
    b = train(small_corpus, small_corpus, ontology, cfg)
    assert [h["loss"] for h in a.history] == [h["loss"] for h in b.history]
    assert a.history[-1]["loss"] < a.history[0]["loss"]
    for k in a.model.params:
        assert np.array_equal(a.model.params[k], b.model.params[k])


def test_train_rejects_empty_split(small_corpus, ontology):
    with pytest.raises(ValueError, match="dev split is empty"):
        train(small_corpus, Corpus([]), ontology, TrainConfig(**TINY, epochs=1))


def test_backward_with_dropout_masks(small_corpus, ontology):
    # fixed mask seed: the dropout network is then an ordinary function of the params
    cfg = TrainConfig(**{**TINY, "dropout": 0.3, "n_layers": 2}, dtype="float64")
    model = DSTModel(ontology, build_vocab(corpus_texts(small_corpus)), cfg)
    examples, _ = build_examples(model, small_corpus)
    batch = labeled_batch(model, examples)
    f = lambda: model.loss_and_grads(batch, True, np.random.default_rng(7))
    _, _, g = f()
    rng = np.random.default_rng(0)
    worst = 0.0
    for name in ("emb.token", "layer0.attn.wo", "layer1.ffn.w2", "layer0.ln1.g", "pool.w", "head.gate.w"):
        p = model.params[name]
        for _ in range(4):
            i = tuple(rng.integers(0, s) for s in p.shape)
            old = p[i]
            p[i] = old + 1e-5
            lp = f()[0]
            p[i] = old - 1e-5
            lm = f()[0]
            p[i] = old
            gn = (lp - lm) / 2e-5
            worst = max(worst, abs(g[name][i] - gn) / max(abs(g[name][i]), abs(gn), 1e-8))
    assert worst < 1e-3


def test_slot_value_dropout_touches_only_values(tiny):
    from copydst.model.train import _drop_values, _value_positions

    model, examples = tiny
    ex = next(e for e in examples if (e.span >= 0).any())
    pos = _value_positions(ex)
    unk = model.tok2id[UNK]
    assert pos.any()
    gone = _drop_values(ex, pos, 1.0, np.random.default_rng(0), unk)
    assert np.all(gone.ids[pos] == unk)
    assert np.array_equal(gone.ids[~pos], ex.ids[~pos])
    kept = _drop_values(ex, pos, 0.0, np.random.default_rng(0), unk)
    assert np.array_equal(kept.ids, ex.ids)
