import math
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from rgtom.agents import ListenerConfig, ListenerNet
from rgtom.evalkit import (
    NOOP,
    EpisodeOutcome,
    accuracy,
    bleu,
    fit_fluency_models,
    fluency,
    gold_standard_eval,
    lm_logprob,
    perplexity,
    pos_f1,
    report,
    tom_accuracy,
    train_lm,
)
from rgtom.world import AttributeSchema, WorldSeeds, build_dataset


def ep(target, choice, tom=None, utt=(3,), ref=(3,), tags=("NOUN",)):
    return EpisodeOutcome(target, choice, list(utt), list(ref), list(tags), tom)


def test_accuracy_examples():
    assert accuracy([ep(1, 1)] * 4) == 1.0
    assert accuracy([ep(1, NOOP)] * 4) == 0.0
    assert accuracy([ep(0, 0)] * 3 + [ep(0, 1), ep(0, NOOP)]) == pytest.approx(0.6)
    assert accuracy([ep(0, 0), ep(0, NOOP)], noop_in_denominator=False) == 1.0
    with pytest.raises(ValueError):
        accuracy([])


def test_tom_accuracy():
    assert tom_accuracy([ep(0, 2, tom=2), ep(0, 1, tom=1)]) == 1.0
    assert tom_accuracy([ep(0, NOOP, tom=0)] * 3) is None
    assert tom_accuracy([ep(0, 1)]) is None
    assert tom_accuracy([ep(0, 1, tom=1), ep(0, 2, tom=0), ep(0, NOOP, tom=3)]) == 0.5


def test_tom_accuracy_uniform_internal_listener():
    # a uniform internal listener always picks index 0 under lowest-index ties
    rng = np.random.default_rng(0)
    eps = []
    for _ in range(20_000):
        choice = int(rng.integers(5))
        tom_choice = int(np.argmax(np.full(5, 0.2)))
        eps.append(ep(choice, choice, tom=tom_choice))
    assert tom_accuracy(eps) == pytest.approx(0.2, abs=0.015)


def test_bleu_hand_example():
    cand = "a red circle".split()
    ref = "a small red circle".split()
    # p1 = 3/3, p2 = 1/2, p3 = (0+1)/(1+1), p4 = (0+1)/(0+1); BP = exp(1 - 4/3)
    hand = math.exp(-1 / 3) * (1 * 0.5 * 0.5 * 1) ** 0.25
    assert bleu([cand], [ref]) == pytest.approx(hand, rel=1e-12)
    assert oracles.bleu([cand], [ref]) == pytest.approx(hand, rel=1e-12)


def test_bleu_trivial():
    refs = [[3, 4, 5, 6], [3, 7, 8]]
    assert bleu(refs, refs) == pytest.approx(1.0)
    assert bleu([[9, 9]], [[3, 4]]) == 0.0
    assert bleu([[]], [[3, 4]]) == 0.0
    with pytest.raises(ValueError):
        bleu([[3]], [])


corpus_st = st.lists(
    st.tuples(st.lists(st.integers(3, 8), min_size=1, max_size=7), st.lists(st.integers(3, 8), min_size=1, max_size=7)),
    min_size=1,
    max_size=6,
)


@given(corpus_st, st.randoms())
def test_bleu_matches_oracle_and_order_invariant(pairs, rnd):
    cands, refs = [p[0] for p in pairs], [p[1] for p in pairs]
    b = bleu(cands, refs)
    assert 0.0 <= b <= 1.0 + 1e-12
    assert b == pytest.approx(oracles.bleu(cands, refs), rel=1e-9, abs=1e-12)
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    assert bleu([p[0] for p in shuffled], [p[1] for p in shuffled]) == pytest.approx(b, rel=1e-12)


def test_unigram_count_ratio():
    lm = train_lm([["a", "a", "b"]], order=1, smoothing=0.0, eos=None)
    assert lm.prob("a") == pytest.approx(2 / 3)
    assert lm.prob("b") == pytest.approx(1 / 3)


@pytest.mark.parametrize("order", [1, 2, 3])
def test_lm_distributions_normalised(order):
    corpus = [[3, 4, 5], [3, 5], [4, 4, 6, 3]]
    lm = train_lm(corpus, order, smoothing=0.1, bos=1, eos=2, vocab=range(3, 8))
    for ctx in [(), (1, 1), (1, 3), (4, 4), (7, 7)]:
        assert sum(lm.distribution(ctx).values()) == pytest.approx(1.0, abs=1e-9)


def test_lm_logprob_includes_eos():
    lm = train_lm([["a", "b"]], order=1, smoothing=0.0)
    assert lm_logprob(lm, ["a", "b"]) == pytest.approx(3 * math.log(1 / 3))
    with pytest.raises(ValueError):
        train_lm([], 1)


@pytest.fixture(scope="module")
def world():
    return build_dataset(AttributeSchema(), 600, WorldSeeds(scene=5))


@pytest.fixture(scope="module")
def lms(world):
    return fit_fluency_models(world.train.caption_ids, order=3, vocab=range(3, len(world.vocab)))


def test_trigram_perplexity_not_above_unigram(world, lms):
    caps = world.train.caption_ids
    assert perplexity(lms.reference, caps) <= perplexity(lms.unigram, caps)


def test_fluency_identical_models_zero(world, lms):
    for c in world.val.caption_ids:
        assert fluency(c, lms.unigram, lms.unigram) == 0.0


def test_fluency_gold_beats_shuffled(world, lms):
    rnd = random.Random(0)
    gold, shuf = [], []
    for c in world.val.caption_ids:
        s = list(c)
        rnd.shuffle(s)
        gold.append(fluency(c, lms.unigram, lms.reference))
        shuf.append(fluency(s, lms.unigram, lms.reference))
    assert np.mean(gold) > np.mean(shuf)


def test_fluency_hand_two_token_case():
    # p_U: unigram over {x, y, eos} from "x y" -> 1/3 each
    # p_M: bigram, p(x|bos)=1, p(y|x)=1, p(eos|y)=1 without smoothing
    p_u = train_lm([["x", "y"]], 1, smoothing=0.0)
    p_m = train_lm([["x", "y"]], 2, smoothing=0.0)
    expected = (0.0 - 3 * math.log(1 / 3)) / 3
    assert fluency(["x", "y"], p_u, p_m) == pytest.approx(expected)


def _tag_of(tok):
    return {"circle": "NOUN", "square": "NOUN", "red": "ADJ", "a": "DET"}.get(tok)


def test_pos_f1_examples():
    f = pos_f1([["a", "circle"]], [["a", "circle", "square"]], [["DET", "NOUN", "NOUN"]], "NOUN", _tag_of)
    assert f == pytest.approx(2 / 3)
    same = [["a", "red", "circle"]]
    tags = [["DET", "ADJ", "NOUN"]]
    for tag in ("DET", "ADJ", "NOUN"):
        assert pos_f1(same, same, tags, tag, _tag_of) == 1.0
    assert pos_f1(same, same, tags, "VERB", _tag_of) == 1.0
    assert pos_f1([["a"]], same, tags, "NOUN", _tag_of) == 0.0
    with pytest.raises(ValueError):
        pos_f1(same, same, tags, "PRON", _tag_of)


@given(st.lists(st.sampled_from(["a", "red", "circle", "square"]), max_size=6),
       st.lists(st.sampled_from(["a", "red", "circle", "square"]), max_size=6))
def test_pos_f1_bounded(u, r):
    tags = [_tag_of(t) for t in r]
    for tag in ("ADJ", "NOUN"):
        assert 0.0 <= pos_f1([u], [r], [tags], tag, _tag_of) <= 1.0


@given(st.lists(st.tuples(st.integers(0, 4), st.integers(-1, 4)), min_size=1, max_size=30))
def test_report_rates_partition(pairs):
    lms = fit_fluency_models([[3, 4], [4, 5]], order=2)
    eps = [ep(t, c) for t, c in pairs]
    r = report(eps, lms, lambda t: "NOUN")
    assert r.acc + r.wrong_rate + r.noop_rate == pytest.approx(1.0, abs=1e-12)
    assert 0 <= r.noop_rate <= 1 and r.avg_len >= 0


def test_report_deterministic(world, lms):
    eps = [ep(0, i % 3 - 1, utt=c, ref=c, tags=cap.tags) for i, (c, cap) in
           enumerate(zip(world.val.caption_ids, world.val.captions))]
    assert report(eps, lms, world.tag_of) == report(eps, lms, world.tag_of)


def test_gold_standard_identity_metrics(world, lms):
    listener = ListenerNet(ListenerConfig(len(world.vocab)), seed=0)
    r = gold_standard_eval(listener, world, 5, 200, lms, split="val", seed=3)
    assert r.bleu == pytest.approx(1.0)
    assert all(v == 1.0 for v in r.pos_f1.values())
    assert r.n_episodes == 200
    assert r.tom_acc is None
