import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from rgtom.agents import (
    NOOP,
    FeedbackThresholds,
    ListenerConfig,
    ListenerNet,
    ListenerResponse,
    PretrainConfig,
    RewardConfig,
    SpeakerConfig,
    SpeakerNet,
    feedback,
    listener_accuracy,
    listener_probs,
    listener_respond,
    pretrain_listener,
    reward,
    speaker_logprob,
    speaker_sample,
)
from rgtom.errors import ConfigError
from rgtom.world import EOS_ID, AttributeSchema, Caption, WorldSeeds, build_dataset

CAP = Caption(("a", "small", "red", "circle"), ("DET", "ADJ", "ADJ", "NOUN"))


def tiny_speaker(seed=0, vocab=5, hidden=2, d_img=3, dtype=np.float64):
    return SpeakerNet(SpeakerConfig(vocab_size=vocab, d_img=d_img, d_word=2, hidden=hidden, max_len=4), seed, dtype)


def weights(net):
    return {k: net.params[k].data.tolist() for k in net.params}


# -- speaker ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(3))
def test_speaker_logprob_matches_hand_evaluation(seed):
    sp = tiny_speaker(seed)
    img = np.random.default_rng(seed).normal(size=3)
    utt = [3, 4, 3, EOS_ID]
    expected, _ = oracles.speaker_logprobs(weights(sp), img.tolist(), utt)
    np.testing.assert_allclose(speaker_logprob(sp, img, utt), expected, rtol=1e-10, atol=1e-12)


def test_speaker_distributions_sum_to_one():
    sp = tiny_speaker(1)
    _, dists = oracles.speaker_logprobs(weights(sp), [0.1, 0.2, 0.3], [3, 4, EOS_ID])
    tf = sp.teacher_forced(np.array([[0.1, 0.2, 0.3]]), np.array([[3, 4, EOS_ID]]), np.array([3]))
    # every position's full distribution is normalised
    for d in dists:
        assert sum(d) == pytest.approx(1.0, abs=1e-12)
    assert np.all(tf.entropy.data >= 0)


def test_speaker_logprob_depends_only_on_target_image():
    sp = tiny_speaker(2)
    imgs = np.random.default_rng(0).normal(size=(4, 3))
    a = speaker_logprob(sp, imgs[0], [3, EOS_ID])
    b = speaker_logprob(sp, imgs[0].copy(), [3, EOS_ID])
    assert np.array_equal(a, b)


def test_speaker_logprob_rejects_invalid_tokens():
    sp = tiny_speaker()
    for bad in ([7], [1], [0], [EOS_ID, 3], [3] * 5):
        with pytest.raises(ValueError):
            speaker_logprob(sp, np.zeros(3), bad)


def test_speaker_sample_length_and_eos():
    sp = tiny_speaker(3)
    rng = np.random.default_rng(0)
    for _ in range(200):
        u = speaker_sample(sp, rng.normal(size=3), max_len=3, rng=rng)
        assert 1 <= len(u) <= 3
        assert EOS_ID not in u[:-1]
        assert all(t not in (0, 1) for t in u)


def test_speaker_sample_low_temperature_is_greedy():
    sp = tiny_speaker(4)
    img = np.array([0.5, -1.0, 2.0])
    w = weights(sp)
    greedy = []
    for _ in range(4):
        _, dists = oracles.speaker_logprobs(w, img.tolist(), greedy + [EOS_ID])
        nxt = int(np.argmax(dists[-1]))
        greedy.append(nxt)
        if nxt == EOS_ID:
            break
    for seed in range(5):
        assert speaker_sample(sp, img, 4, temperature=1e-6, rng=seed) == greedy


def test_speaker_sample_matches_analytic_distribution():
    sp = tiny_speaker(5, vocab=4)
    img = np.array([0.3, 0.1, -0.4])
    w = weights(sp)
    # analytic law of a 2-step model: [EOS], [3, EOS], [3, 3]
    outcomes = [(EOS_ID,), (3, EOS_ID), (3, 3)]
    probs = [math.exp(sum(oracles.speaker_logprobs(w, img.tolist(), list(o))[0])) for o in outcomes]
    assert sum(probs) == pytest.approx(1.0, abs=1e-12)
    roll = sp.sample(np.repeat(img[None], 10_000, axis=0), max_len=2, rng=7)
    counts = {o: 0 for o in outcomes}
    for i in range(10_000):
        counts[tuple(roll.utterance(i))] += 1
    observed = [counts[o] for o in outcomes]
    _, p = stats.chisquare(observed, [10_000 * q for q in probs])
    assert p > 0.01


def test_sample_logprobs_agree_with_teacher_forcing():
    sp = tiny_speaker(6)
    imgs = np.random.default_rng(1).normal(size=(8, 3))
    roll = sp.sample(imgs, rng=3)
    tf = sp.teacher_forced(imgs, roll.tokens, roll.lengths)
    np.testing.assert_allclose(np.where(tf.mask, tf.logprobs.data, 0), roll.logprobs, atol=1e-10)
    np.testing.assert_allclose(np.where(tf.mask, tf.values.data, 0), roll.values, atol=1e-10)


# -- listener -----------------------------------------------------------------

def hand_listener(dots):
    """Listener whose encoders give the requested dot products for any utterance."""
    n = len(dots)
    net = ListenerNet(ListenerConfig(vocab_size=5, d_img=n, d_word=2, hidden=2, joint=1), 0, np.float64)
    for k in net.params:
        net.params[k].data[...] = 0.0
    net.params["txt.b"].data[...] = 1.0  # L(u) = [1]
    net.params["img.W"].data[:, 0] = dots  # L(e_j) = dots[j]
    return net, np.eye(n)


def test_listener_probs_hand_values():
    net, cands = hand_listener([2.0, 0.5, 0.0])
    np.testing.assert_allclose(listener_probs(net, [3, 4], cands), oracles.softmax([2.0, 0.5, 0.0]), rtol=1e-12)


def test_listener_duplicate_candidates_equal_probability():
    net = ListenerNet(ListenerConfig(vocab_size=6, d_img=4), 0)
    img = np.random.default_rng(0).normal(size=4)
    p = listener_probs(net, [3, 4, EOS_ID], np.stack([img, img, img * 2]))
    assert p[0] == p[1]
    assert abs(p.sum() - 1) <= 1e-9


def test_listener_permutation_equivariance():
    net = ListenerNet(ListenerConfig(vocab_size=6, d_img=4), 1)
    cands = np.random.default_rng(1).normal(size=(5, 4))
    perm = np.array([3, 0, 4, 1, 2])
    p = listener_probs(net, [5, 3], cands)
    q = listener_probs(net, [5, 3], cands[perm])
    np.testing.assert_allclose(q, p[perm], atol=1e-7)


def test_listener_empty_utterance_is_bos_encoding():
    net = ListenerNet(ListenerConfig(vocab_size=6, d_img=4), 2)
    cands = np.random.default_rng(2).normal(size=(3, 4))
    np.testing.assert_array_equal(listener_probs(net, [], cands), listener_probs(net, [EOS_ID], cands))
    with pytest.raises(ValueError):
        listener_probs(net, [3], cands[:1])


# -- feedback controller ----------------------------------------------------------

TH = FeedbackThresholds(0.4, 0.8)


def test_feedback_middle_band():
    r = feedback([0.745, 0.166, 0.089], CAP, TH)
    assert r.choice == 0 and r.linguistic_input == CAP


def test_feedback_hand_listener_middle_band():
    net, cands = hand_listener([2.0, 0.5, 0.0])
    r = listener_respond(net, [3], cands, CAP, TH)
    assert r.choice == 0 and r.linguistic_input == CAP
    assert r.p_max == pytest.approx(oracles.softmax([2.0, 0.5, 0.0])[0])


def test_feedback_noop_and_confident():
    assert feedback([0.2] * 5, CAP, TH).choice == NOOP
    r = feedback([0.95, 0.05], CAP, TH)
    assert r.choice == 0 and r.linguistic_input is None


def test_feedback_boundaries_and_ties():
    assert feedback([0.4, 0.3, 0.3], CAP, TH).linguistic_input == CAP
    r = feedback([0.8, 0.2], CAP, TH)
    assert r.choice == 0 and r.linguistic_input is None
    assert feedback([0.45, 0.45, 0.1], CAP, TH).choice == 0


def test_thresholds_validated():
    for a, b in ((0.5, 0.4), (0.0, 0.5), (0.3, 1.0)):
        with pytest.raises(ConfigError):
            FeedbackThresholds(a, b)


@given(st.lists(st.floats(0.001, 1.0), min_size=2, max_size=8), st.floats(0.05, 0.9), st.floats(0.01, 0.5))
@settings(max_examples=300, deadline=None)
def test_feedback_total_function(ws, t1, gap):
    t2 = min(t1 + gap, 0.99)
    if not t1 < t2:
        return
    th = FeedbackThresholds(t1, t2)
    p = np.array(ws) / sum(ws)
    r = feedback(p, CAP, th)
    cases = [r.p_max < t1, t1 <= r.p_max < t2, r.p_max >= t2]
    assert sum(cases) == 1
    assert (r.choice == NOOP) == (r.p_max < t1)
    assert (r.linguistic_input is not None) == (t1 <= r.p_max < t2)


# -- reward -----------------------------------------------------------------------

def test_reward_values():
    cfg = RewardConfig(0.1)
    probs = np.array([0.9, 0.1])
    assert reward(ListenerResponse(0, None, 0.9, probs), 0, cfg) == 1.0
    assert reward(ListenerResponse(1, None, 0.9, probs), 0, cfg) == -1.0
    assert reward(ListenerResponse(NOOP, None, 0.3, probs), 0, cfg) == pytest.approx(-0.1)
    with pytest.raises(ConfigError):
        RewardConfig(1.0)


# -- pretraining --------------------------------------------------------------------

@pytest.fixture(scope="module")
def world():
    return build_dataset(AttributeSchema(), 2000, WorldSeeds(scene=5))


def test_untrained_listener_is_at_chance(world):
    net = ListenerNet(ListenerConfig(len(world.vocab)), 3)
    acc = listener_accuracy(net, world.val, 5, 1000, 0)
    assert abs(acc - 0.2) <= 0.05


def test_pretraining_loss_decreases(world):
    drops = 0
    for seed in range(10):
        net = ListenerNet(ListenerConfig(len(world.vocab)), seed)
        res = pretrain_listener(net, world.train, world.val,
                                PretrainConfig(steps=100, eval_every=100, eval_trials=100, seed=seed, batch_sets=8))
        drops += np.mean(res.losses[-10:]) < np.mean(res.losses[:10])
    assert drops == 10


def test_pretraining_reaches_high_accuracy(world):
    net = ListenerNet(ListenerConfig(len(world.vocab)), 0)
    res = pretrain_listener(net, world.train, world.val, PretrainConfig(steps=300, eval_every=100))
    assert res.final_accuracy >= 0.9
    assert [c[0] for c in res.curve] == [100, 200, 300]
