import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from rgtom.agents import ListenerConfig, ListenerNet
from rgtom.distractors import (
    CAPTION_DENSE,
    CAPTION_ONEHOT,
    CAPTION_TFIDF,
    EASY,
    HARD,
    HYBRID,
    VISUAL,
    SimilarityIndex,
    SimilarityMetric,
    build_index,
    caption_dense_vector,
    cosine,
    hybrid_score,
    sample_game,
    tfidf_fit,
    tfidf_vector,
)
from rgtom.errors import ConfigError, SamplingError, StaleArtifactError
from rgtom.world import AttributeSchema, Split, WorldSeeds, build_dataset


def test_cosine_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine(v, v) == pytest.approx(1.0)
    assert cosine([1, 0, 0], [0, 1, 0]) == 0.0
    assert cosine([1, 2], [2, 1]) == pytest.approx(0.8)
    assert cosine([0, 0], [1, 2]) == 0.0


@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_cosine_symmetric_and_bounded(u, v):
    c = cosine(u, v)
    assert c == pytest.approx(cosine(v, u))
    assert -1.0 <= c <= 1.0


def test_tfidf_hand_corpus():
    red, circle, blue, square = 3, 4, 5, 6
    docs = [[red, circle], [blue, circle], [red, square]]
    model = tfidf_fit(docs)
    assert model.idf_of(red) == pytest.approx(math.log(3 / 2))
    assert model.idf_of(circle) == pytest.approx(math.log(3 / 2))
    assert model.idf_of(blue) == pytest.approx(math.log(3))
    assert model.idf_of(99) == pytest.approx(math.log(3))  # unseen token
    a, b = tfidf_vector(model, docs[0]), tfidf_vector(model, docs[2])
    # hand-built vectors over (red, circle, square)
    lr, lc, ls = math.log(1.5), math.log(1.5), math.log(3)
    expected = lr * lr / (math.hypot(lr, lc) * math.hypot(lr, ls))
    dim = 7
    va = [a.get(t, 0.0) for t in range(dim)]
    vb = [b.get(t, 0.0) for t in range(dim)]
    assert cosine(va, vb) == pytest.approx(expected)


def test_tfidf_token_in_every_doc_has_zero_idf():
    model = tfidf_fit([[3, 4], [3, 5], [3]])
    assert model.idf_of(3) == 0.0
    assert tfidf_vector(model, [3, 3])[3] == 0.0


def test_tfidf_empty_corpus():
    with pytest.raises(ValueError):
        tfidf_fit([])


def test_hybrid_endpoints_and_value():
    assert hybrid_score(0.3, 0.9, 0.0) == 0.3
    assert hybrid_score(0.3, 0.9, 1.0) == 0.9
    assert hybrid_score(0.2, 0.8, 0.5) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        hybrid_score(0.1, 0.2, 1.5)


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(0, 0.5), st.floats(0, 1))
def test_hybrid_monotone(v, c, dv, w):
    assert hybrid_score(v + dv, c, w) >= hybrid_score(v, c, w) - 1e-12
    assert hybrid_score(v, c + dv, w) >= hybrid_score(v, c, w) - 1e-12


def test_metric_validation():
    with pytest.raises(ConfigError):
        SimilarityMetric(variant=VISUAL, w_c=0.5)
    with pytest.raises(ConfigError):
        SimilarityMetric(variant=HYBRID, w_c=None)
    with pytest.raises(ConfigError):
        SimilarityMetric.of("SOUND")
    assert SimilarityMetric.of(HYBRID).w_c == 0.5
    assert SimilarityMetric.of(CAPTION_DENSE).needs_encoder


@pytest.fixture(scope="module")
def world():
    return build_dataset(AttributeSchema(), 250, WorldSeeds(scene=7), noise_std=0.1)


@pytest.fixture(scope="module")
def encoder(world):
    return ListenerNet(ListenerConfig(len(world.vocab)), seed=3, dtype=np.float64)


def _oracle_vectors(split, variant, vocab_size, encoder):
    if variant == VISUAL:
        return [list(map(float, f)) for f in split.features]
    if variant == CAPTION_ONEHOT:
        return [[1.0 if t in set(c) else 0.0 for t in range(vocab_size)] for c in split.caption_ids]
    if variant == CAPTION_TFIDF:
        idf = oracles.idf_table(split.caption_ids)
        return [oracles.tfidf_dense(c, idf, vocab_size) for c in split.caption_ids]
    return [list(caption_dense_vector(encoder, c)) for c in split.caption_ids]


def _oracle_sims(split, metric, vocab_size, encoder):
    n = len(split)
    if metric.variant == HYBRID:
        vis = _oracle_vectors(split, VISUAL, vocab_size, encoder)
        cap = _oracle_vectors(split, metric.caption_variant, vocab_size, encoder)
        return [
            [metric.w_c * oracles.cosine(cap[i], cap[j]) + (1 - metric.w_c) * oracles.cosine(vis[i], vis[j]) for j in range(n)]
            for i in range(n)
        ]
    vec = _oracle_vectors(split, metric.variant, vocab_size, encoder)
    return [[oracles.cosine(vec[i], vec[j]) for j in range(n)] for i in range(n)]


@pytest.mark.parametrize(
    "metric",
    [
        SimilarityMetric.of(VISUAL),
        SimilarityMetric.of(CAPTION_ONEHOT),
        SimilarityMetric.of(CAPTION_TFIDF),
        SimilarityMetric.of(CAPTION_DENSE),
        SimilarityMetric.of(HYBRID, 0.5),
        SimilarityMetric.of(HYBRID, 0.3, caption_variant=CAPTION_ONEHOT),
    ],
    ids=lambda m: f"{m.variant}-{m.caption_variant if m.variant == HYBRID else ''}",
)
def test_index_matches_brute_force(world, encoder, metric):
    split = world.train  # 200 items
    k = 12
    V = len(world.vocab)
    index = build_index(split, metric, k, V, world.fingerprint(), encoder=encoder, block=64)
    sims = _oracle_sims(split, metric, V, encoder)
    for i in range(len(split)):
        expect = oracles.ranked_neighbours(sims[i], i, k)
        got = index.neighbors[i].tolist()
        assert got == expect, (i, got, expect)
        assert np.allclose(index.scores[i], [sims[i][j] for j in expect], atol=1e-5)


def test_index_invariants(world):
    index = build_index(world.train, SimilarityMetric.of(HYBRID), 20, len(world.vocab), world.fingerprint())
    n = len(world.train)
    assert np.all(np.diff(index.scores.astype(np.float64), axis=1) <= 1e-6)
    assert np.all(index.neighbors < n)
    assert not np.any(index.neighbors == np.arange(n)[:, None])


def test_index_identical_items_score_one(world):
    sp = world.train
    m = 10
    same = Split("train", np.arange(m), [sp.scenes[0]] * m, np.repeat(sp.features[:1], m, axis=0),
                 [sp.captions[0]] * m, [sp.caption_ids[0]] * m)
    # tf-idf is left out: every token is in every document, so all vectors are zero
    for metric in (SimilarityMetric.of(VISUAL), SimilarityMetric.of(HYBRID, caption_variant=CAPTION_ONEHOT)):
        index = build_index(same, metric, 5, len(world.vocab), "0" * 16)
        assert np.allclose(index.scores, 1.0, atol=1e-6)
    index = build_index(same, SimilarityMetric.of(CAPTION_ONEHOT), 9, len(world.vocab), "0" * 16)
    assert np.allclose(index.scores, 1.0, atol=1e-6)
    assert index.neighbors[0].tolist() == list(range(1, 10))


def test_dense_places_duplicate_first(world, encoder):
    sp = world.train
    caps = list(sp.caption_ids)
    i = next(i for i in range(len(caps)) if caps.count(caps[i]) > 1)
    index = build_index(sp, SimilarityMetric.of(CAPTION_DENSE), 3, len(world.vocab), world.fingerprint(), encoder)
    assert index.scores[i, 0] == pytest.approx(1.0, abs=1e-6)
    assert caps[int(index.neighbors[i, 0])] == caps[i]
    v = caption_dense_vector(encoder, caps[0])
    assert v.shape == (encoder.cfg.joint,)
    assert np.array_equal(v, caption_dense_vector(encoder, caps[0]))
    with pytest.raises(ConfigError):
        caption_dense_vector(None, caps[0])
    with pytest.raises(ConfigError):
        build_index(sp, SimilarityMetric.of(CAPTION_DENSE), 3, len(world.vocab), world.fingerprint())


def test_build_index_rejects_bad_k(world):
    with pytest.raises(ConfigError):
        build_index(world.val, SimilarityMetric.of(VISUAL), len(world.val), len(world.vocab), "0" * 16)


def test_index_round_trip_and_stale(world, tmp_path):
    index = build_index(world.train, SimilarityMetric.of(HYBRID, 0.25), 7, len(world.vocab), world.fingerprint())
    path = tmp_path / "idx.bin"
    index.save(path)
    back = SimilarityIndex.load(path, expect_fingerprint=world.fingerprint())
    assert np.array_equal(back.neighbors, index.neighbors)
    assert np.array_equal(back.scores, index.scores)
    assert back.metric == index.metric and back.fingerprint == index.fingerprint
    with pytest.raises(StaleArtifactError):
        SimilarityIndex.load(path, expect_fingerprint="0123456789abcdef")
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(StaleArtifactError):
        SimilarityIndex.load(path)


def test_easy_game_needs_no_index(world):
    rng = np.random.default_rng(0)
    for _ in range(200):
        g = sample_game(world.train, None, 4, EASY, rng)
        assert g.n_candidates == 5
        assert g.candidates[g.target] == g.target_item
        assert len(set(g.candidates.tolist())) == 5


def test_hard_game_errors(world):
    with pytest.raises(SamplingError):
        sample_game(world.train, None, 4, HARD, 0)
    index = build_index(world.train, SimilarityMetric.of(VISUAL), 3, len(world.vocab), world.fingerprint())
    with pytest.raises(SamplingError):
        sample_game(world.train, index, 4, HARD, 0)
    with pytest.raises(ConfigError):
        sample_game(world.train, index, 2, "MEDIUM", 0)


def test_hard_game_forced_and_within_index(world):
    index = build_index(world.train, SimilarityMetric.of(HYBRID), 4, len(world.vocab), world.fingerprint())
    rng = np.random.default_rng(1)
    for _ in range(200):
        g = sample_game(world.train, index, 4, HARD, rng)
        others = set(g.candidates.tolist()) - {g.target_item}
        assert others == set(index.neighbors[g.target_item].tolist())
    wide = build_index(world.train, SimilarityMetric.of(HYBRID), 30, len(world.vocab), world.fingerprint())
    for _ in range(10_000):
        g = sample_game(world.train, wide, 4, HARD, rng)
        pool = set(wide.neighbors[g.target_item].tolist())
        assert all(c in pool for j, c in enumerate(g.candidates.tolist()) if j != g.target)


def test_target_position_uniform(world):
    rng = np.random.default_rng(2)
    pos = np.bincount([sample_game(world.train, None, 4, EASY, rng).target for _ in range(5000)], minlength=5)
    assert np.all(np.abs(pos - 1000) < 4 * math.sqrt(5000 * 0.2 * 0.8))


def test_rank_weighted_prefers_top(world):
    index = build_index(world.train, SimilarityMetric.of(VISUAL), 20, len(world.vocab), world.fingerprint())
    rng = np.random.default_rng(3)
    top = 0
    for _ in range(2000):
        g = sample_game(world.train, index, 1, HARD, rng, target_item=0, rank_weighted=True)
        top += int(g.candidates[1 - g.target] == index.neighbors[0, 0])
    assert top / 2000 > 1 / 20 * 2


def test_hard_games_are_more_similar_than_easy():
    ds = build_dataset(AttributeSchema(), 2000, WorldSeeds(scene=11))
    sp = ds.train
    metric = SimilarityMetric.of(HYBRID)
    index = build_index(sp, metric, 50, len(ds.vocab), ds.fingerprint())
    vis = sp.features / np.linalg.norm(sp.features, axis=1, keepdims=True)
    rng = np.random.default_rng(4)

    def mean_sim(mode):
        s = []
        for _ in range(1000):
            g = sample_game(sp, index, 4, mode, rng)
            for j, c in enumerate(g.candidates):
                if j != g.target:
                    s.append(float(vis[g.target_item] @ vis[c]))
        return np.mean(s)

    assert mean_sim(HARD) > mean_sim(EASY)
