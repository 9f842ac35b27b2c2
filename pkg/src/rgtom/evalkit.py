"""Evaluation metrics: accuracy, ToM accuracy, BLEU, fluency, POS F1, length."""

from __future__ import annotations

import hashlib
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from rgtom.world import TAGS

NOOP = -1


@dataclass
class EpisodeOutcome:
    """The slice of an episode the metrics need."""

    target: int
    choice: int  # NOOP = -1
    utterance: list[int]  # word tokens, EOS stripped
    reference: list[int]  # gold caption tokens
    reference_tags: list[str]
    tom_choice: int | None = None  # argmax of the internal listener, if any


def accuracy(episodes: Sequence[EpisodeOutcome], noop_in_denominator: bool = True) -> float:
    """Fraction of episodes where the listener chose the target; NOOP counts as wrong.

    With ``noop_in_denominator=False`` NOOP episodes are dropped instead.
    """
    if not episodes:
        raise ValueError("accuracy of zero episodes")
    pool = episodes if noop_in_denominator else [e for e in episodes if e.choice != NOOP]
    if not pool:
        return 0.0
    return sum(e.choice == e.target for e in pool) / len(pool)


def tom_accuracy(episodes: Sequence[EpisodeOutcome]) -> float | None:
    """Agreement of the internal listener's argmax with the listener's actual choice.

    Only episodes where the listener acted count; ``None`` when there are none
    or no internal listener was involved.
    """
    acted = [e for e in episodes if e.choice != NOOP and e.tom_choice is not None]
    if not acted:
        return None
    return sum(e.tom_choice == e.choice for e in acted) / len(acted)


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: Sequence[Sequence], references: Sequence[Sequence], max_n: int = 4) -> float:
    """Corpus BLEU-4 with uniform weights and a single reference per candidate.

    Clipped n-gram matches and totals are summed over the corpus. For
    ``n >= 2`` a zero match count is smoothed to ``(0 + 1) / (total + 1)``.
    A zero unigram match count gives 0. Brevity penalty is
    ``exp(1 - r / c)`` when the total candidate length ``c`` is below the
    total reference length ``r``.
    """
    if len(candidates) != len(references):
        raise ValueError("candidate and reference corpora differ in size")
    if not candidates:
        raise ValueError("BLEU of an empty corpus")
    c_len = sum(len(c) for c in candidates)
    r_len = sum(len(r) for r in references)
    if c_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        match = total = 0
        for cand, ref in zip(candidates, references):
            cc, rc = _ngram_counts(cand, n), _ngram_counts(ref, n)
            match += sum(min(c, rc[g]) for g, c in cc.items())
            total += max(len(cand) - n + 1, 0)
        if match == 0:
            if n == 1:
                return 0.0
            match, total = 1, total + 1
        log_p += math.log(match / total) / max_n
    bp = 1.0 if c_len >= r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


@dataclass
class NgramLM:
    """Additively smoothed n-gram model over token ids.

    Contexts are padded with ``bos``; with ``eos`` set, every sentence is
    scored and trained with a terminal ``eos`` token.
    """

    order: int
    smoothing: float
    vocab: tuple  # predictable symbols (includes eos when used)
    counts: dict[tuple, Counter]
    bos: object = "<bos>"
    eos: object | None = "<eos>"
    fingerprint: str = ""
    _totals: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._totals = {ctx: sum(c.values()) for ctx, c in self.counts.items()}

    def prob(self, token, context: tuple = ()) -> float:
        ctx = tuple(context)[-(self.order - 1) :] if self.order > 1 else ()
        c = self.counts.get(ctx)
        num = (c[token] if c else 0) + self.smoothing
        den = self._totals.get(ctx, 0) + self.smoothing * len(self.vocab)
        if den == 0:
            return 1.0 / len(self.vocab)
        return num / den

    def distribution(self, context: tuple = ()) -> dict:
        return {w: self.prob(w, context) for w in self.vocab}


def _sentence(tokens: Sequence, lm_order: int, bos, eos) -> list:
    return [bos] * (lm_order - 1) + list(tokens) + ([eos] if eos is not None else [])


def train_lm(corpus: Iterable[Sequence], order: int, smoothing: float = 0.1, bos="<bos>", eos="<eos>",
             vocab: Iterable | None = None) -> NgramLM:
    corpus = [list(s) for s in corpus]
    if not corpus:
        raise ValueError("language model needs a non-empty corpus")
    if order < 1:
        raise ValueError("order must be >= 1")
    symbols = set(vocab) if vocab is not None else {t for s in corpus for t in s}
    if eos is not None:
        symbols.add(eos)
    counts: dict[tuple, Counter] = {}
    for s in corpus:
        seq = _sentence(s, order, bos, eos)
        for i in range(order - 1, len(seq)):
            ctx = tuple(seq[i - order + 1 : i]) if order > 1 else ()
            counts.setdefault(ctx, Counter())[seq[i]] += 1
    fp = hashlib.blake2b(repr(corpus).encode(), digest_size=8).hexdigest()
    return NgramLM(order, smoothing, tuple(sorted(symbols, key=repr)), counts, bos, eos, fp)


def lm_logprob(lm: NgramLM, utterance: Sequence) -> float:
    """Natural-log probability of the utterance (plus the terminal eos, if modelled)."""
    seq = _sentence(utterance, lm.order, lm.bos, lm.eos)
    total = 0.0
    for i in range(lm.order - 1, len(seq)):
        ctx = tuple(seq[i - lm.order + 1 : i]) if lm.order > 1 else ()
        total += math.log(max(lm.prob(seq[i], ctx), 1e-300))
    return total


def perplexity(lm: NgramLM, corpus: Sequence[Sequence]) -> float:
    n = sum(len(s) + (lm.eos is not None) for s in corpus)
    return math.exp(-sum(lm_logprob(lm, s) for s in corpus) / n)


def fluency(utterance: Sequence, p_u: NgramLM, p_m: NgramLM) -> float:
    """Per-token log-probability gain of ``p_m`` over ``p_u``.

    ``|u|`` counts the scored tokens: words plus the terminal eos.
    """
    n = len(utterance) + (p_m.eos is not None)
    if n < 1:
        raise ValueError("fluency of an empty utterance")
    return (lm_logprob(p_m, utterance) - lm_logprob(p_u, utterance)) / n


def pos_f1(utterances: Sequence[Sequence], references: Sequence[Sequence], reference_tags: Sequence[Sequence[str]],
           tag: str, tag_of) -> float:
    """Mean per-pair F1 of the multiset of tokens carrying ``tag``.

    Utterance tokens are tagged by ``tag_of(token)``; references carry gold
    tags. A pair with no tagged token on either side scores 1; one empty
    side scores 0.
    """
    if tag not in TAGS:
        raise ValueError(f"unknown tag {tag!r}")
    if len(utterances) != len(references):
        raise ValueError("utterances and references differ in size")
    if not utterances:
        raise ValueError("POS F1 of an empty corpus")
    total = 0.0
    for u, ref, tags in zip(utterances, references, reference_tags):
        cu = Counter(t for t in u if tag_of(t) == tag)
        cr = Counter(t for t, g in zip(ref, tags) if g == tag)
        nu, nr = sum(cu.values()), sum(cr.values())
        if nu == 0 and nr == 0:
            total += 1.0
            continue
        if nu == 0 or nr == 0:
            continue
        overlap = sum((cu & cr).values())
        if overlap:
            p, r = overlap / nu, overlap / nr
            total += 2 * p * r / (p + r)
    return total / len(utterances)


F1_TAGS = ("ADJ", "ADP", "NOUN", "VERB")


@dataclass
class MetricsReport:
    acc: float
    tom_acc: float | None
    bleu: float
    fluency: float
    pos_f1: dict[str, float]
    avg_len: float
    noop_rate: float
    wrong_rate: float
    n_episodes: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FluencyModels:
    unigram: NgramLM
    reference: NgramLM


def fit_fluency_models(captions: Sequence[Sequence[int]], order: int = 3, smoothing: float = 0.1,
                       vocab: Iterable | None = None, eos=2, bos=1) -> FluencyModels:
    """Unigram ``p_U`` and higher-order ``p_M`` on the same caption corpus."""
    vocab = list(vocab) if vocab is not None else None
    return FluencyModels(
        train_lm(captions, 1, smoothing, bos=bos, eos=eos, vocab=vocab),
        train_lm(captions, order, smoothing, bos=bos, eos=eos, vocab=vocab),
    )


def report(episodes: Sequence[EpisodeOutcome], lms: FluencyModels, tag_of) -> MetricsReport:
    if not episodes:
        raise ValueError("no episodes to report on")
    n = len(episodes)
    utts = [e.utterance for e in episodes]
    refs = [e.reference for e in episodes]
    tags = [e.reference_tags for e in episodes]
    noop = sum(e.choice == NOOP for e in episodes) / n
    acc = accuracy(episodes)
    flu = float(np.mean([fluency(u, lms.unigram, lms.reference) for u in utts]))
    return MetricsReport(
        acc=acc,
        tom_acc=tom_accuracy(episodes),
        bleu=bleu(utts, refs),
        fluency=flu,
        pos_f1={t: pos_f1(utts, refs, tags, t, tag_of) for t in F1_TAGS},
        avg_len=float(np.mean([len(u) for u in utts])),
        noop_rate=noop,
        wrong_rate=sum(e.choice not in (NOOP, e.target) for e in episodes) / n,
        n_episodes=n,
    )


def gold_standard_eval(listener, dataset, n_candidates: int, episodes: int, lms: FluencyModels,
                       thresholds=None, split: str = "test", mode: str = "EASY", index=None,
                       seed: int = 0) -> MetricsReport:
    """Play games where the utterance is the target's ground-truth caption.

    Uses the same game sampler as speaker evaluation, so a shared ``seed``
    gives paired episodes.
    """
    from rgtom.agents import FeedbackThresholds, feedback
    from rgtom.distractors import sample_games

    thresholds = thresholds or FeedbackThresholds()
    sp = dataset.split(split)
    games = sample_games(sp, index, episodes, n_candidates - 1, mode, seed)
    utts = [list(sp.caption_ids[g.target_item]) for g in games]
    probs = listener.probs_batch(utts, sp.features[np.stack([g.candidates for g in games])])
    outs = []
    for g, u, p in zip(games, utts, probs):
        resp = feedback(p, sp.captions[g.target_item], thresholds)
        outs.append(EpisodeOutcome(g.target, resp.choice, u, u, list(sp.captions[g.target_item].tags)))
    return report(outs, lms, dataset.tag_of)
