"""Speaker, external listener, feedback controller, reward, listener pretraining.

Utterances are lists of vocabulary ids without BOS. A sampled utterance ends
with EOS unless it hit the length limit; nothing follows EOS.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rgtom.errors import ConfigError, TrainingError
from rgtom.nnkit import (
    OptimState,
    ParamStore,
    T,
    Tensor,
    backward,
    dense,
    embedding,
    gru_step,
    init_dense,
    init_embedding,
    init_gru,
    no_grad,
    optimizer_step,
)
from rgtom.world import BOS_ID, EOS_ID, MAX_UTTERANCE_LEN, PAD_ID, Caption, Split

log = logging.getLogger(__name__)

NOOP = -1
MASKED_LOGIT = -1e9


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID, min_len: int = 1) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), max(int(lengths.max(initial=0)), min_len)), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def strip_eos(utterance: Sequence[int]) -> list[int]:
    """Word tokens of an utterance: everything before the first EOS."""
    out = []
    for tok in utterance:
        if tok == EOS_ID:
            break
        out.append(int(tok))
    return out


# -- speaker -----------------------------------------------------------------


@dataclass
class SpeakerConfig:
    vocab_size: int
    d_img: int = 64
    d_word: int = 32
    hidden: int = 64
    max_len: int = MAX_UTTERANCE_LEN


@dataclass
class Rollout:
    """Batch of sampled utterances with their sampling-time statistics."""

    tokens: np.ndarray  # (B, L) padded with PAD
    lengths: np.ndarray  # (B,)
    logprobs: np.ndarray  # (B, L) log pi(token) at temperature 1, 0 past the end
    values: np.ndarray  # (B, L)

    def utterance(self, i: int) -> list[int]:
        return self.tokens[i, : self.lengths[i]].tolist()

    def total_logprob(self) -> np.ndarray:
        return self.logprobs.sum(axis=1, dtype=np.float64)


@dataclass
class TeacherForced:
    logprobs: Tensor  # (B, L)
    entropy: Tensor  # (B, L)
    values: Tensor  # (B, L)
    mask: np.ndarray  # (B, L) bool


class SpeakerNet:
    """Image-conditioned recurrent decoder with a value head.

    ``h_0 = tanh(image W_img + b)``; at each step the previous token's
    embedding drives the gated cell, the output projection scores the next
    token and the value head reads the same state.
    """

    role = "speaker"

    def __init__(self, cfg: SpeakerConfig, seed: int = 0, dtype=np.float32):
        if cfg.max_len < 1 or cfg.max_len > MAX_UTTERANCE_LEN:
            raise ConfigError(f"max_len must be in [1, {MAX_UTTERANCE_LEN}]")
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParamStore(dtype)
        init_dense(self.params, "img", cfg.d_img, cfg.hidden, rng)
        init_embedding(self.params, "emb", cfg.vocab_size, cfg.d_word, rng)
        init_gru(self.params, "dec", cfg.d_word, cfg.hidden, rng)
        init_dense(self.params, "out", cfg.hidden, cfg.vocab_size, rng)
        init_dense(self.params, "value", cfg.hidden, 1, rng)
        bias = np.zeros(cfg.vocab_size)
        bias[[PAD_ID, BOS_ID]] = MASKED_LOGIT
        self._logit_mask = bias.astype(dtype)

    @property
    def dtype(self):
        return self.params.dtype

    def check_tokens(self, utterance: Sequence[int]) -> None:
        if len(utterance) > self.cfg.max_len:
            raise ValueError(f"utterance longer than max_len={self.cfg.max_len}")
        for k, tok in enumerate(utterance):
            if not (0 <= tok < self.cfg.vocab_size) or tok in (PAD_ID, BOS_ID):
                raise ValueError(f"invalid token id {tok}")
            if tok == EOS_ID and k != len(utterance) - 1:
                raise ValueError("tokens after EOS")

    def _init_state(self, images) -> Tensor:
        x = T.as_tensor(np.asarray(images, dtype=self.dtype))
        return T.tanh(dense(self.params, "img", x))

    def _step(self, h: Tensor, prev_tokens: np.ndarray) -> tuple[Tensor, Tensor, Tensor]:
        h = gru_step(self.params, h, embedding(self.params, "emb", prev_tokens), prefix="dec")
        logits = dense(self.params, "out", h) + self._logit_mask
        value = dense(self.params, "value", h)
        return h, logits, value

    def teacher_forced(self, images, tokens: np.ndarray, lengths: np.ndarray) -> TeacherForced:
        """Per-position log-probs, entropies and values for given utterances."""
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        mask = np.arange(L)[None, :] < np.asarray(lengths)[:, None]
        prev = np.concatenate([np.full((B, 1), BOS_ID), tokens[:, :-1]], axis=1)
        h = self._init_state(images)
        lps, ents, vals = [], [], []
        for t in range(L):
            h, logits, value = self._step(h, prev[:, t])
            logp = T.log_softmax(logits)
            lps.append(T.pick(logp, np.where(mask[:, t], tokens[:, t], EOS_ID)))
            p = T.exp(logp)
            ents.append(-(p * logp).sum(axis=-1))
            vals.append(T.reshape(value, (B,)))
        return TeacherForced(T.stack(lps, axis=1), T.stack(ents, axis=1), T.stack(vals, axis=1), mask)

    def sample(self, images, max_len: int | None = None, temperature: float = 1.0, rng=None) -> Rollout:
        """Ancestral sampling; stops per row at EOS or ``max_len``."""
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        rng = np.random.default_rng(rng)
        max_len = self.cfg.max_len if max_len is None else max_len
        if max_len < 1:
            raise ValueError("max_len must be >= 1")
        images = np.atleast_2d(np.asarray(images, dtype=self.dtype))
        B = images.shape[0]
        tokens = np.full((B, max_len), PAD_ID, dtype=np.int64)
        logprobs = np.zeros((B, max_len), dtype=np.float64)
        values = np.zeros((B, max_len), dtype=np.float64)
        lengths = np.zeros(B, dtype=np.int64)
        alive = np.ones(B, dtype=bool)
        prev = np.full(B, BOS_ID, dtype=np.int64)
        with no_grad():
            h = self._init_state(images)
            for t in range(max_len):
                h, logits, value = self._step(h, prev)
                z = logits.data.astype(np.float64)
                logp = z - z.max(axis=1, keepdims=True)
                logp -= np.log(np.exp(logp).sum(axis=1, keepdims=True))
                zt = z / temperature
                pt = np.exp(zt - zt.max(axis=1, keepdims=True))
                cdf = np.cumsum(pt, axis=1)
                u = (1.0 - rng.random(B)) * cdf[:, -1]
                tok = np.minimum((cdf < u[:, None]).sum(axis=1), self.cfg.vocab_size - 1)
                tok = np.where(alive, tok, PAD_ID)
                tokens[:, t] = tok
                logprobs[:, t] = np.where(alive, logp[np.arange(B), np.where(alive, tok, EOS_ID)], 0.0)
                values[:, t] = np.where(alive, value.data[:, 0], 0.0)
                lengths += alive
                alive &= tok != EOS_ID
                prev = np.where(alive, tok, EOS_ID)
                if not alive.any():
                    break
        return Rollout(tokens, lengths, logprobs, values)


def speaker_logprob(speaker: SpeakerNet, image, utterance: Sequence[int]) -> np.ndarray:
    """Per-token ``log P(u_i | u_<i, image)``; their sum scores the utterance."""
    speaker.check_tokens(utterance)
    if not utterance:
        return np.zeros(0)
    toks, lens = pad_batch([list(utterance)])
    with no_grad():
        tf = speaker.teacher_forced(np.atleast_2d(image), toks, lens)
    return tf.logprobs.data[0].astype(np.float64)


def speaker_sample(speaker: SpeakerNet, image, max_len: int, temperature: float = 1.0, rng=None) -> list[int]:
    return speaker.sample(np.atleast_2d(image), max_len, temperature, rng).utterance(0)


# -- listener ----------------------------------------------------------------


@dataclass
class ListenerConfig:
    vocab_size: int
    d_img: int = 64
    d_word: int = 32
    hidden: int = 64
    joint: int = 32


class ListenerNet:
    """Dual encoder: recurrent caption encoder ``L(u)`` and linear image encoder ``L(I)``."""

    role = "listener"

    def __init__(self, cfg: ListenerConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.params = ParamStore(dtype)
        init_embedding(self.params, "emb", cfg.vocab_size, cfg.d_word, rng)
        init_gru(self.params, "enc", cfg.d_word, cfg.hidden, rng)
        init_dense(self.params, "txt", cfg.hidden, cfg.joint, rng)
        init_dense(self.params, "img", cfg.d_img, cfg.joint, rng)

    @property
    def dtype(self):
        return self.params.dtype

    def copy(self) -> "ListenerNet":
        return copy.deepcopy(self)

    def encode_utterances(self, utterances: Sequence[Sequence[int]]) -> Tensor:
        """``L(u)`` for each utterance; input is BOS followed by the word tokens."""
        seqs = [[BOS_ID] + strip_eos(u) for u in utterances]
        toks, lens = pad_batch(seqs)
        B, L = toks.shape
        h = T.as_tensor(np.zeros((B, self.cfg.hidden), dtype=self.dtype))
        for t in range(L):
            h_new = gru_step(self.params, h, embedding(self.params, "emb", toks[:, t]), prefix="enc")
            if t == 0:
                h = h_new
            else:
                h = T.where((t < lens)[:, None], h_new, h)
        return dense(self.params, "txt", h)

    def encode_images(self, images) -> Tensor:
        x = T.as_tensor(np.atleast_2d(np.asarray(images, dtype=self.dtype)))
        return dense(self.params, "img", x)

    def scores(self, utterances, candidate_sets) -> Tensor:
        """Dot-product logits, shape (B, n_candidates)."""
        cands = np.asarray(candidate_sets, dtype=self.dtype)
        B, N, D = cands.shape
        lu = self.encode_utterances(utterances)
        li = T.reshape(self.encode_images(cands.reshape(B * N, D)), (B, N, self.cfg.joint))
        return T.reshape(T.matmul(li, T.reshape(lu, (B, self.cfg.joint, 1))), (B, N))

    def probs_batch(self, utterances, candidate_sets) -> np.ndarray:
        with no_grad():
            logits = self.scores(utterances, candidate_sets).data.astype(np.float64)
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)


def listener_probs(listener: ListenerNet, utterance: Sequence[int], candidates) -> np.ndarray:
    """``P(I_j | u) = softmax_j(L(I_j) . L(u))``."""
    candidates = np.asarray(candidates)
    if candidates.ndim != 2 or candidates.shape[0] < 2:
        raise ValueError("listener needs at least two candidate images")
    return listener.probs_batch([list(utterance)], candidates[None])[0]


# -- feedback controller and reward -------------------------------------------


@dataclass(frozen=True)
class FeedbackThresholds:
    theta1: float = 0.4
    theta2: float = 0.8

    def __post_init__(self):
        if not 0 < self.theta1 < self.theta2 < 1:
            raise ConfigError("thresholds must satisfy 0 < theta1 < theta2 < 1")


@dataclass
class ListenerResponse:
    choice: int  # candidate index or NOOP
    linguistic_input: Caption | None
    p_max: float
    probs: np.ndarray = field(repr=False)

    @property
    def acted(self) -> bool:
        return self.choice != NOOP


@dataclass(frozen=True)
class RewardConfig:
    w_noop: float = 0.1

    def __post_init__(self):
        if not 0 <= self.w_noop < 1:
            raise ConfigError("w_noop must be in [0, 1)")


def feedback(probs, target_caption: Caption | None, thresholds: FeedbackThresholds) -> ListenerResponse:
    """Three-band controller on the listener's top probability.

    ``p_max < theta1``: NOOP, no input. ``theta1 <= p_max < theta2``: choose
    and return the target caption. ``p_max >= theta2``: choose, no input.
    Argmax ties go to the lowest index.
    """
    probs = np.asarray(probs, dtype=np.float64)
    t = int(np.argmax(probs))
    p_max = float(probs[t])
    if p_max < thresholds.theta1:
        return ListenerResponse(NOOP, None, p_max, probs)
    if p_max < thresholds.theta2:
        return ListenerResponse(t, target_caption, p_max, probs)
    return ListenerResponse(t, None, p_max, probs)


def listener_respond(
    listener: ListenerNet, utterance, candidates, target_caption: Caption, thresholds: FeedbackThresholds
) -> ListenerResponse:
    return feedback(listener_probs(listener, utterance, candidates), target_caption, thresholds)


def reward(response: ListenerResponse, target_index: int, cfg: RewardConfig) -> float:
    if response.choice == NOOP:
        return -cfg.w_noop
    return 1.0 if response.choice == target_index else -1.0


# -- listener pretraining -------------------------------------------------------


@dataclass
class PretrainConfig:
    steps: int = 1500
    n_candidates: int = 5
    batch_sets: int = 32
    lr: float = 3e-3
    eval_every: int = 100
    eval_trials: int = 1000
    seed: int = 0


@dataclass
class PretrainResult:
    listener: ListenerNet
    curve: list[tuple[int, float, float]]  # (step, train loss, val accuracy)
    losses: list[float]

    @property
    def final_accuracy(self) -> float:
        return self.curve[-1][2]


def sample_candidate_sets(n_items: int, n_sets: int, n_candidates: int, rng) -> np.ndarray:
    """``n_sets`` rows of ``n_candidates`` distinct item indices."""
    keys = rng.random((n_sets, n_items))
    return np.argsort(keys, axis=1)[:, :n_candidates]


def listener_loss(listener: ListenerNet, split: Split, sets: np.ndarray) -> Tensor:
    """Mean of ``-log P(i | U*_i, C)`` over every member ``i`` of every set ``C``."""
    M, N = sets.shape
    caps = [split.caption_ids[i] for i in sets.reshape(-1)]
    lu = T.reshape(listener.encode_utterances(caps), (M, N, listener.cfg.joint))
    li = T.reshape(listener.encode_images(split.features[sets.reshape(-1)]), (M, N, listener.cfg.joint))
    logits = T.matmul(lu, T.transpose(li))  # row = caption, column = image
    logp = T.log_softmax(logits)
    diag = T.pick(logp, np.broadcast_to(np.arange(N), (M, N)))
    return -diag.mean()


def listener_accuracy(listener: ListenerNet, split: Split, n_candidates: int, trials: int, rng) -> float:
    """Accuracy at picking a target from its ground-truth caption among uniform distractors."""
    rng = np.random.default_rng(rng)
    sets = sample_candidate_sets(len(split), trials, n_candidates, rng)
    target_pos = rng.integers(0, n_candidates, size=trials)
    targets = sets[np.arange(trials), target_pos]
    probs = listener.probs_batch([split.caption_ids[i] for i in targets], split.features[sets])
    return float(np.mean(np.argmax(probs, axis=1) == target_pos))


def pretrain_listener(listener: ListenerNet, train: Split, val: Split, cfg: PretrainConfig) -> PretrainResult:
    if len(train) < cfg.n_candidates:
        raise ConfigError("training split smaller than the candidate set")
    rng = np.random.default_rng(cfg.seed)
    opt = OptimState(lr=cfg.lr, max_grad_norm=5.0)
    last_good = listener.params.state()
    curve: list[tuple[int, float, float]] = []
    losses: list[float] = []
    for step in range(1, cfg.steps + 1):
        sets = sample_candidate_sets(len(train), cfg.batch_sets, cfg.n_candidates, rng)
        loss = listener_loss(listener, train, sets)
        value = float(loss.data)
        if not np.isfinite(value):
            listener.params.load_state(last_good)
            err = TrainingError(f"listener loss diverged at step {step}")
            err.last_good_state = last_good
            raise err
        losses.append(value)
        listener.params.zero_grad()
        backward(loss, listener.params.tensors())
        optimizer_step(listener.params, opt)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc = listener_accuracy(listener, val, cfg.n_candidates, cfg.eval_trials, (cfg.seed, step))
            curve.append((step, float(np.mean(losses[-cfg.eval_every :])), acc))
            last_good = listener.params.state()
            log.info("pretrain step %d loss %.4f val acc %.3f", step, curve[-1][1], acc)
    return PretrainResult(listener, curve, losses)
