"""Internal listener model, sample-and-rerank utterance selection and its schedules."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from rgtom.agents import NOOP, ListenerConfig, ListenerNet, ListenerResponse, Rollout, SpeakerNet
from rgtom.errors import ConfigError
from rgtom.nnkit import PROB_FLOOR, T, Tensor

TOM, RSA, OFF = "TOM", "RSA", "OFF"
MODES = (TOM, RSA, OFF)
W_L_PRESETS = {"Zero": 0.0, "Normal": 1.0, "High": 1000.0}


class ToMListenerNet(ListenerNet):
    """The speaker's own model of the external listener; same architecture, own parameters."""

    role = "tom"

    @classmethod
    def like(cls, listener: ListenerNet, seed: int = 0) -> "ToMListenerNet":
        return cls(ListenerConfig(**asdict(listener.cfg)), seed=seed, dtype=listener.dtype)

    def sync_from(self, listener: ListenerNet) -> None:
        self.params.copy_from(listener.params)


@dataclass
class RerankConfig:
    n_candidates: int = 16
    w_l_final: float = 1.0
    anneal_steps: int = 0
    sigma0: float = 0.5
    sigma_decay_steps: int = 1
    mode: str = TOM
    length_normalize: bool = False

    def __post_init__(self):
        if self.n_candidates < 1:
            raise ConfigError("n_candidates must be >= 1")
        if self.w_l_final < 0:
            raise ConfigError("w_l_final must be non-negative")
        if self.anneal_steps < 0:
            raise ConfigError("anneal_steps must be >= 0")
        if not 0 <= self.sigma0 <= 1:
            raise ConfigError("sigma0 must lie in [0, 1]")
        if self.sigma_decay_steps < 1:
            raise ConfigError("sigma_decay_steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"unknown rerank mode {self.mode!r}")


@dataclass
class RerankTrace:
    utterances: list[list[int]]
    speaker_scores: list[float]
    listener_scores: list[float]  # log P(target | u) under the scorer
    combined: list[float]
    chosen: int
    randomized: bool
    w_l: float
    sigma: float

    def to_dict(self) -> dict:
        return asdict(self)


def anneal_wl(global_step: int, cfg: RerankConfig) -> float:
    """Linear ramp from 0 to ``w_l_final`` over ``anneal_steps``, flat afterwards."""
    if global_step < 0:
        raise ValueError("step must be >= 0")
    if cfg.anneal_steps == 0 or global_step >= cfg.anneal_steps:
        return float(cfg.w_l_final)
    return cfg.w_l_final * global_step / cfg.anneal_steps


def sigma_at(global_step: int, cfg: RerankConfig) -> float:
    """Exploration probability: ``sigma0`` at step 0, linearly down to 0 at ``sigma_decay_steps``."""
    if global_step < 0:
        raise ValueError("step must be >= 0")
    return cfg.sigma0 * max(0.0, 1.0 - global_step / cfg.sigma_decay_steps)


def tom_prob(tom: ListenerNet, utterance: Sequence[int], candidates, target_index: int | None = None):
    """Distribution over the candidate images given the utterance.

    Returns ``(dist[target_index], dist)``, or ``(None, dist)`` without a target.
    """
    candidates = np.asarray(candidates)
    if candidates.ndim != 2 or candidates.shape[0] < 2:
        raise ValueError("scoring needs at least two candidate images")
    dist = tom.probs_batch([list(utterance)], candidates[None])[0]
    return (None if target_index is None else float(dist[target_index])), dist


def rerank(speaker_scores: Sequence[float], tom_scores: Sequence[float], w_l: float) -> int:
    """``argmax_j w_l * tom_scores[j] + speaker_scores[j]`` (log space); lowest index on ties."""
    s = np.asarray(speaker_scores, dtype=np.float64)
    t = np.asarray(tom_scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("no candidate utterances to rerank")
    if s.shape != t.shape:
        raise ValueError("speaker and listener score lists differ in length")
    if w_l < 0:
        raise ValueError("w_l must be non-negative")
    combined = s if w_l == 0 else w_l * t + s
    return int(np.argmax(combined))


@dataclass
class Selection:
    """Chosen utterances for a batch of episodes plus the pool they came from."""

    rollout: Rollout  # pool of B * n_candidates samples, episode-major
    chosen: np.ndarray  # (B,) row of ``rollout`` picked for each episode
    traces: list[RerankTrace]

    def utterance(self, b: int) -> list[int]:
        return self.rollout.utterance(int(self.chosen[b]))


def select_utterances(
    speaker: SpeakerNet,
    scorer: ListenerNet | None,
    images,
    candidate_sets,
    target_positions,
    cfg: RerankConfig,
    global_step: int,
    rng,
    sigma: float | None = None,
) -> Selection:
    """Sample ``n_candidates`` utterances per episode and pick one.

    ``scorer`` is the internal listener (mode TOM) or the external one (mode
    RSA). Scores are computed for every mode when a scorer is given. Mode OFF
    returns the first sample. Otherwise, with probability ``sigma`` a uniform
    candidate is returned and else the rerank argmax. The coin and the
    random index are drawn for every episode so the stream does not depend
    on the outcome.
    """
    rng = np.random.default_rng(rng)
    images = np.atleast_2d(np.asarray(images))
    cands = np.asarray(candidate_sets)
    targets = np.asarray(target_positions, dtype=np.int64)
    B, N = images.shape[0], cfg.n_candidates
    pool = speaker.sample(np.repeat(images, N, axis=0), rng=rng)
    sp = pool.total_logprob()
    if cfg.length_normalize:
        sp = sp / np.maximum(pool.lengths, 1)
    if scorer is not None and cfg.mode != OFF:
        utts = [pool.utterance(i) for i in range(B * N)]
        probs = scorer.probs_batch(utts, np.repeat(cands, N, axis=0))
        ls = np.log(np.maximum(probs[np.arange(B * N), np.repeat(targets, N)], PROB_FLOOR))
    else:
        ls = np.full(B * N, np.nan)
    sigma = sigma_at(global_step, cfg) if sigma is None else sigma
    w_l = anneal_wl(global_step, cfg)
    coins = rng.random(B)
    uniform = rng.integers(0, N, size=B)
    chosen = np.empty(B, dtype=np.int64)
    traces = []
    for b in range(B):
        rows = slice(b * N, (b + 1) * N)
        s, t = sp[rows], ls[rows]
        if cfg.mode == OFF:
            j, randomized, comb = 0, False, s
        else:
            comb = s if w_l == 0 else w_l * t + s
            randomized = bool(coins[b] < sigma)
            j = int(uniform[b]) if randomized else rerank(s, t, w_l)
        chosen[b] = b * N + j
        traces.append(
            RerankTrace(
                [pool.utterance(i) for i in range(rows.start, rows.stop)],
                s.tolist(),
                t.tolist(),
                np.asarray(comb, dtype=np.float64).tolist(),
                j,
                randomized,
                w_l,
                sigma,
            )
        )
    return Selection(pool, chosen, traces)


def select_utterance(speaker, scorer, image, candidates, target_position, cfg, global_step, rng):
    """Single-episode form of :func:`select_utterances`; returns ``(utterance, trace)``."""
    sel = select_utterances(speaker, scorer, [image], [candidates], [target_position], cfg, global_step, rng)
    return sel.utterance(0), sel.traces[0]


def tom_loss(dist, response: ListenerResponse, theta1: float | None = None) -> float:
    """``-log P_ToM(choice | u)`` when the listener acted, exactly 0 on NOOP."""
    if response.choice == NOOP:
        return 0.0
    if theta1 is not None and response.p_max < theta1:
        raise ValueError("response acted below theta1")
    return -float(np.log(max(float(np.asarray(dist)[response.choice]), PROB_FLOOR)))


def tom_loss_batch(tom: ListenerNet, utterances, candidate_sets, choices) -> Tensor | None:
    """Differentiable mean ToM loss over acted episodes; ``None`` if every episode was NOOP.

    NOOP episodes are dropped before the forward pass, so they add no gradient.
    The mean runs over all episodes (masked ones count as 0).
    """
    choices = np.asarray(choices, dtype=np.int64)
    acted = np.flatnonzero(choices != NOOP)
    if acted.size == 0:
        return None
    logits = tom.scores([utterances[i] for i in acted], np.asarray(candidate_sets)[acted])
    logp = T.pick(T.log_softmax(logits), choices[acted])
    return -logp.sum() / len(choices)
