"""Episode rollout, PPO for the speaker, linguistic-input MLE, internal listener updates."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from rgtom.agents import (
    NOOP,
    FeedbackThresholds,
    ListenerNet,
    ListenerResponse,
    RewardConfig,
    SpeakerNet,
    feedback,
    pad_batch,
    reward,
    strip_eos,
)
from rgtom.distractors import EASY, HARD, SimilarityIndex, sample_game, sample_games
from rgtom.errors import ConfigError, TrainingError
from rgtom.evalkit import EpisodeOutcome, FluencyModels, MetricsReport, fit_fluency_models, report
from rgtom.nnkit import OptimState, T, Tensor, backward, no_grad, optimizer_step
from rgtom.nnkit.checkpoint import atomic_write, dumps, loads
from rgtom.tom import (
    OFF,
    RSA,
    RerankConfig,
    RerankTrace,
    ToMListenerNet,
    anneal_wl,
    select_utterances,
    sigma_at,
    tom_loss_batch,
)
from rgtom.world import EOS_ID, DatasetSplit, Split

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "step", "acc", "reward_mean", "noop_rate", "bleu", "fluency", "tom_acc",
    "adj_f1", "adp_f1", "noun_f1", "verb_f1", "avg_len", "sigma", "w_l_effective",
)


@dataclass
class PPOConfig:
    clip_eps: float = 0.2
    epochs: int = 4
    minibatch: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    batch_size: int = 64
    max_grad_norm: float = 1.0
    bandit: bool = False  # one action per utterance instead of per token

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ConfigError("clip_eps must lie in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.gae_lambda <= 1):
            raise ConfigError("gamma and gae_lambda must lie in (0, 1]")
        if self.epochs < 1 or self.minibatch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, minibatch and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


@dataclass
class JointConfig:
    lam: float = 0.5
    tom_lr: float = 1e-3

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ConfigError("lambda must lie in [0, 1]")
        if self.tom_lr <= 0:
            raise ConfigError("tom_lr must be positive")


@dataclass
class GameConfig:
    n_candidates: int = 5
    mode: str = EASY
    thresholds: FeedbackThresholds = field(default_factory=FeedbackThresholds)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    rank_weighted: bool = False  # HARD only: weight top-K picks by 1/rank

    def __post_init__(self):
        if self.n_candidates < 2:
            raise ConfigError("a game needs at least two candidates")
        if self.mode not in (EASY, HARD):
            raise ConfigError(f"unknown distractor mode {self.mode!r}")


@dataclass
class TrainConfig:
    total_steps: int = 500
    eval_interval: int = 50
    eval_episodes: int = 500
    checkpoint_interval: int = 100
    seed: int = 0
    eval_mode: str | None = None  # distractor mode for evaluation; defaults to the training mode
    train_tom: bool = True
    stop_train_acc: float | None = None  # stop once the rolling train accuracy reaches this
    train_acc_window: int = 10  # batches in the rolling train accuracy

    def __post_init__(self):
        if self.total_steps < 0 or self.eval_interval < 1 or self.checkpoint_interval < 1 or self.eval_episodes < 1:
            raise ConfigError("step counts must be positive")


@dataclass
class EpisodeRecord:
    target: int  # position in ``candidates``
    candidates: np.ndarray  # item positions within the split
    target_item: int
    utterance: list[int]  # includes EOS when one was produced
    logprobs: np.ndarray  # sampling-time log pi per token
    values: np.ndarray
    response: ListenerResponse
    reward: float
    linguistic_input: list[int] | None  # caption ids when the listener returned one
    trace: RerankTrace | None = None

    def __post_init__(self):
        if len(self.logprobs) != len(self.utterance) or len(self.values) != len(self.utterance):
            raise ValueError("per-token statistics must match the utterance length")


@dataclass
class TrainState:
    speaker: SpeakerNet
    listener: ListenerNet  # frozen
    tom: ToMListenerNet
    speaker_opt: OptimState
    tom_opt: OptimState
    global_step: int = 0

    def scorer(self, rerank: RerankConfig) -> ListenerNet | None:
        if rerank.mode == OFF:
            return None
        return self.listener if rerank.mode == RSA else self.tom

    def arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for tag, net, opt in (("speaker", self.speaker, self.speaker_opt), ("tom", self.tom, self.tom_opt)):
            for k, v in net.params.state().items():
                out[f"{tag}/{k}"] = v
            for k, v in opt.m.items():
                out[f"{tag}.m/{k}"] = v
            for k, v in opt.v.items():
                out[f"{tag}.v/{k}"] = v
            out[f"{tag}.opt_step"] = np.array(opt.step, dtype=np.float32)
        out["global_step"] = np.array(self.global_step, dtype=np.float32)
        return out

    def restore(self, arrays: dict[str, np.ndarray]) -> None:
        for tag, net, opt in (("speaker", self.speaker, self.speaker_opt), ("tom", self.tom, self.tom_opt)):
            net.params.load_state({k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(tag + "/")})
            opt.m = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith(tag + ".m/")}
            opt.v = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith(tag + ".v/")}
            opt.step = int(arrays[f"{tag}.opt_step"])
        self.global_step = int(arrays["global_step"])


def new_state(speaker: SpeakerNet, listener: ListenerNet, ppo: PPOConfig, joint: JointConfig, tom_seed: int = 0) -> TrainState:
    return TrainState(
        speaker,
        listener,
        ToMListenerNet.like(listener, seed=tom_seed),
        OptimState(lr=ppo.lr, max_grad_norm=ppo.max_grad_norm),
        OptimState(lr=joint.tom_lr, max_grad_norm=5.0),
    )


# -- rollout -----------------------------------------------------------------


def play_games(state: TrainState, split: Split, games, rerank: RerankConfig, game: GameConfig, rng,
               sigma: float | None = None) -> list[EpisodeRecord]:
    """Select utterances for the given games, get listener responses and rewards."""
    targets = np.array([g.target for g in games], dtype=np.int64)
    items = np.array([g.target_item for g in games], dtype=np.int64)
    cand_feats = split.features[np.stack([g.candidates for g in games])]
    sel = select_utterances(
        state.speaker, state.scorer(rerank), split.features[items], cand_feats, targets, rerank,
        state.global_step, rng, sigma=sigma,
    )
    utts = [sel.utterance(b) for b in range(len(games))]
    probs = state.listener.probs_batch(utts, cand_feats)
    records = []
    for b, g in enumerate(games):
        resp = feedback(probs[b], split.captions[g.target_item], game.thresholds)
        row = int(sel.chosen[b])
        n = len(utts[b])
        records.append(
            EpisodeRecord(
                g.target, g.candidates, g.target_item, utts[b],
                sel.rollout.logprobs[row, :n].copy(), sel.rollout.values[row, :n].copy(),
                resp, reward(resp, g.target, game.rewards),
                list(split.caption_ids[g.target_item]) if resp.linguistic_input is not None else None,
                sel.traces[b],
            )
        )
    return records


def collect_rollout(state: TrainState, split: Split, index: SimilarityIndex | None, batch_size: int,
                    rerank: RerankConfig, game: GameConfig, rng) -> list[EpisodeRecord]:
    rng = np.random.default_rng(rng)
    games = [sample_game(split, index, game.n_candidates - 1, game.mode, rng, rank_weighted=game.rank_weighted) for _ in range(batch_size)]
    return play_games(state, split, games, rerank, game, rng)


# -- PPO -----------------------------------------------------------------------


def compute_advantages(rewards_or_record, values=None, cfg: PPOConfig | None = None) -> tuple[np.ndarray, np.ndarray]:
    """GAE with the episode reward on the last token and zero before it.

    Accepts ``(record, cfg)`` or ``(reward, values, cfg)``. Returns
    ``(advantages, returns)`` with ``returns = advantages + values``.
    """
    if isinstance(rewards_or_record, EpisodeRecord):
        cfg = values
        r, v = rewards_or_record.reward, np.asarray(rewards_or_record.values, dtype=np.float64)
    else:
        r, v = float(rewards_or_record), np.asarray(values, dtype=np.float64)
    n = len(v)
    adv = np.zeros(n)
    nxt_adv, nxt_v = 0.0, 0.0
    for t in range(n - 1, -1, -1):
        rt = r if t == n - 1 else 0.0
        delta = rt + cfg.gamma * nxt_v - v[t]
        nxt_adv = delta + cfg.gamma * cfg.gae_lambda * nxt_adv
        adv[t] = nxt_adv
        nxt_v = v[t]
    return adv, adv + v


def clipped_surrogate(ratio, adv, eps: float):
    """Per-token PPO objective ``min(r A, clip(r, 1-eps, 1+eps) A)`` on plain arrays."""
    ratio, adv = np.asarray(ratio, dtype=np.float64), np.asarray(adv, dtype=np.float64)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


@dataclass
class _Batch:
    images: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray
    mask: np.ndarray
    old_logp: np.ndarray
    adv: np.ndarray
    returns: np.ndarray


def _ppo_batch(records: Sequence[EpisodeRecord], split: Split, cfg: PPOConfig) -> _Batch:
    toks, lens = pad_batch([r.utterance for r in records])
    B, L = toks.shape
    mask = np.arange(L)[None, :] < lens[:, None]
    old = np.zeros((B, L))
    adv = np.zeros((B, L))
    ret = np.zeros((B, L))
    for i, r in enumerate(records):
        n = len(r.utterance)
        old[i, :n] = r.logprobs
        if cfg.bandit:
            a = r.reward - r.values[0]
            adv[i, :n], ret[i, :n] = a, r.reward
        else:
            adv[i, :n], ret[i, :n] = compute_advantages(r.reward, r.values, cfg)
    flat = adv[mask]
    std = flat.std()
    adv = np.where(mask, (adv - flat.mean()) / (std if std > 1e-8 else 1.0), 0.0)
    return _Batch(split.features[[r.target_item for r in records]], toks, lens, mask, old, adv, ret)


def ppo_loss(speaker: SpeakerNet, b: _Batch, rows: np.ndarray, cfg: PPOConfig) -> tuple[Tensor, dict]:
    """Clipped surrogate + value regression - entropy bonus, as a loss to minimise."""
    tf = speaker.teacher_forced(b.images[rows], b.tokens[rows], b.lengths[rows])
    m = b.mask[rows].astype(np.float64)
    n_tok = max(m.sum(), 1.0)
    ratio = T.exp(tf.logprobs - b.old_logp[rows])
    adv = b.adv[rows]
    clipped = T.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps)
    surr = T.minimum(ratio * adv, clipped * adv)
    policy = -(surr * m).sum() / n_tok
    diff = tf.values - b.returns[rows]
    value = (diff * diff * m).sum() / n_tok
    entropy = (tf.entropy * m).sum() / n_tok
    loss = policy + cfg.value_coef * value - cfg.entropy_coef * entropy
    return loss, {"policy": policy.item(), "value": value.item(), "entropy": entropy.item()}


def li_loss(speaker: SpeakerNet, records: Sequence[EpisodeRecord], split: Split) -> Tensor | float:
    """Mean ``-log pi(U* | x)`` over records carrying linguistic input (caption plus EOS)."""
    with_input = [r for r in records if r.linguistic_input is not None]
    if not with_input:
        return 0.0
    seqs = [list(r.linguistic_input) + [EOS_ID] for r in with_input]
    toks, lens = pad_batch(seqs)
    tf = speaker.teacher_forced(split.features[[r.target_item for r in with_input]], toks, lens)
    return -(tf.logprobs * tf.mask.astype(np.float64)).sum() / len(with_input)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


@dataclass
class UpdateResult:
    policy: float = 0.0
    value: float = 0.0
    entropy: float = 0.0
    li: float = 0.0
    aborted: bool = False


def ppo_update(state: TrainState, records: Sequence[EpisodeRecord], split: Split, cfg: PPOConfig,
               rng, lam: float = 1.0) -> UpdateResult:
    """Minibatch epochs on ``lam * PPO loss + (1 - lam) * li_loss``.

    A non-finite loss aborts the whole update and restores the parameters
    and optimiser state from before it.
    """
    if not records:
        raise ValueError("no records to update on")
    rng = np.random.default_rng(rng)
    snapshot = (state.speaker.params.state(), copy.deepcopy(state.speaker_opt))
    batch = _ppo_batch(records, split, cfg)
    n = len(records)
    stats: list[dict] = []
    lis: list[float] = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch):
            rows = order[start : start + cfg.minibatch]
            total: Tensor | float = 0.0
            if lam > 0:
                loss, st = ppo_loss(state.speaker, batch, rows, cfg)
                total = lam * loss
                stats.append(st)
            if lam < 1:
                li = li_loss(state.speaker, [records[i] for i in rows], split)
                lis.append(_value(li))
                total = total + (1 - lam) * li
            if not isinstance(total, Tensor):
                continue
            if not np.isfinite(total.item()):
                state.speaker.params.load_state(snapshot[0])
                state.speaker_opt = snapshot[1]
                log.warning("non-finite speaker loss; update aborted")
                return UpdateResult(aborted=True)
            backward(total, state.speaker.params.tensors())
            optimizer_step(state.speaker.params, state.speaker_opt)
    mean = lambda key: float(np.mean([s[key] for s in stats])) if stats else 0.0  # noqa: E731
    return UpdateResult(mean("policy"), mean("value"), mean("entropy"), float(np.mean(lis)) if lis else 0.0)


def tom_update(state: TrainState, records: Sequence[EpisodeRecord], split: Split) -> float:
    """One optimiser step on the masked mean ToM loss; NOOP-only batches leave parameters untouched."""
    cands = split.features[np.stack([r.candidates for r in records])]
    loss = tom_loss_batch(state.tom, [r.utterance for r in records], cands, [r.response.choice for r in records])
    if loss is None:
        return 0.0
    value = loss.item()
    if not np.isfinite(value):
        log.warning("non-finite ToM loss; update skipped")
        return value
    backward(loss, state.tom.params.tensors())
    optimizer_step(state.tom.params, state.tom_opt)
    return value


@dataclass
class JointResult:
    joint: float
    o_cg: float
    o_li: float
    o_tom: float
    lam: float
    update: UpdateResult


def joint_step(state: TrainState, records: Sequence[EpisodeRecord], split: Split, joint: JointConfig,
               ppo: PPOConfig, rng, train_tom: bool = True) -> JointResult:
    """Speaker step on ``lam * O_CG + (1 - lam) * O_LI``; ToM step on its own parameters.

    Logged objective values are measured on the batch before the update:
    ``O_CG`` is the mean reward, ``O_LI = -li_loss`` and ``O_ToM = -tom loss``.
    """
    with no_grad():
        o_li = -_value(li_loss(state.speaker, records, split))
    o_cg = float(np.mean([r.reward for r in records]))
    upd = ppo_update(state, records, split, ppo, rng, lam=joint.lam)
    o_tom = -tom_update(state, records, split) if train_tom else 0.0
    value = joint.lam * o_cg + (1 - joint.lam) * o_li + o_tom
    return JointResult(value, o_cg, o_li, o_tom, joint.lam, upd)


# -- evaluation and the training loop --------------------------------------------


def _seed(*parts: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(p) for p in parts]))


EVAL_GAMES_STREAM = 7
EVAL_SAMPLING_STREAM = 8
TRAIN_STREAM = 9


def evaluate_speaker(state: TrainState, dataset: DatasetSplit, split_name: str, index: SimilarityIndex | None,
                     rerank: RerankConfig, game: GameConfig, n_episodes: int, lms: FluencyModels,
                     seed: int = 0) -> tuple[MetricsReport, float]:
    """Metrics on a fixed, seed-determined set of games with exploration off.

    Returns the report and the mean reward. The internal-listener prediction
    for ToM accuracy comes from the network used for reranking (the external
    listener itself in RSA mode); mode OFF still consults the internal one.
    """
    sp = dataset.split(split_name)
    games = sample_games(sp, index, n_episodes, game.n_candidates - 1, game.mode, _seed(seed, EVAL_GAMES_STREAM))
    records = play_games(state, sp, games, rerank, game, _seed(seed, EVAL_SAMPLING_STREAM, state.global_step), sigma=0.0)
    scorer = state.scorer(rerank) or state.tom
    cand = sp.features[np.stack([g.candidates for g in games])]
    tom_choice = np.argmax(scorer.probs_batch([r.utterance for r in records], cand), axis=1)
    outs = [
        EpisodeOutcome(r.target, r.response.choice, strip_eos(r.utterance), list(sp.caption_ids[r.target_item]),
                       list(sp.captions[r.target_item].tags), int(tc))
        for r, tc in zip(records, tom_choice)
    ]
    return report(outs, lms, dataset.tag_of), float(np.mean([r.reward for r in records]))


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def metrics_row(step: int, rep: MetricsReport, reward_mean: float, sigma: float, w_l: float) -> list[str]:
    f1 = rep.pos_f1
    vals = [step, rep.acc, reward_mean, rep.noop_rate, rep.bleu, rep.fluency, rep.tom_acc,
            f1["ADJ"], f1["ADP"], f1["NOUN"], f1["VERB"], rep.avg_len, sigma, w_l]
    return [_fmt(v) for v in vals]


@dataclass
class RunArtifacts:
    run_dir: Path
    csv_path: Path
    summary_path: Path
    final: MetricsReport | None
    steps_done: int
    stopped_early: bool
    train_acc_history: list[float]


def _checkpoint_path(run_dir: Path, step: int) -> Path:
    return run_dir / "checkpoints" / f"step_{step:08d}.rgtm"


def latest_checkpoint(run_dir) -> Path | None:
    found = sorted((Path(run_dir) / "checkpoints").glob("step_*.rgtm"))
    return found[-1] if found else None


def _rewrite_csv(path: Path, keep_through: int) -> None:
    rows = list(csv.reader(io.StringIO(path.read_text()))) if path.exists() else []
    body = [r for r in rows[1:] if int(r[0]) <= keep_through]
    _write_csv(path, body)


def _write_csv(path: Path, rows: list[list[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(rows)
    atomic_write(path, buf.getvalue().encode("utf-8"))


def _append_csv(path: Path, row: list[str]) -> None:
    with open(path, "a", newline="") as f:
        csv.writer(f, lineterminator="\n").writerow(row)
        f.flush()


def train_loop(
    state: TrainState,
    dataset: DatasetSplit,
    run_dir,
    train: TrainConfig,
    ppo: PPOConfig,
    joint: JointConfig,
    rerank: RerankConfig,
    game: GameConfig,
    indices: dict[str, SimilarityIndex] | None = None,
    lms: FluencyModels | None = None,
    resume: bool = True,
) -> RunArtifacts:
    """Alternate rollouts and joint updates, evaluating every ``eval_interval`` steps.

    Every batch of episodes is one step. All randomness for step ``s`` comes
    from a generator seeded by ``(seed, s)``, so resuming from a checkpoint
    replays exactly the stream of an uninterrupted run.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    csv_path = run_dir / "metrics.csv"
    indices = indices or {}
    eval_mode = train.eval_mode or game.mode
    eval_game = replace(game, mode=eval_mode)
    if game.mode == HARD and "train" not in indices:
        raise ConfigError("HARD training needs an index over the train split")
    if eval_mode == HARD and "val" not in indices:
        raise ConfigError("HARD evaluation needs an index over the val split")
    lms = lms or fit_fluency_models(dataset.train.caption_ids, vocab=range(3, len(dataset.vocab)))

    ckpt = latest_checkpoint(run_dir) if resume else None
    if ckpt is not None:
        role, arrays = loads(ckpt.read_bytes())
        state.restore(arrays)
        _rewrite_csv(csv_path, state.global_step)
        log.info("resumed from %s at step %d", ckpt, state.global_step)
    else:
        _write_csv(csv_path, [])
    history_path = run_dir / "train_acc.json"
    history: list[float] = json.loads(history_path.read_text())[: state.global_step] if ckpt and history_path.exists() else []

    def do_eval() -> MetricsReport:
        rep, rmean = evaluate_speaker(state, dataset, "val", indices.get("val"), rerank, eval_game,
                                      train.eval_episodes, lms, seed=train.seed)
        s = state.global_step
        _append_csv(csv_path, metrics_row(s, rep, rmean, sigma_at(s, rerank), anneal_wl(s, rerank)))
        return rep

    final = None
    if state.global_step == 0:
        final = do_eval()
    stopped = False
    t0 = time.time()
    while state.global_step < train.total_steps:
        rng = _seed(train.seed, TRAIN_STREAM, state.global_step)
        records = collect_rollout(state, dataset.train, indices.get("train"), ppo.batch_size, rerank, game, rng)
        history.append(float(np.mean([r.response.choice == r.target for r in records])))
        res = joint_step(state, records, dataset.train, joint, ppo, rng, train_tom=train.train_tom)
        if res.update.aborted:
            raise TrainingError(f"non-finite loss at step {state.global_step}")
        state.global_step += 1
        s = state.global_step
        if s % train.eval_interval == 0:
            final = do_eval()
        if s % train.checkpoint_interval == 0 or s == train.total_steps:
            atomic_write(_checkpoint_path(run_dir, s), dumps(state.arrays(), role="trainstate"))
            atomic_write(history_path, json.dumps(history).encode())
        if train.stop_train_acc is not None and len(history) >= train.train_acc_window:
            if np.mean(history[-train.train_acc_window :]) >= train.stop_train_acc:
                stopped = True
                break
    atomic_write(history_path, json.dumps(history).encode())
    summary = {
        "steps": state.global_step,
        "episodes": state.global_step * ppo.batch_size,
        "stopped_early": stopped,
        "final_train_acc": float(np.mean(history[-train.train_acc_window :])) if history else None,
        "final_eval": final.to_dict() if final else None,
        "wall_seconds": round(time.time() - t0, 3),
        "config": {
            "train": asdict(train), "ppo": asdict(ppo), "joint": asdict(joint),
            "rerank": asdict(rerank), "game": asdict(game),
        },
    }
    summary_path = run_dir / "summary.json"
    atomic_write(summary_path, json.dumps(summary, indent=2, sort_keys=True).encode())
    return RunArtifacts(run_dir, csv_path, summary_path, final, state.global_step, stopped, history)
