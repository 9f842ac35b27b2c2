"""Command-line front end: ``rgtom <subcommand> [--config FILE] [key=value ...]``.

Config files are plain ``key = value`` lines; ``#`` starts a comment and
``include <path>`` pulls in another file (relative to the including one).
Later assignments win, and command-line pairs win over files.

Artifacts live under a run root (``--run-root``, else ``$RGTM_RUN_ROOT``,
else ``./rgtm_runs``)::

    <root>/world/            corpus.jsonl, vocab.txt, world.json
    <root>/listener.rgtm     pretrained listener (+ listener.json sidecar)
    <root>/index_<split>.rgix
    <root>/runs/<name>/      metrics.csv, checkpoints/, summary.json, manifest.json

Exit codes: 0 success, 2 configuration error, 3 training error, 4 stale artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
import types
import typing
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from rgtom.agents import (
    FeedbackThresholds,
    ListenerConfig,
    ListenerNet,
    PretrainConfig,
    RewardConfig,
    SpeakerConfig,
    SpeakerNet,
    listener_accuracy,
    pretrain_listener,
)
from rgtom.distractors import EASY, HARD, SimilarityIndex, SimilarityMetric, build_index, sample_games
from rgtom.errors import ConfigError, StaleArtifactError, TrainingError
from rgtom.evalkit import fit_fluency_models, gold_standard_eval
from rgtom.nnkit.checkpoint import atomic_write, dumps, loads
from rgtom.tom import MODES, W_L_PRESETS, RerankConfig, anneal_wl
from rgtom.trainer import (
    CSV_COLUMNS,
    GameConfig,
    JointConfig,
    PPOConfig,
    TrainConfig,
    evaluate_speaker,
    latest_checkpoint,
    metrics_row,
    new_state,
    play_games,
    train_loop,
)
from rgtom.world import AttributeSchema, DatasetSplit, WorldSeeds, build_dataset

log = logging.getLogger("rgtom")

RUN_ROOT_ENV = "RGTM_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_TRAINING, EXIT_STALE = 0, 2, 3, 4


@dataclass
class RunConfig:
    """Every tunable of a run, flat so it maps one-to-one onto config keys."""

    # world
    n_items: int = 10_000
    shapes: tuple[str, ...] = AttributeSchema.shapes
    colors: tuple[str, ...] = AttributeSchema.colors
    sizes: tuple[str, ...] = AttributeSchema.sizes
    relations: tuple[str, ...] = AttributeSchema.relations
    max_objects: int = 2
    d_img: int = 64
    noise_std: float = 0.1
    scene_seed: int = 0
    projection_seed: int = 1
    noise_seed: int = 2
    grammar_seed: int = 3
    split_seed: int = 4
    vocab_cap: int = 200
    # listener pretraining
    listener_steps: int = 1500
    listener_lr: float = 3e-3
    listener_batch: int = 32
    listener_candidates: int = 5
    listener_seed: int = 0
    listener_eval_every: int = 100
    joint_dim: int = 32
    # speaker
    hidden: int = 64
    d_word: int = 32
    max_len: int = 20
    speaker_seed: int = 0
    # game
    n_candidates: int = 5
    theta1: float = 0.4
    theta2: float = 0.8
    w_noop: float = 0.1
    distractor_mode: str = EASY
    eval_mode: str | None = None
    rank_weighted: bool = False
    # distractor index
    metric: str = "HYBRID"
    w_c: float = 0.5
    caption_variant: str = "CAPTION_TFIDF"
    dense_pooling: str = "encoder"
    k: int = 50
    # rerank
    rerank_mode: str = "TOM"
    w_l_preset: str | None = None  # Zero / Normal / High; overrides w_l_final
    w_l_final: float = 1.0
    pool_size: int = 16
    anneal_steps: int | None = None  # default: 20% of total_steps
    sigma0: float = 0.5
    sigma_decay_steps: int | None = None  # default: 50% of total_steps
    length_normalize: bool = False
    # optimisation
    lam: float = 0.5
    tom_lr: float = 1e-3
    clip_eps: float = 0.2
    ppo_epochs: int = 4
    minibatch: int = 64
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr: float = 3e-4
    batch_size: int = 64
    max_grad_norm: float = 1.0
    bandit: bool = False
    # schedule
    total_steps: int = 500
    eval_interval: int = 50
    eval_episodes: int = 500
    checkpoint_interval: int = 100
    seed: int = 0
    train_tom: bool = True
    stop_train_acc: float | None = None
    # metrics
    lm_order: int = 3
    lm_smoothing: float = 0.1
    eval_split: str = "test"
    # locations
    run_root: str | None = None
    name: str = "run"

    def __post_init__(self):
        self.validate()

    # -- derived configs; constructing them re-runs each owner's validation
    def schema(self) -> AttributeSchema:
        return AttributeSchema(self.shapes, self.colors, self.sizes, self.relations, self.max_objects)

    def seeds(self) -> WorldSeeds:
        return WorldSeeds(self.scene_seed, self.projection_seed, self.noise_seed, self.grammar_seed, self.split_seed)

    def pretrain(self) -> PretrainConfig:
        return PretrainConfig(self.listener_steps, self.listener_candidates, self.listener_batch, self.listener_lr,
                              self.listener_eval_every, 1000, self.listener_seed)

    def game(self) -> GameConfig:
        return GameConfig(self.n_candidates, self.distractor_mode, FeedbackThresholds(self.theta1, self.theta2),
                          RewardConfig(self.w_noop), self.rank_weighted)

    def similarity(self) -> SimilarityMetric:
        return SimilarityMetric.of(self.metric, self.w_c, caption_variant=self.caption_variant,
                                   dense_pooling=self.dense_pooling)

    def rerank(self) -> RerankConfig:
        w_l = W_L_PRESETS[self.w_l_preset] if self.w_l_preset else self.w_l_final
        anneal = self.anneal_steps if self.anneal_steps is not None else self.total_steps // 5
        decay = self.sigma_decay_steps if self.sigma_decay_steps is not None else max(1, self.total_steps // 2)
        return RerankConfig(self.pool_size, w_l, anneal, self.sigma0, decay, self.rerank_mode, self.length_normalize)

    def ppo(self) -> PPOConfig:
        return PPOConfig(self.clip_eps, self.ppo_epochs, self.minibatch, self.gamma, self.gae_lambda,
                         self.entropy_coef, self.value_coef, self.lr, self.batch_size, self.max_grad_norm, self.bandit)

    def joint(self) -> JointConfig:
        return JointConfig(self.lam, self.tom_lr)

    def train(self) -> TrainConfig:
        return TrainConfig(self.total_steps, self.eval_interval, self.eval_episodes, self.checkpoint_interval,
                           self.seed, self.eval_mode, self.train_tom, self.stop_train_acc)

    def validate(self) -> None:
        if self.w_l_preset is not None and self.w_l_preset not in W_L_PRESETS:
            raise ConfigError(f"unknown w_l preset {self.w_l_preset!r}; choose from {sorted(W_L_PRESETS)}")
        if self.rerank_mode not in MODES:
            raise ConfigError(f"unknown rerank mode {self.rerank_mode!r}")
        if self.eval_mode not in (None, EASY, HARD):
            raise ConfigError(f"unknown eval mode {self.eval_mode!r}")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {self.eval_split!r}")
        if self.n_items < 10:
            raise ConfigError("n_items must be >= 10")
        for build in (self.schema, self.pretrain, self.game, self.similarity, self.rerank, self.ppo, self.joint,
                      self.train):
            build()

    @property
    def root(self) -> Path:
        return Path(self.run_root or os.environ.get(RUN_ROOT_ENV) or "rgtm_runs")

    @property
    def run_dir(self) -> Path:
        return self.root / "runs" / self.name

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(v)
    return str(v)


def _parse_value(raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, getattr(types, "UnionType", None)) and type(None) in args:
        if raw.lower() in ("none", "null", ""):
            return None
        hint = next(a for a in args if a is not type(None))
        origin = typing.get_origin(hint)
    if origin is tuple:
        return tuple(w.strip() for w in raw.split(",") if w.strip())
    if hint is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw.replace("_", ""))
    if hint is float:
        return float(raw)
    return raw


def read_config_file(path, _seen: frozenset = frozenset()) -> dict[str, str]:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle at {path}")
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            out.update(read_config_file(path.parent / line[len("include ") :].strip(), _seen | {path}))
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_config(pairs: dict[str, str]) -> RunConfig:
    """Typed :class:`RunConfig` from raw strings; unknown keys are rejected."""
    hints = typing.get_type_hints(RunConfig)
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(pairs) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    kwargs = {}
    for key, raw in pairs.items():
        try:
            kwargs[key] = _parse_value(raw, hints[key])
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from None
    try:
        return RunConfig(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def load_config(config_file=None, overrides=(), run_root=None) -> RunConfig:
    pairs: dict[str, str] = read_config_file(config_file) if config_file else {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    if run_root is not None:
        pairs["run_root"] = str(run_root)
    return build_config(pairs)


# -- artifacts ---------------------------------------------------------------------


def file_hash(path) -> str:
    h = hashlib.blake2b(digest_size=16)
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _world_settings(cfg: RunConfig) -> dict:
    return {
        "schema": cfg.schema().to_dict(),
        "seeds": asdict(cfg.seeds()),
        "noise_std": cfg.noise_std,
        "d_img": cfg.d_img,
        "vocab_cap": cfg.vocab_cap,
    }


def gen_world(cfg: RunConfig) -> DatasetSplit:
    ds = build_dataset(cfg.schema(), cfg.n_items, cfg.seeds(), cfg.noise_std, cfg.d_img, cfg.vocab_cap)
    ds.save(cfg.root / "world")
    log.info("world %s: %d/%d/%d items, vocab %d", ds.fingerprint(), len(ds.train), len(ds.val), len(ds.test),
             len(ds.vocab))
    return ds


def load_world(cfg: RunConfig) -> DatasetSplit:
    d = cfg.root / "world"
    if not (d / "corpus.jsonl").exists():
        raise ConfigError(f"no world under {d}; run gen-world first")
    ds = DatasetSplit.load(d)
    if ds.meta() != _world_settings(cfg) or len(ds.train) + len(ds.val) + len(ds.test) != cfg.n_items:
        raise StaleArtifactError("world on disk was generated with different settings")
    return ds


def _listener_cfg(cfg: RunConfig, ds: DatasetSplit) -> ListenerConfig:
    return ListenerConfig(len(ds.vocab), cfg.d_img, cfg.d_word, cfg.hidden, cfg.joint_dim)


def pretrain(cfg: RunConfig, force: bool = False) -> tuple[ListenerNet, dict]:
    """Pretrain the external listener; an up-to-date checkpoint is reused unless ``force``."""
    ds = load_world(cfg)
    path = cfg.root / "listener.rgtm"
    if path.exists() and not force:
        try:
            listener = load_listener(cfg, ds)
            info = json.loads((cfg.root / "listener.json").read_text())
            if info.get("pretrain") == asdict(cfg.pretrain()):
                log.info("listener checkpoint is current; skipping pretraining")
                return listener, info
        except StaleArtifactError:
            pass
    listener = ListenerNet(_listener_cfg(cfg, ds), seed=cfg.listener_seed)
    start_acc = listener_accuracy(listener, ds.val, cfg.listener_candidates, 1000, cfg.listener_seed)
    result = pretrain_listener(listener, ds.train, ds.val, cfg.pretrain())
    atomic_write(path, dumps(listener.params.state(), role="listener"))
    rows = "step,loss,val_acc\n" + "".join(f"{s},{l!r},{a!r}\n" for s, l, a in result.curve)
    atomic_write(cfg.root / "listener_curve.csv", rows.encode())
    info = {
        "fingerprint": ds.fingerprint(),
        "listener": asdict(listener.cfg),
        "pretrain": asdict(cfg.pretrain()),
        "start_val_acc": start_acc,
        "final_val_acc": result.final_accuracy,
    }
    atomic_write(cfg.root / "listener.json", json.dumps(info, indent=2, sort_keys=True).encode())
    log.info("listener val accuracy %.3f (start %.3f)", result.final_accuracy, start_acc)
    return listener, info


def load_listener(cfg: RunConfig, ds: DatasetSplit) -> ListenerNet:
    path, side = cfg.root / "listener.rgtm", cfg.root / "listener.json"
    if not path.exists() or not side.exists():
        raise ConfigError(f"no listener checkpoint under {cfg.root}; run pretrain-listener first")
    info = json.loads(side.read_text())
    if info["fingerprint"] != ds.fingerprint():
        raise StaleArtifactError("listener was trained on a different world")
    role, arrays = loads(path.read_bytes())
    if role != "listener":
        raise StaleArtifactError(f"expected a listener checkpoint, found role {role!r}")
    listener = ListenerNet(ListenerConfig(**info["listener"]))
    try:
        listener.params.load_state(arrays)
    except ConfigError as e:
        raise StaleArtifactError(f"listener checkpoint does not match the architecture: {e}") from None
    return listener


def index_path(cfg: RunConfig, split: str) -> Path:
    return cfg.root / f"index_{split}.rgix"


def build_indices(cfg: RunConfig, splits=("train", "val", "test")) -> dict[str, SimilarityIndex]:
    ds = load_world(cfg)
    metric = cfg.similarity()
    encoder = load_listener(cfg, ds) if metric.needs_encoder else None
    out = {}
    for name in splits:
        sp = ds.split(name)
        idx = build_index(sp, metric, min(cfg.k, len(sp) - 1), len(ds.vocab), ds.fingerprint(), encoder)
        idx.save(index_path(cfg, name))
        out[name] = idx
    return out


def load_indices(cfg: RunConfig, ds: DatasetSplit, splits) -> dict[str, SimilarityIndex]:
    out = {}
    for name in splits:
        p = index_path(cfg, name)
        if not p.exists():
            raise ConfigError(f"HARD distractors need {p}; run build-index first")
        idx = SimilarityIndex.load(p, expect_fingerprint=ds.fingerprint())
        if idx.metric != cfg.similarity():
            raise StaleArtifactError("index was built with a different similarity metric")
        out[name] = idx
    return out


def _speaker_cfg(cfg: RunConfig, ds: DatasetSplit) -> SpeakerConfig:
    return SpeakerConfig(len(ds.vocab), cfg.d_img, cfg.d_word, cfg.hidden, cfg.max_len)


def _needed_index_splits(cfg: RunConfig, eval_split: str | None = None) -> list[str]:
    need = []
    if cfg.distractor_mode == HARD:
        need.append("train")
    if (cfg.eval_mode or cfg.distractor_mode) == HARD:
        need.append("val")
        if eval_split and eval_split not in need:
            need.append(eval_split)
    return need


def _fresh_state(cfg: RunConfig, ds: DatasetSplit, listener: ListenerNet):
    speaker = SpeakerNet(_speaker_cfg(cfg, ds), seed=cfg.speaker_seed + 1000 * cfg.seed)
    return new_state(speaker, listener, cfg.ppo(), cfg.joint(), tom_seed=cfg.seed + 1)


def _fluency(cfg: RunConfig, ds: DatasetSplit):
    return fit_fluency_models(ds.train.caption_ids, cfg.lm_order, cfg.lm_smoothing, vocab=range(3, len(ds.vocab)))


def train(cfg: RunConfig, resume: bool = True):
    ds = load_world(cfg)
    listener = load_listener(cfg, ds)
    indices = load_indices(cfg, ds, _needed_index_splits(cfg))
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_file = run_dir / "config.txt"
    if resume and latest_checkpoint(run_dir) is not None and cfg_file.exists() and cfg_file.read_text() != cfg.to_text():
        raise StaleArtifactError(f"{run_dir} holds a run with a different configuration")
    atomic_write(cfg_file, cfg.to_text().encode())
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    state = _fresh_state(cfg, ds, listener)
    art = train_loop(state, ds, run_dir, cfg.train(), cfg.ppo(), cfg.joint(), cfg.rerank(), cfg.game(), indices,
                     _fluency(cfg, ds), resume=resume)
    hashes = {"corpus": file_hash(cfg.root / "world" / "corpus.jsonl"), "listener": file_hash(cfg.root / "listener.rgtm")}
    for name in indices:
        hashes[f"index_{name}"] = file_hash(index_path(cfg, name))
    ck = latest_checkpoint(run_dir)
    if ck is not None:
        hashes["checkpoint"] = file_hash(ck)
    manifest = {
        "config": asdict(cfg) | {"run_root": str(cfg.root)},
        "config_text": cfg.to_text(),
        "hashes": hashes,
        "dataset_fingerprint": ds.fingerprint(),
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "final_report": art.final.to_dict() if art.final else None,
    }
    atomic_write(run_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True, default=list).encode())
    return art


def _restore_run(cfg: RunConfig, ds: DatasetSplit, listener: ListenerNet):
    ck = latest_checkpoint(cfg.run_dir)
    if ck is None:
        raise ConfigError(f"no checkpoint under {cfg.run_dir}; run train first")
    role, arrays = loads(ck.read_bytes())
    if role != "trainstate":
        raise StaleArtifactError(f"expected a training checkpoint, found role {role!r}")
    state = _fresh_state(cfg, ds, listener)
    try:
        state.restore(arrays)
    except (ConfigError, KeyError) as e:
        raise StaleArtifactError(f"checkpoint does not match the configuration: {e}") from None
    return state


def evaluate(cfg: RunConfig, gold: bool = False) -> dict:
    """Evaluate the latest checkpoint (or the gold-caption baseline) on ``eval_split``."""
    ds = load_world(cfg)
    listener = load_listener(cfg, ds)
    mode = cfg.eval_mode or cfg.distractor_mode
    indices = load_indices(cfg, ds, [cfg.eval_split] if mode == HARD else [])
    lms = _fluency(cfg, ds)
    game = cfg.game()
    game = dataclasses.replace(game, mode=mode)
    if gold:
        rep = gold_standard_eval(listener, ds, cfg.n_candidates, cfg.eval_episodes, lms, game.thresholds,
                                 cfg.eval_split, mode, indices.get(cfg.eval_split), cfg.seed)
        out = {"gold": True, "split": cfg.eval_split, "report": rep.to_dict()}
        row = metrics_row(0, rep, float("nan"), 0.0, 0.0)
        tag = "gold"
    else:
        state = _restore_run(cfg, ds, listener)
        rerank = cfg.rerank()
        rep, rmean = evaluate_speaker(state, ds, cfg.eval_split, indices.get(cfg.eval_split), rerank, game,
                                      cfg.eval_episodes, lms, seed=cfg.seed)
        out = {"gold": False, "split": cfg.eval_split, "step": state.global_step, "reward_mean": rmean,
               "report": rep.to_dict()}
        row = metrics_row(state.global_step, rep, rmean, 0.0, anneal_wl(state.global_step, rerank))
        tag = "speaker"
    out_dir = cfg.run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    atomic_write(out_dir / f"eval_{tag}_{cfg.eval_split}.json", json.dumps(out, indent=2, sort_keys=True).encode())
    csv_path = out_dir / f"eval_{cfg.eval_split}.csv"
    if not csv_path.exists():
        csv_path.write_text(",".join(CSV_COLUMNS) + "\n")
    with open(csv_path, "a") as f:
        f.write(",".join(row) + "\n")
    return out


def play(cfg: RunConfig, episodes: int = 3) -> list[dict]:
    """Play a few episodes from the latest checkpoint and dump full rerank traces."""
    ds = load_world(cfg)
    listener = load_listener(cfg, ds)
    mode = cfg.eval_mode or cfg.distractor_mode
    indices = load_indices(cfg, ds, [cfg.eval_split] if mode == HARD else [])
    state = _restore_run(cfg, ds, listener)
    sp = ds.split(cfg.eval_split)
    game = cfg.game()
    game = dataclasses.replace(game, mode=mode)
    games = sample_games(sp, indices.get(cfg.eval_split), episodes, game.n_candidates - 1, mode, cfg.seed)
    records = play_games(state, sp, games, cfg.rerank(), game, np.random.default_rng(cfg.seed), sigma=0.0)
    words = ds.vocab.tokens
    out = []
    for g, r in zip(games, records):
        t = r.trace.to_dict()
        t["texts"] = [" ".join(words[i] for i in u) for u in t["utterances"]]
        out.append({
            "target": g.target,
            "candidates": [int(sp.ids[c]) for c in g.candidates],
            "target_caption": sp.captions[g.target_item].text(),
            "utterance": " ".join(words[i] for i in r.utterance),
            "listener_choice": r.response.choice,
            "listener_probs": [float(p) for p in r.response.probs],
            "reward": r.reward,
            "trace": t,
        })
    atomic_write(cfg.run_dir / "play.json", json.dumps(out, indent=2).encode())
    return out


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgtom", description="Referential games with an internal listener model.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--run-root", help=f"artifact root (default ${RUN_ROOT_ENV} or ./rgtm_runs)")
        sp.add_argument("overrides", nargs="*", metavar="key=value")
        return sp

    add("gen-world", "generate the synthetic corpus and vocabulary")
    sp = add("pretrain-listener", "pretrain the external listener on ground-truth captions")
    sp.add_argument("--force", action="store_true", help="retrain even if a current checkpoint exists")
    add("build-index", "build top-K similarity indices for HARD distractors")
    sp = add("train", "train the speaker")
    sp.add_argument("--no-resume", action="store_true", help="ignore existing checkpoints in the run directory")
    sp = add("evaluate", "evaluate a trained speaker or the gold-caption baseline")
    sp.add_argument("--gold", action="store_true", help="use ground-truth captions as utterances")
    sp = add("play", "play episodes and dump rerank traces as JSON")
    sp.add_argument("--episodes", type=int, default=3)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.run_root)
        if args.command == "gen-world":
            ds = gen_world(cfg)
            print(json.dumps({"fingerprint": ds.fingerprint(), "train": len(ds.train), "val": len(ds.val),
                              "test": len(ds.test), "vocab": len(ds.vocab)}))
        elif args.command == "pretrain-listener":
            _, info = pretrain(cfg, force=args.force)
            print(json.dumps({"final_val_acc": info["final_val_acc"], "start_val_acc": info["start_val_acc"]}))
        elif args.command == "build-index":
            idx = build_indices(cfg)
            print(json.dumps({name: str(index_path(cfg, name)) for name in idx}))
        elif args.command == "train":
            art = train(cfg, resume=not args.no_resume)
            print(json.dumps({"run_dir": str(art.run_dir), "steps": art.steps_done,
                              "final": art.final.to_dict() if art.final else None}))
        elif args.command == "evaluate":
            print(json.dumps(evaluate(cfg, gold=args.gold)))
        elif args.command == "play":
            print(json.dumps(play(cfg, args.episodes), indent=2))
    except ConfigError as e:
        log.error("configuration error: %s", e)
        return EXIT_CONFIG
    except StaleArtifactError as e:
        log.error("stale artifact: %s", e)
        return EXIT_STALE
    except TrainingError as e:
        log.error("training failed: %s", e)
        return EXIT_TRAINING
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
