import json

import pytest

from rgtom.cli import RunConfig, build_config, load_config, main, read_config_file
from rgtom.errors import ConfigError

TINY = [
    "n_items=300", "listener_steps=60", "listener_eval_every=30", "hidden=16", "d_word=8", "joint_dim=8",
    "max_len=8", "pool_size=3", "total_steps=4", "eval_interval=2", "eval_episodes=30", "checkpoint_interval=2",
    "batch_size=8", "minibatch=8", "k=10", "distractor_mode=HARD",
]


def run(root, *args):
    cmd, rest = args[0], list(args[1:])
    return main([cmd, "--run-root", str(root), *rest])


def test_defaults_are_valid():
    cfg = RunConfig()
    assert cfg.rerank().anneal_steps == 100 and cfg.rerank().sigma_decay_steps == 250
    assert RunConfig(w_l_preset="High").rerank().w_l_final == 1000.0


def test_config_file_include_and_comments(tmp_path):
    (tmp_path / "base.cfg").write_text("lam = 0.25  # comment\nseed = 3\n")
    (tmp_path / "run.cfg").write_text("include base.cfg\nseed = 4\nshapes = circle, square\n")
    assert read_config_file(tmp_path / "run.cfg") == {"lam": "0.25", "seed": "4", "shapes": "circle, square"}
    cfg = load_config(tmp_path / "run.cfg", ["lam=0.75", "stop_train_acc=none"])
    assert cfg.lam == 0.75 and cfg.seed == 4 and cfg.shapes == ("circle", "square") and cfg.stop_train_acc is None


def test_include_cycle(tmp_path):
    (tmp_path / "a.cfg").write_text("include b.cfg\n")
    (tmp_path / "b.cfg").write_text("include a.cfg\n")
    with pytest.raises(ConfigError):
        read_config_file(tmp_path / "a.cfg")


@pytest.mark.parametrize("pairs", [{"nope": "1"}, {"lam": "abc"}, {"lam": "2"}, {"w_l_preset": "Huge"},
                                   {"max_objects": "0"}, {"train_tom": "maybe"}, {"rerank_mode": "X"}])
def test_bad_config_rejected(pairs):
    with pytest.raises(ConfigError):
        build_config(pairs)


def test_bad_config_exit_code(tmp_path):
    assert run(tmp_path, "gen-world", "nope=1") == 2
    assert run(tmp_path, "gen-world", "max_objects=0") == 2
    assert run(tmp_path, "train", *TINY) == 2  # no world yet


def test_default_world_split_sizes(tmp_path, capsys):
    assert run(tmp_path, "gen-world") == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert (out["train"], out["val"], out["test"]) == (8000, 1000, 1000)


def test_gen_world_deterministic(tmp_path):
    assert run(tmp_path / "a", "gen-world", "n_items=200") == 0
    assert run(tmp_path / "b", "gen-world", "n_items=200") == 0
    for f in ("corpus.jsonl", "vocab.txt"):
        assert (tmp_path / "a/world" / f).read_bytes() == (tmp_path / "b/world" / f).read_bytes()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("root")
    assert run(root, "gen-world", *TINY) == 0
    assert run(root, "pretrain-listener", *TINY) == 0
    assert run(root, "build-index", *TINY) == 0
    assert run(root, "train", *TINY) == 0
    return root


def test_end_to_end_artifacts(pipeline):
    rd = pipeline / "runs" / "run"
    rows = (rd / "metrics.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["0", "2", "4"]
    assert sorted(p.name for p in (rd / "checkpoints").iterdir()) == ["step_00000002.rgtm", "step_00000004.rgtm"]
    man = json.loads((rd / "manifest.json").read_text())
    assert set(man["hashes"]) >= {"corpus", "listener", "checkpoint", "index_train", "index_val"}
    meta = json.loads((pipeline / "listener.json").read_text())
    assert 0 <= meta["final_val_acc"] <= 1


def test_listener_reused(pipeline):
    before = (pipeline / "listener.rgtm").stat().st_mtime_ns
    assert run(pipeline, "pretrain-listener", *TINY) == 0
    assert (pipeline / "listener.rgtm").stat().st_mtime_ns == before


def test_evaluate_and_gold(pipeline):
    assert run(pipeline, "evaluate", *TINY) == 0
    assert run(pipeline, "evaluate", "--gold", *TINY) == 0
    rd = pipeline / "runs" / "run"
    spk = json.loads((rd / "eval_speaker_test.json").read_text())
    gold = json.loads((rd / "eval_gold_test.json").read_text())
    assert spk["step"] == 4 and gold["report"]["bleu"] == pytest.approx(1.0)
    assert len((rd / "eval_test.csv").read_text().splitlines()) == 3


def test_play_trace(pipeline):
    assert run(pipeline, "play", "--episodes", "2", *TINY) == 0
    out = json.loads((pipeline / "runs" / "run" / "play.json").read_text())
    assert len(out) == 2
    t = out[0]["trace"]
    assert len(t["utterances"]) == 3 == len(t["combined"]) == len(t["texts"])
    assert t["randomized"] is False


def test_stale_artifacts(pipeline):
    # a different world setting invalidates everything built on the old one
    assert run(pipeline, "train", *TINY, "noise_std=0.2") == 4
    # resuming an existing run with a different config
    assert run(pipeline, "train", *TINY, "lam=0.9") == 4


def test_identical_configs_identical_csv(pipeline):
    assert run(pipeline, "train", *TINY, "name=again", "--no-resume") == 0
    a = (pipeline / "runs/run/metrics.csv").read_bytes()
    b = (pipeline / "runs/again/metrics.csv").read_bytes()
    assert a == b
