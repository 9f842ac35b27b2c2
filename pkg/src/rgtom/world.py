"""Procedurally generated grounded world: scenes, feature "images", captions.

A scene is a short chain of attributed objects joined by spatial relations.
Its rendering is a fixed seeded Gaussian projection of the concatenated
one-hot attribute encoding plus optional Gaussian noise. Captions come from
a template grammar whose terminals each carry exactly one POS tag::

    one object   a <size> <color> <shape>
    chain        a <size> <color> <shape> is <rel> a <size> <color> <shape> ...

For chains the grammar seed may instead realise the mirrored form, read
from the last object backwards with every relation inverted.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from rgtom.errors import ConfigError

TAGS = ("DET", "ADJ", "NOUN", "ADP", "VERB")
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
RESERVED = (PAD, BOS, EOS)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
MAX_UTTERANCE_LEN = 20
WORDS_PER_OBJECT = 4  # a <size> <color> <shape>

INVERSE_RELATIONS = {"left": "right", "right": "left", "above": "below", "below": "above"}


@dataclass(frozen=True)
class AttributeSchema:
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "star", "cross")
    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "purple", "orange")
    sizes: tuple[str, ...] = ("small", "large")
    relations: tuple[str, ...] = ("left", "right", "above", "below")
    max_objects: int = 2

    def __post_init__(self):
        for name in ("shapes", "colors", "sizes", "relations"):
            vals = tuple(getattr(self, name))
            object.__setattr__(self, name, vals)
            if not vals:
                raise ConfigError(f"schema.{name} must be non-empty")
            if len(set(vals)) != len(vals):
                raise ConfigError(f"schema.{name} has duplicates")
        if self.max_objects < 1:
            raise ConfigError("schema.max_objects must be >= 1")
        # chain caption length: 4n words + 2 per relation
        if WORDS_PER_OBJECT * self.max_objects + 2 * (self.max_objects - 1) > MAX_UTTERANCE_LEN:
            raise ConfigError(f"max_objects={self.max_objects} exceeds the {MAX_UTTERANCE_LEN}-token caption bound")
        terminals = list(self.shapes) + list(self.colors) + list(self.sizes) + list(self.relations) + ["a", "is"]
        if len(set(terminals)) != len(terminals):
            raise ConfigError("grammar terminals must be unique across attribute lists")

    def tag_map(self) -> dict[str, str]:
        tags = {"a": "DET", "is": "VERB"}
        tags.update({w: "ADJ" for w in self.sizes + self.colors})
        tags.update({w: "NOUN" for w in self.shapes})
        tags.update({w: "ADP" for w in self.relations})
        return tags

    def encoding_dim(self) -> int:
        per_obj = 1 + len(self.shapes) + len(self.colors) + len(self.sizes)
        return self.max_objects * per_obj + (self.max_objects - 1) * len(self.relations)

    def to_dict(self) -> dict:
        return {
            "shapes": list(self.shapes),
            "colors": list(self.colors),
            "sizes": list(self.sizes),
            "relations": list(self.relations),
            "max_objects": self.max_objects,
        }


@dataclass(frozen=True)
class Scene:
    objects: tuple[tuple[str, str, str], ...]  # (shape, color, size)
    relations: tuple[tuple[str, int, int], ...] = ()

    def validate(self, schema: AttributeSchema) -> None:
        if not 1 <= len(self.objects) <= schema.max_objects:
            raise ConfigError(f"scene has {len(self.objects)} objects")
        for shape, color, size in self.objects:
            if shape not in schema.shapes or color not in schema.colors or size not in schema.sizes:
                raise ConfigError(f"unknown attribute in {(shape, color, size)}")
        for rel, i, j in self.relations:
            if rel not in schema.relations or i == j or not (0 <= i < len(self.objects) and 0 <= j < len(self.objects)):
                raise ConfigError(f"invalid relation {(rel, i, j)}")

    def to_dict(self) -> dict:
        return {"objects": [list(o) for o in self.objects], "relations": [list(r) for r in self.relations]}

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        return cls(
            objects=tuple(tuple(o) for o in d["objects"]),
            relations=tuple((r[0], int(r[1]), int(r[2])) for r in d["relations"]),
        )


@dataclass(frozen=True)
class Caption:
    words: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self):
        if len(self.words) != len(self.tags):
            raise ValueError("caption words and tags differ in length")
        if len(self.words) > MAX_UTTERANCE_LEN:
            raise ValueError("caption exceeds maximum utterance length")

    def text(self) -> str:
        return " ".join(self.words)


def generate_scene(schema: AttributeSchema, rng_seed) -> Scene:
    """Uniform over object count, per-object attributes, and chain relations."""
    rng = np.random.default_rng(rng_seed)
    n = int(rng.integers(1, schema.max_objects + 1))
    objects = tuple(
        (
            schema.shapes[rng.integers(len(schema.shapes))],
            schema.colors[rng.integers(len(schema.colors))],
            schema.sizes[rng.integers(len(schema.sizes))],
        )
        for _ in range(n)
    )
    relations = tuple((schema.relations[rng.integers(len(schema.relations))], k, k + 1) for k in range(n - 1))
    return Scene(objects, relations)


def encode_scene(scene: Scene, schema: AttributeSchema) -> np.ndarray:
    """Concatenated one-hot encoding: per object slot [present, shape, color, size], then relation slots."""
    out = np.zeros(schema.encoding_dim())
    per_obj = 1 + len(schema.shapes) + len(schema.colors) + len(schema.sizes)
    for k, (shape, color, size) in enumerate(scene.objects):
        base = k * per_obj
        out[base] = 1.0
        out[base + 1 + schema.shapes.index(shape)] = 1.0
        out[base + 1 + len(schema.shapes) + schema.colors.index(color)] = 1.0
        out[base + 1 + len(schema.shapes) + len(schema.colors) + schema.sizes.index(size)] = 1.0
    rel_base = schema.max_objects * per_obj
    for rel, i, j in scene.relations:
        slot = min(i, j)
        out[rel_base + slot * len(schema.relations) + schema.relations.index(rel)] = 1.0
    return out


class Renderer:
    """Fixed random projection of scene encodings into ``d_img`` features."""

    def __init__(self, schema: AttributeSchema, d_img: int = 64, projection_seed: int = 0):
        self.schema = schema
        self.d_img = d_img
        rng = np.random.default_rng(projection_seed)
        # about four active one-hot entries per object; halve to keep features O(1)
        self.projection = rng.normal(size=(schema.encoding_dim(), d_img)) / 2.0

    def render(self, scene: Scene, noise_std: float = 0.0, rng_seed=None) -> np.ndarray:
        if noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        feats = encode_scene(scene, self.schema) @ self.projection
        if noise_std > 0:
            feats = feats + np.random.default_rng(rng_seed).normal(0.0, noise_std, size=self.d_img)
        return feats.astype(np.float32)


def _object_phrase(obj: tuple[str, str, str]) -> list[tuple[str, str]]:
    shape, color, size = obj
    return [("a", "DET"), (size, "ADJ"), (color, "ADJ"), (shape, "NOUN")]


def caption_scene(scene: Scene, grammar_seed=None) -> Caption:
    rng = np.random.default_rng(grammar_seed)
    n = len(scene.objects)
    rels = {min(i, j): (rel if i < j else INVERSE_RELATIONS.get(rel, rel)) for rel, i, j in scene.relations}
    mirrored = False
    if n > 1 and all(r in INVERSE_RELATIONS for r in rels.values()):
        mirrored = bool(rng.random() < 0.5)
    order = list(range(n))[::-1] if mirrored else list(range(n))
    pairs: list[tuple[str, str]] = []
    for pos, k in enumerate(order):
        if pos:
            prev = order[pos - 1]
            rel = rels[min(prev, k)]
            if mirrored:
                rel = INVERSE_RELATIONS[rel]
            pairs += [("is", "VERB"), (rel, "ADP")]
        pairs += _object_phrase(scene.objects[k])
    words, tags = zip(*pairs)
    return Caption(tuple(words), tuple(tags))


class Vocabulary:
    def __init__(self, tokens: Sequence[str], cap: int = 200):
        tokens = list(tokens)
        if tokens[: len(RESERVED)] != list(RESERVED):
            raise ConfigError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigError("duplicate vocabulary tokens")
        if len(tokens) > cap:
            raise ConfigError(f"vocabulary of {len(tokens)} tokens exceeds cap {cap}")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.cap = cap

    @classmethod
    def from_words(cls, words, cap: int = 200) -> "Vocabulary":
        return cls(list(RESERVED) + sorted(set(words)), cap)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words: Sequence[str]) -> list[int]:
        return [self.index[w] for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def dumps(self) -> str:
        return "".join(t + "\n" for t in self.tokens)

    @classmethod
    def loads(cls, text: str, cap: int = 200) -> "Vocabulary":
        return cls(text.splitlines(), cap)


@dataclass
class Split:
    name: str
    ids: np.ndarray
    scenes: list[Scene]
    features: np.ndarray  # (n, d_img) float32
    captions: list[Caption]
    caption_ids: list[list[int]]

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class WorldSeeds:
    scene: int = 0
    projection: int = 1
    noise: int = 2
    grammar: int = 3
    split: int = 4


@dataclass
class DatasetSplit:
    train: Split
    val: Split
    test: Split
    vocab: Vocabulary
    schema: AttributeSchema
    seeds: WorldSeeds = field(default_factory=WorldSeeds)
    noise_std: float = 0.1
    d_img: int = 64

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]

    @property
    def splits(self) -> tuple[Split, Split, Split]:
        return self.train, self.val, self.test

    def tag_of(self, token_id: int) -> str | None:
        return self.schema.tag_map().get(self.vocab.tokens[int(token_id)])

    def corpus_bytes(self) -> bytes:
        rows = []
        for sp in self.splits:
            for k in range(len(sp)):
                rec = {
                    "id": int(sp.ids[k]),
                    "split": sp.name,
                    "scene": sp.scenes[k].to_dict(),
                    "features": [float(v) for v in sp.features[k]],
                    "tokens": sp.caption_ids[k],
                    "pos": list(sp.captions[k].tags),
                }
                rows.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        rows.sort(key=lambda r: json.loads(r)["id"])
        return ("\n".join(rows) + "\n").encode("utf-8")

    def fingerprint(self) -> str:
        return corpus_fingerprint(self.corpus_bytes())

    def meta(self) -> dict:
        return {
            "schema": self.schema.to_dict(),
            "seeds": vars(self.seeds),
            "noise_std": self.noise_std,
            "d_img": self.d_img,
            "vocab_cap": self.vocab.cap,
        }

    def save(self, directory) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"corpus": d / "corpus.jsonl", "vocab": d / "vocab.txt", "meta": d / "world.json"}
        paths["corpus"].write_bytes(self.corpus_bytes())
        paths["vocab"].write_text(self.vocab.dumps())
        paths["meta"].write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n")
        return paths

    @classmethod
    def load(cls, directory) -> "DatasetSplit":
        d = Path(directory)
        meta = json.loads((d / "world.json").read_text())
        schema = AttributeSchema(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in meta["schema"].items()})
        vocab = Vocabulary.loads((d / "vocab.txt").read_text(), meta.get("vocab_cap", 200))
        buckets: dict[str, list] = {"train": [], "val": [], "test": []}
        with open(d / "corpus.jsonl", encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                buckets[rec["split"]].append(rec)
        splits = []
        for name in ("train", "val", "test"):
            recs = buckets[name]
            splits.append(
                Split(
                    name=name,
                    ids=np.array([r["id"] for r in recs], dtype=np.int64),
                    scenes=[Scene.from_dict(r["scene"]) for r in recs],
                    features=np.array([r["features"] for r in recs], dtype=np.float32).reshape(len(recs), meta["d_img"]),
                    captions=[Caption(tuple(vocab.decode(r["tokens"])), tuple(r["pos"])) for r in recs],
                    caption_ids=[list(r["tokens"]) for r in recs],
                )
            )
        return cls(*splits, vocab=vocab, schema=schema, seeds=WorldSeeds(**meta["seeds"]),
                   noise_std=meta["noise_std"], d_img=meta["d_img"])


def corpus_fingerprint(data: bytes) -> str:
    """64-bit content hash, hex encoded."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def build_dataset(
    schema: AttributeSchema,
    n_items: int,
    seeds: WorldSeeds | None = None,
    noise_std: float = 0.1,
    d_img: int = 64,
    vocab_cap: int = 200,
) -> DatasetSplit:
    """Generate ``n_items`` scenes and split them 80/10/10 by a seeded shuffle.

    Each item draws scene, noise and grammar choices from seeds derived from
    ``(seed, item index)``, so items are independent of generation order.
    """
    if n_items < 10:
        raise ConfigError("n_items must be >= 10")
    seeds = seeds or WorldSeeds()
    renderer = Renderer(schema, d_img, seeds.projection)
    scenes = [generate_scene(schema, (seeds.scene, i)) for i in range(n_items)]
    feats = np.stack([renderer.render(s, noise_std, (seeds.noise, i)) for i, s in enumerate(scenes)])
    caps = [caption_scene(s, (seeds.grammar, i)) for i, s in enumerate(scenes)]
    vocab = Vocabulary.from_words([w for c in caps for w in c.words], cap=vocab_cap)
    cap_ids = [vocab.encode(c.words) for c in caps]

    order = np.random.default_rng(seeds.split).permutation(n_items)
    n_train, n_val = int(0.8 * n_items), int(0.1 * n_items)
    parts = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    splits = []
    for name, idx in parts.items():
        idx = np.sort(idx)
        splits.append(
            Split(
                name=name,
                ids=idx.astype(np.int64),
                scenes=[scenes[i] for i in idx],
                features=feats[idx],
                captions=[caps[i] for i in idx],
                caption_ids=[cap_ids[i] for i in idx],
            )
        )
    return DatasetSplit(*splits, vocab=vocab, schema=schema, seeds=seeds, noise_std=noise_std, d_img=d_img)
