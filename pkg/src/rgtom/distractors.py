"""Similarity-based distractor mining and game sampling.

Index file layout (little-endian)::

    b"RGIX" | u32 version | u32 json_len | descriptor JSON | u32 K | u64 fingerprint | u32 n_items
    n_items records of K x (u32 neighbour position, f32 score)

Neighbour ids are positions within the indexed split.
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from rgtom.errors import ConfigError, SamplingError, StaleArtifactError
from rgtom.nnkit import no_grad
from rgtom.world import Split

VISUAL = "VISUAL"
CAPTION_ONEHOT = "CAPTION_ONEHOT"
CAPTION_TFIDF = "CAPTION_TFIDF"
CAPTION_DENSE = "CAPTION_DENSE"
HYBRID = "HYBRID"
VARIANTS = (VISUAL, CAPTION_ONEHOT, CAPTION_TFIDF, CAPTION_DENSE, HYBRID)
CAPTION_VARIANTS = (CAPTION_ONEHOT, CAPTION_TFIDF, CAPTION_DENSE)

EASY, HARD = "EASY", "HARD"
INDEX_MAGIC = b"RGIX"
INDEX_VERSION = 1
TIE_DECIMALS = 9


def cosine(u, v) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def hybrid_score(visual_sim: float, caption_sim: float, w_c: float) -> float:
    if not 0 <= w_c <= 1:
        raise ValueError("w_c must lie in [0, 1]")
    return w_c * caption_sim + (1 - w_c) * visual_sim


@dataclass
class TfidfModel:
    doc_freq: dict[int, int]
    n_docs: int
    idf: dict[int, float]

    def idf_of(self, token: int) -> float:
        # unseen tokens get the rarest possible weight, ln(N / 1)
        return self.idf.get(token, math.log(self.n_docs))


def tfidf_fit(captions: Sequence[Sequence[int]]) -> TfidfModel:
    if not captions:
        raise ValueError("tf-idf needs a non-empty corpus")
    df: Counter = Counter()
    for cap in captions:
        df.update(set(cap))
    n = len(captions)
    return TfidfModel(dict(df), n, {t: math.log(n / c) for t, c in df.items()})


def tfidf_vector(model: TfidfModel, caption: Sequence[int]) -> dict[int, float]:
    """Sparse ``token -> raw count * idf``."""
    return {t: c * model.idf_of(t) for t, c in Counter(caption).items()}


def _dense_rows(rows: Sequence[dict[int, float]], dim: int) -> np.ndarray:
    out = np.zeros((len(rows), dim))
    for i, row in enumerate(rows):
        for t, w in row.items():
            out[i, t] = w
    return out


def caption_dense_vector(encoder, caption: Sequence[int]) -> np.ndarray:
    """Sentence embedding ``L(u)`` from a pretrained listener's caption encoder."""
    if encoder is None:
        raise ConfigError("dense caption similarity needs a listener encoder")
    with no_grad():
        return encoder.encode_utterances([list(caption)]).data[0].astype(np.float64)


@dataclass(frozen=True)
class SimilarityMetric:
    """Which similarity to rank neighbours by.

    ``caption_variant`` selects the caption half of HYBRID. ``dense_pooling``
    is ``"encoder"`` (final recurrent state) or ``"tfidf"`` (tf-idf weighted
    mean of the encoder's token embeddings).
    """

    variant: str = HYBRID
    w_c: float | None = 0.5
    caption_variant: str = CAPTION_TFIDF
    dense_pooling: str = "encoder"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown similarity variant {self.variant!r}")
        if (self.variant == HYBRID) != (self.w_c is not None):
            raise ConfigError("w_c is required for HYBRID and only for HYBRID")
        if self.w_c is not None and not 0 <= self.w_c <= 1:
            raise ConfigError("w_c must lie in [0, 1]")
        if self.caption_variant not in CAPTION_VARIANTS:
            raise ConfigError(f"unknown caption variant {self.caption_variant!r}")
        if self.dense_pooling not in ("encoder", "tfidf"):
            raise ConfigError(f"unknown dense pooling {self.dense_pooling!r}")

    @classmethod
    def of(cls, variant: str, w_c: float | None = None, **kw) -> "SimilarityMetric":
        if variant == HYBRID and w_c is None:
            w_c = 0.5
        return cls(variant=variant, w_c=w_c if variant == HYBRID else None, **kw)

    @property
    def needs_encoder(self) -> bool:
        cap = self.variant if self.variant != HYBRID else self.caption_variant
        return cap == CAPTION_DENSE

    def descriptor(self) -> dict:
        return asdict(self)


def _normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 0)


def caption_vectors(split: Split, variant: str, vocab_size: int, encoder=None, pooling: str = "encoder") -> np.ndarray:
    caps = split.caption_ids
    if variant == CAPTION_ONEHOT:
        return _dense_rows([{t: 1.0 for t in set(c)} for c in caps], vocab_size)
    if variant == CAPTION_TFIDF:
        model = tfidf_fit(caps)
        return _dense_rows([tfidf_vector(model, c) for c in caps], vocab_size)
    if variant == CAPTION_DENSE:
        if encoder is None:
            raise ConfigError("dense caption similarity needs a listener encoder")
        if pooling == "tfidf":
            model = tfidf_fit(caps)
            weights = _dense_rows([tfidf_vector(model, c) for c in caps], vocab_size)
            return weights @ encoder.params["emb.E"].data.astype(np.float64)
        with no_grad():
            return np.concatenate(
                [encoder.encode_utterances(caps[i : i + 512]).data for i in range(0, len(caps), 512)]
            ).astype(np.float64)
    raise ConfigError(f"not a caption variant: {variant!r}")


def item_vectors(split: Split, metric: SimilarityMetric, vocab_size: int, encoder=None) -> tuple[np.ndarray, ...]:
    """Unit-normalised vectors whose dot products give the metric's similarity parts."""
    if metric.variant == VISUAL:
        return (_normalize(split.features),)
    if metric.variant in CAPTION_VARIANTS:
        return (_normalize(caption_vectors(split, metric.variant, vocab_size, encoder, metric.dense_pooling)),)
    vis = _normalize(split.features)
    cap = _normalize(caption_vectors(split, metric.caption_variant, vocab_size, encoder, metric.dense_pooling))
    return vis, cap


def similarity_rows(vectors: tuple[np.ndarray, ...], rows: slice, metric: SimilarityMetric) -> np.ndarray:
    if metric.variant == HYBRID:
        vis, cap = vectors
        return hybrid_score(vis[rows] @ vis.T, cap[rows] @ cap.T, metric.w_c)
    (v,) = vectors
    return v[rows] @ v.T


@dataclass
class SimilarityIndex:
    neighbors: np.ndarray  # (n, K) uint32 positions within the split
    scores: np.ndarray  # (n, K) float32, non-increasing per row
    metric: SimilarityMetric
    fingerprint: str
    split: str = "train"
    extra: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.neighbors.shape[1]

    def __len__(self) -> int:
        return self.neighbors.shape[0]

    def header(self) -> dict:
        return {"metric": self.metric.descriptor(), "split": self.split, **self.extra}

    def dumps(self) -> bytes:
        desc = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        n, k = self.neighbors.shape
        head = INDEX_MAGIC + struct.pack("<II", INDEX_VERSION, len(desc)) + desc
        head += struct.pack("<IQI", k, int(self.fingerprint, 16), n)
        rec = np.empty((n, k), dtype=[("id", "<u4"), ("score", "<f4")])
        rec["id"] = self.neighbors
        rec["score"] = self.scores
        return head + rec.tobytes()

    def save(self, path) -> None:
        from rgtom.nnkit.checkpoint import atomic_write

        atomic_write(path, self.dumps())

    @classmethod
    def loads(cls, data: bytes, expect_fingerprint: str | None = None) -> "SimilarityIndex":
        if data[:4] != INDEX_MAGIC:
            raise StaleArtifactError("not a similarity index")
        version, jlen = struct.unpack_from("<II", data, 4)
        if version != INDEX_VERSION:
            raise StaleArtifactError(f"unsupported index version {version}")
        off = 12
        header = json.loads(data[off : off + jlen])
        off += jlen
        k, fp, n = struct.unpack_from("<IQI", data, off)
        off += 16
        fingerprint = f"{fp:016x}"
        if expect_fingerprint is not None and fingerprint != expect_fingerprint:
            raise StaleArtifactError(f"index built for dataset {fingerprint}, expected {expect_fingerprint}")
        rec = np.frombuffer(data, dtype=[("id", "<u4"), ("score", "<f4")], count=n * k, offset=off).reshape(n, k)
        metric = SimilarityMetric(**header.pop("metric"))
        split = header.pop("split")
        return cls(rec["id"].astype(np.uint32), rec["score"].astype(np.float32), metric, fingerprint, split, header)

    @classmethod
    def load(cls, path, expect_fingerprint: str | None = None) -> "SimilarityIndex":
        return cls.loads(Path(path).read_bytes(), expect_fingerprint)


def build_index(
    split: Split,
    metric: SimilarityMetric,
    k: int,
    vocab_size: int,
    fingerprint: str,
    encoder=None,
    block: int = 512,
) -> SimilarityIndex:
    """Exact top-``k`` neighbours per item, self excluded.

    Scores are ranked after rounding to ``TIE_DECIMALS`` places so that
    float noise cannot split exact ties; ties go to the lower position.
    """
    n = len(split)
    if not 0 < k < n:
        raise ConfigError(f"K={k} must be in [1, {n - 1}]")
    vectors = item_vectors(split, metric, vocab_size, encoder)
    neighbors = np.empty((n, k), dtype=np.uint32)
    scores = np.empty((n, k), dtype=np.float32)
    for start in range(0, n, block):
        rows = slice(start, min(start + block, n))
        sims = similarity_rows(vectors, rows, metric)
        idx = np.arange(rows.start, rows.stop)
        sims[idx - start, idx] = -np.inf
        keyed = -np.round(sims, TIE_DECIMALS)
        order = np.argsort(keyed, axis=1, kind="stable")[:, :k]
        neighbors[rows] = order
        scores[rows] = np.take_along_axis(sims, order, axis=1)
    return SimilarityIndex(neighbors, scores, metric, fingerprint, split.name)


@dataclass
class Game:
    target: int  # position of the target in ``candidates``
    candidates: np.ndarray  # item positions within the split
    target_item: int

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


def sample_game(
    split: Split,
    index: SimilarityIndex | None,
    n_distractors: int,
    mode: str,
    rng,
    target_item: int | None = None,
    rank_weighted: bool = False,
) -> Game:
    """EASY: distractors uniform over the split. HARD: uniform over the target's top-K list."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = len(split)
    target_item = int(rng.integers(n)) if target_item is None else int(target_item)
    if mode == EASY:
        if n_distractors > n - 1:
            raise SamplingError("not enough items for the requested distractors")
        picks = rng.choice(n - 1, size=n_distractors, replace=False)
        distractors = picks + (picks >= target_item)
    elif mode == HARD:
        if index is None:
            raise SamplingError("HARD games need a similarity index")
        pool = index.neighbors[target_item]
        if len(pool) < n_distractors:
            raise SamplingError(f"top-K list of {len(pool)} shorter than {n_distractors} distractors")
        p = None
        if rank_weighted:
            w = 1.0 / np.arange(1, len(pool) + 1)
            p = w / w.sum()
        distractors = rng.choice(pool, size=n_distractors, replace=False, p=p).astype(np.int64)
    else:
        raise ConfigError(f"unknown distractor mode {mode!r}")
    cands = np.concatenate([[target_item], distractors]).astype(np.int64)
    perm = rng.permutation(len(cands))
    cands = cands[perm]
    return Game(int(np.flatnonzero(perm == 0)[0]), cands, target_item)


def sample_games(split: Split, index: SimilarityIndex | None, n_games: int, n_distractors: int, mode: str,
                 seed) -> list[Game]:
    """A fixed, seed-determined list of games, e.g. for paired evaluation."""
    rng = np.random.default_rng(seed)
    return [sample_game(split, index, n_distractors, mode, rng) for _ in range(n_games)]
