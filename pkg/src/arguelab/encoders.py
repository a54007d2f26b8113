"""Frozen, seeded tokenizer and dual encoder defining the shared embedding space.

The text encoder is a two-layer position-wise MLP over token vectors with
sinusoidal position encodings, a multiplicative context gate driven by the
sequence mean, mean pooling over positions, and unit normalization. It is
differentiable with respect to its input token vectors, which is how training
gradients reach the soft prompt bank. The image encoder is a single frozen
affine map followed by unit normalization.

All weights are drawn once from a seeded generator and never mutated.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, as_tensor, l2_normalize, stack_rows
from .errors import (
    DimensionMismatch,
    DuplicateToken,
    EmptySequence,
    EmptySpec,
    SequenceTooLong,
    UnknownToken,
    VersionMismatch,
)

PAD_TOKEN = "<pad>"
VOCAB_FORMAT_VERSION = 1


def _semi_orthogonal(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    """Seeded (n_in, n_out) matrix with orthonormal rows or columns.

    Keeps the token-to-embedding map well conditioned, which the synthetic
    benchmark's embedding planting relies on.
    """
    q, _ = np.linalg.qr(rng.normal(size=(max(n_in, n_out), min(n_in, n_out))))
    return q.T if n_in < n_out else q


def sinusoid_position_encodings(max_len: int, dim: int, scale: float = 0.15) -> np.ndarray:
    """Fixed sin/cos position table, scaled down so tokens dominate positions."""
    positions = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angles), np.cos(angles))
    return table * scale


class Vocabulary:
    """Bijection between non-PAD tokens and ids, plus one embedding row per id."""

    def __init__(self, d_tok: int, seed: int, tokens: list[str], embeddings: np.ndarray):
        if len(tokens) != embeddings.shape[0]:
            raise DimensionMismatch("token list and embedding table disagree")
        self.d_tok = int(d_tok)
        self.seed = int(seed)
        self._tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(tokens)}
        if len(self._ids) != len(tokens):
            raise DuplicateToken("duplicate token text in vocabulary")
        self.embeddings = np.ascontiguousarray(embeddings, dtype=np.float64)
        self.embeddings.setflags(write=False)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise UnknownToken(token) from None

    def token_of(self, token_id: int) -> str:
        return self._tokens[token_id]

    def embedding_of(self, token: str) -> np.ndarray:
        return self.embeddings[self.id_of(token)]

    def to_json_dict(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "seed": self.seed,
            "d_tok": self.d_tok,
            "tokens": [
                {"id": i, "text": t, "embedding": self.embeddings[i].tolist()}
                for i, t in enumerate(self._tokens)
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "Vocabulary":
        if payload.get("version") != VOCAB_FORMAT_VERSION:
            raise VersionMismatch(f"unsupported vocabulary version {payload.get('version')}")
        rows = sorted(payload["tokens"], key=lambda r: r["id"])
        if [r["id"] for r in rows] != list(range(len(rows))):
            raise VersionMismatch("vocabulary ids are not contiguous")
        table = np.array([r["embedding"] for r in rows], dtype=np.float64)
        return cls(payload["d_tok"], payload["seed"], [r["text"] for r in rows], table)

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_json_dict(), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class VocabWords:
    """Every string that may appear in a prompt, grouped by role."""

    class_names: list[str]
    attribute_texts: list[str] = field(default_factory=list)
    negative_texts: list[str] = field(default_factory=list)
    template_words: list[str] = field(default_factory=list)

    def all_words(self) -> list[str]:
        words: list[str] = []
        for text in (self.template_words + self.class_names
                     + self.attribute_texts + self.negative_texts):
            words.extend(text.split())
        return words


def build_vocabulary(words: VocabWords, d_tok: int, seed: int,
                     planted: Mapping[str, np.ndarray] | None = None) -> Vocabulary:
    """Register every prompt word exactly once and draw its embedding.

    Planted tokens take the supplied embedding verbatim; free-form tokens get
    a seeded Gaussian draw scaled to unit norm. Registering the same token
    with two different planted embeddings is an error; re-registering a
    free-form token is a no-op (shared strings share ids).
    """
    if not words.class_names:
        raise EmptySpec("vocabulary spec lists no classes")
    planted = dict(planted or {})
    rng = np.random.default_rng(seed)
    tokens: list[str] = [PAD_TOKEN]
    rows: list[np.ndarray] = [np.zeros(d_tok)]
    seen: dict[str, int] = {PAD_TOKEN: 0}
    for word in words.all_words():
        if word in seen:
            if word in planted:
                prior = rows[seen[word]]
                if not np.array_equal(prior, np.asarray(planted[word], dtype=np.float64)):
                    raise DuplicateToken(f"token {word!r} planted with conflicting embeddings")
            continue
        if word in planted:
            row = np.asarray(planted[word], dtype=np.float64)
            if row.shape != (d_tok,):
                raise DimensionMismatch(f"planted embedding for {word!r} has shape {row.shape}")
        else:
            draw = rng.normal(size=d_tok)
            row = draw / np.linalg.norm(draw)
        seen[word] = len(tokens)
        tokens.append(word)
        rows.append(row)
    return Vocabulary(d_tok, seed, tokens, np.array(rows))


def tokenize(text: str, vocab: Vocabulary, max_len: int | None = None) -> list[int]:
    """Whitespace tokenizer over a closed vocabulary. Never truncates."""
    ids = [vocab.id_of(word) for word in text.split()]
    if max_len is not None and len(ids) > max_len:
        raise SequenceTooLong(f"{len(ids)} tokens exceed the limit of {max_len}")
    return ids


class TextEncoder:
    """Order-aware frozen text encoder, differentiable w.r.t. input tokens."""

    def __init__(self, seed: int, d_tok: int = 32, d_out: int = 32,
                 d_hidden: int = 48, max_len: int = 16, gate_strength: float = 1.0):
        self.seed = int(seed)
        self.d_tok = int(d_tok)
        self.d_out = int(d_out)
        self.d_hidden = int(d_hidden)
        self.max_len = int(max_len)
        self.gate_strength = float(gate_strength)
        rng = np.random.default_rng(seed)
        self.w1 = 0.7 * _semi_orthogonal(rng, d_tok, d_hidden)
        self.b1 = rng.normal(0.0, 0.01, size=d_hidden)
        self.w2 = _semi_orthogonal(rng, d_hidden, d_out)
        self.b2 = rng.normal(0.0, 0.01, size=d_out)
        self.w_gate = rng.normal(0.0, 1.2 / np.sqrt(d_tok), size=(d_tok, d_hidden))
        self.positions = sinusoid_position_encodings(max_len, d_tok)
        for arr in (self.w1, self.b1, self.w2, self.b2, self.w_gate, self.positions):
            arr.setflags(write=False)

    @property
    def token_map(self) -> np.ndarray:
        """Linearized token-to-output map (w1 @ w2), used for embedding planting."""
        return self.w1 @ self.w2

    def encode(self, token_vectors: Sequence[Tensor | np.ndarray]) -> Tensor:
        if len(token_vectors) == 0:
            raise EmptySequence("cannot encode an empty token sequence")
        if len(token_vectors) > self.max_len:
            raise SequenceTooLong(
                f"sequence of {len(token_vectors)} exceeds max length {self.max_len}")
        parts = [as_tensor(v) for v in token_vectors]
        for p in parts:
            if p.shape != (self.d_tok,):
                raise DimensionMismatch(
                    f"token vector has shape {p.shape}, expected ({self.d_tok},)")
        x = stack_rows(parts)
        hidden = ((x + self.positions[: len(parts)]) @ self.w1 + self.b1).tanh()
        if self.gate_strength != 0.0:
            gate = (x.mean(axis=0) @ self.w_gate).tanh() * self.gate_strength + 1.0
            hidden = hidden * gate
        pooled = hidden.mean(axis=0)
        return l2_normalize(pooled @ self.w2 + self.b2)


class ImageEncoder:
    """Frozen affine map from raw feature vectors into the shared unit sphere.

    The linear part has orthonormal rows (angles between feature-space
    directions are preserved exactly); the bias is small but nonzero so the
    zero feature vector still has a defined embedding.
    """

    def __init__(self, seed: int, d_in: int = 24, d_out: int = 32,
                 bias_scale: float = 0.02):
        if d_out < d_in:
            raise DimensionMismatch("image encoder requires d_out >= d_in for injectivity")
        self.seed = int(seed)
        self.d_in = int(d_in)
        self.d_out = int(d_out)
        rng = np.random.default_rng(seed)
        q, _ = np.linalg.qr(rng.normal(size=(d_out, d_in)))
        self.weight = q.T.copy()  # (d_in, d_out), orthonormal rows
        self.bias = rng.normal(0.0, bias_scale, size=d_out)
        self.weight.setflags(write=False)
        self.bias.setflags(write=False)

    def encode(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.d_in:
            raise DimensionMismatch(
                f"features have dimension {features.shape[-1]}, expected {self.d_in}")
        raw = features @ self.weight + self.bias
        norms = np.linalg.norm(raw, axis=-1, keepdims=True)
        return raw / norms

    def map_direction(self, direction: np.ndarray) -> np.ndarray:
        """Image of a unit feature-space direction under the linear part (no bias)."""
        direction = np.asarray(direction, dtype=np.float64)
        return (direction / np.linalg.norm(direction)) @ self.weight
