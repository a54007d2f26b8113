"""Soft prompt bank and prompt assembly.

Three prompt families share one bank of learnable context vectors:

* attribute-guided: ``[p_1 .. p_M, class tokens, attribute tokens]``
* negative:         ``[p_1 .. p_M, negative tokens, class tokens]``
* textual:          template words + class tokens (+ attribute tokens), fully frozen

The negative family deliberately places the negative attribute *before* the
class name; the encoder is order-sensitive, so the two orderings produce
different embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .encoders import Vocabulary
from .errors import (
    PhraseLengthMismatch,
    SequenceTooLong,
    UnknownAttribute,
    UnknownClass,
    UnknownNegative,
)


class SoftPromptBank:
    """The M learnable context token vectors. The only trainable state."""

    def __init__(self, vectors: np.ndarray, init_descriptor: str = "custom"):
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError("bank expects an (M, d_tok) array")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("bank initialization contains non-finite values")
        self._params = [Tensor(row.copy(), requires_grad=True) for row in vectors]
        self.init_descriptor = init_descriptor

    @property
    def m(self) -> int:
        return len(self._params)

    @property
    def d_tok(self) -> int:
        return int(self._params[0].shape[0]) if self._params else 0

    @property
    def tokens(self) -> list[Tensor]:
        """Live parameter tensors; assemblies hold these by reference."""
        return list(self._params)

    def values(self) -> np.ndarray:
        if not self._params:
            return np.zeros((0, 0))
        return np.stack([p.data.copy() for p in self._params])

    def set_values(self, vectors: np.ndarray) -> None:
        vectors = np.asarray(vectors, dtype=np.float64)
        if vectors.shape != (self.m, self.d_tok):
            raise ValueError(f"expected shape {(self.m, self.d_tok)}, got {vectors.shape}")
        for param, row in zip(self._params, vectors):
            param.data[...] = row

    def zero_grad(self) -> None:
        for p in self._params:
            p.zero_grad()

    def gradient(self) -> np.ndarray:
        """Current gradient, with never-visited parameters read as zero."""
        rows = [p.grad if p.grad is not None else np.zeros_like(p.data)
                for p in self._params]
        return np.stack(rows) if rows else np.zeros((0, 0))


def init_soft_prompts(vocab: Vocabulary, m: int, phrase: str, seed: int) -> SoftPromptBank:
    """Initialize the bank from a phrase's word embeddings, or Gaussian noise.

    A non-empty phrase must tokenize to exactly ``m`` words; their embedding
    rows are copied (never aliased) so training cannot touch the vocabulary.
    An empty phrase draws a seeded Gaussian with std 0.02.
    """
    if phrase.strip():
        words = phrase.split()
        if len(words) != m:
            raise PhraseLengthMismatch(
                f"phrase {phrase!r} has {len(words)} tokens, bank needs {m}")
        rows = np.stack([vocab.embedding_of(w) for w in words])
        return SoftPromptBank(rows, init_descriptor=f"phrase:{phrase}")
    rng = np.random.default_rng(seed)
    rows = rng.normal(0.0, 0.02, size=(m, vocab.d_tok))
    return SoftPromptBank(rows, init_descriptor=f"gaussian:seed={seed}")


@dataclass
class PromptCatalog:
    """Names and attribute strings addressable by (class_id, attribute_id)."""

    class_names: list[str]
    attributes: list[list[str]] = field(default_factory=list)
    negatives: list[str] | None = None  # per-class negative attribute text
    template: str = "a photo of a"
    max_len: int = 16

    def __post_init__(self):
        if not self.attributes:
            self.attributes = [[] for _ in self.class_names]
        if len(self.attributes) != len(self.class_names):
            raise UnknownClass("attribute lists and class names disagree in length")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def check_class(self, class_id: int) -> None:
        if not (0 <= class_id < self.n_classes):
            raise UnknownClass(f"class id {class_id} outside [0, {self.n_classes})")


@dataclass
class PromptAssembly:
    """An ordered token-vector sequence ready for the text encoder."""

    tokens: list  # Tensor entries are live bank references; ndarrays are frozen
    kind: str
    class_id: int | None = None
    attribute_id: int | None = None

    def __len__(self) -> int:
        return len(self.tokens)


def _frozen_rows(text: str, vocab: Vocabulary) -> list[np.ndarray]:
    return [vocab.embedding_of(word) for word in text.split()]


def _check_length(tokens: Sequence, max_len: int) -> None:
    if len(tokens) > max_len:
        raise SequenceTooLong(f"assembled prompt of {len(tokens)} exceeds {max_len}")


def assemble_attribute_prompt(bank: SoftPromptBank, catalog: PromptCatalog,
                              class_id: int, attribute_id: int | None,
                              vocab: Vocabulary) -> PromptAssembly:
    """Soft tokens, then the class name, then the attribute (when given)."""
    catalog.check_class(class_id)
    tokens: list = bank.tokens
    tokens += _frozen_rows(catalog.class_names[class_id], vocab)
    if attribute_id is not None:
        attrs = catalog.attributes[class_id]
        if not (0 <= attribute_id < len(attrs)):
            raise UnknownAttribute(
                f"attribute id {attribute_id} outside [0, {len(attrs)}) for class {class_id}")
        tokens += _frozen_rows(attrs[attribute_id], vocab)
    _check_length(tokens, catalog.max_len)
    return PromptAssembly(tokens, "attribute-guided", class_id, attribute_id)


def assemble_negative_prompt(bank: SoftPromptBank, catalog: PromptCatalog,
                             class_id: int, vocab: Vocabulary) -> PromptAssembly:
    """Soft tokens, then the negative attribute, then the class name."""
    catalog.check_class(class_id)
    if catalog.negatives is None:
        raise UnknownNegative("catalog defines no negative attributes")
    tokens: list = bank.tokens
    tokens += _frozen_rows(catalog.negatives[class_id], vocab)
    tokens += _frozen_rows(catalog.class_names[class_id], vocab)
    _check_length(tokens, catalog.max_len)
    return PromptAssembly(tokens, "negative", class_id)


def assemble_textual_prompt(catalog: PromptCatalog, class_id: int,
                            attribute_id: int | None, vocab: Vocabulary) -> PromptAssembly:
    """Hand-written template prompt; contains no trainable tokens."""
    catalog.check_class(class_id)
    tokens: list = _frozen_rows(catalog.template, vocab)
    tokens += _frozen_rows(catalog.class_names[class_id], vocab)
    if attribute_id is not None:
        attrs = catalog.attributes[class_id]
        if not (0 <= attribute_id < len(attrs)):
            raise UnknownAttribute(
                f"attribute id {attribute_id} outside [0, {len(attrs)}) for class {class_id}")
        tokens += _frozen_rows(attrs[attribute_id], vocab)
    _check_length(tokens, catalog.max_len)
    return PromptAssembly(tokens, "textual", class_id, attribute_id)
