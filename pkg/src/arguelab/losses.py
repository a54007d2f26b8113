"""Predictive distributions and loss terms.

Classification uses attribute-averaged softmax scores: per class, the
exponentiated cosine logits of all of its attribute prompts are summed before
normalizing across classes, which reduces to plain soft-prompt softmax when
each class has exactly one prompt. Regularization is a contrastive match
between each soft prompt and its own textual counterpart among all textual
prompts. The negative term penalizes any deviation from a uniform prediction
for negative prompts; it is minimal (ln C) exactly at uniform.

Batch variants operate on an (n, D) feature matrix and return an (n, C) row
distribution tensor; reductions over a batch are arithmetic means.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import PROB_FLOOR, Tensor, as_column, as_tensor, normalize_rows, stack_rows
from .errors import (
    DimensionMismatch,
    EmptyAttributeSet,
    EmptyTextualSet,
    NegativeWeight,
    NonPositiveTemperature,
)


def _is_tensor_input(*candidates) -> bool:
    for c in candidates:
        if isinstance(c, Tensor):
            return True
        if isinstance(c, (list, tuple)) and any(isinstance(x, Tensor) for x in c):
            return True
    return False


def _check_tau(tau: float) -> float:
    if tau <= 0:
        raise NonPositiveTemperature(f"temperature must be positive, got {tau}")
    return float(tau)


def _stack(embeddings: Sequence) -> Tensor:
    return stack_rows([as_tensor(e) for e in embeddings])


_unit_rows = normalize_rows


def _as_feature_matrix(features) -> Tensor:
    f = as_tensor(features)
    if f.ndim == 1:
        f = stack_rows([f])
    if f.ndim != 2:
        raise DimensionMismatch(f"features must be 1-D or 2-D, got shape {f.shape}")
    return f


def _row_softmax(scaled: Tensor) -> Tensor:
    shift = scaled - np.max(scaled.data, axis=1, keepdims=True)
    exps = shift.exp()
    return exps / as_column(exps.sum(axis=1))


def _maybe_squeeze(result: Tensor, single: bool, tensor_in: bool):
    if single:
        row = result.data[0]

        def backward(g, a=result):
            if a.requires_grad:
                a._accumulate(g[None, :])

        squeezed = Tensor._make(row, (result,), backward)
        return squeezed if tensor_in else squeezed.data
    return result if tensor_in else result.data


def _input_ndim(features) -> int:
    if isinstance(features, Tensor):
        return features.ndim
    return np.asarray(features).ndim


def _cosine_row_distribution(features, embeddings: Sequence, tau: float,
                             min_classes: int = 2):
    tau = _check_tau(tau)
    if len(embeddings) < min_classes:
        raise DimensionMismatch(f"need at least {min_classes} prompt embeddings")
    tensor_in = _is_tensor_input(features, list(embeddings))
    single = _input_ndim(features) == 1
    f = _as_feature_matrix(features)
    w = _unit_rows(_stack(embeddings))
    fn = _unit_rows(f)
    if fn.shape[1] != w.shape[1]:
        raise DimensionMismatch(
            f"feature dim {fn.shape[1]} != embedding dim {w.shape[1]}")
    scaled = (fn @ w.T) / tau
    return _maybe_squeeze(_row_softmax(scaled), single, tensor_in)


def zero_shot_distribution(features, text_embeddings: Sequence, tau: float):
    """Softmax over cosine similarities to hand-template class embeddings."""
    return _cosine_row_distribution(features, text_embeddings, tau)


def soft_prompt_distribution(features, soft_embeddings: Sequence, tau: float):
    """Softmax over cosine similarities to tuned class-name prompt embeddings."""
    return _cosine_row_distribution(features, soft_embeddings, tau)


def negative_distribution(features, negative_embeddings: Sequence, tau: float):
    """Class distribution induced by the negative prompts."""
    return _cosine_row_distribution(features, negative_embeddings, tau)


def attribute_averaged_distribution(features, per_class_embeddings: Sequence[Sequence],
                                    tau: float):
    """Class scores from summed exponentiated logits over each class's prompts.

    Accepts ragged per-class prompt lists; each class normalizes over whatever
    prompts it has. With one prompt per class this is exactly the plain
    soft-prompt softmax.
    """
    tau = _check_tau(tau)
    counts = [len(group) for group in per_class_embeddings]
    if len(counts) < 2:
        raise DimensionMismatch("need at least 2 classes")
    if any(c == 0 for c in counts):
        raise EmptyAttributeSet("every class needs at least one prompt embedding")
    flat = [e for group in per_class_embeddings for e in group]
    tensor_in = _is_tensor_input(features, flat)
    single = _input_ndim(features) == 1
    f = _as_feature_matrix(features)
    w = _unit_rows(_stack(flat))
    fn = _unit_rows(f)
    if fn.shape[1] != w.shape[1]:
        raise DimensionMismatch(
            f"feature dim {fn.shape[1]} != embedding dim {w.shape[1]}")
    scaled = (fn @ w.T) / tau
    shift = scaled - np.max(scaled.data, axis=1, keepdims=True)
    exps = shift.exp()
    segment = np.zeros((sum(counts), len(counts)))
    start = 0
    for c, n in enumerate(counts):
        segment[start:start + n, c] = 1.0
        start += n
    class_sums = exps @ segment
    denom = as_column(class_sums.sum(axis=1))
    return _maybe_squeeze(class_sums / denom, single, tensor_in)


def classification_loss(distributions, labels):
    """Mean cross entropy of row distributions at the ground-truth classes."""
    tensor_in = isinstance(distributions, Tensor)
    p = as_tensor(distributions)
    if p.ndim == 1:
        p = stack_rows([p])
        labels = [int(labels)] if np.ndim(labels) == 0 else labels
    labels = np.asarray(labels, dtype=int)
    n, c = p.shape
    if labels.shape != (n,):
        raise DimensionMismatch(f"expected {n} labels, got shape {labels.shape}")
    onehot = np.zeros((n, c))
    onehot[np.arange(n), labels] = 1.0
    out = -(p.clip_min(PROB_FLOOR).log() * onehot).sum() / float(n)
    return out if tensor_in else float(out.data)


def regularization_distribution(soft_embedding, textual_per_class: Sequence[Sequence],
                                tau: float):
    """Match distribution of one soft prompt over all flattened textual prompts."""
    tau = _check_tau(tau)
    flat = [e for group in textual_per_class for e in group]
    if not flat:
        raise EmptyTextualSet("no textual prompt embeddings")
    return _cosine_row_distribution(soft_embedding, flat, tau, min_classes=1)


def regularization_loss(soft_per_class: Sequence[Sequence],
                        textual_per_class: Sequence[Sequence], tau: float):
    """Contrastive pull of each soft prompt toward its own textual counterpart.

    Positives sit on the diagonal of the (soft x textual) similarity matrix;
    every other textual prompt acts as a negative. Reduced by the mean so the
    weight is comparable across class counts.
    """
    tau = _check_tau(tau)
    soft_counts = [len(g) for g in soft_per_class]
    text_counts = [len(g) for g in textual_per_class]
    if soft_counts != text_counts:
        raise DimensionMismatch(
            f"soft/textual sets misaligned: {soft_counts} vs {text_counts}")
    soft_flat = [e for group in soft_per_class for e in group]
    text_flat = [e for group in textual_per_class for e in group]
    if not text_flat:
        raise EmptyTextualSet("no textual prompt embeddings")
    tensor_in = _is_tensor_input(soft_flat)
    k = len(soft_flat)
    s = _unit_rows(_stack(soft_flat))
    t = _unit_rows(_stack(text_flat))
    scaled = (s @ t.T) / tau
    p = _row_softmax(scaled)
    eye = np.eye(k)
    out = -(p.clip_min(PROB_FLOOR).log() * eye).sum() / float(k)
    return out if tensor_in else float(out.data)


def negative_loss(negative_distributions):
    """Mean negative log-probability over classes (and samples, when batched).

    Minimized, the value is ln C, attained exactly when every row is uniform;
    any concentration of mass raises it. This is the uniformity pressure
    applied to negative-prompt predictions.
    """
    tensor_in = isinstance(negative_distributions, Tensor)
    p = as_tensor(negative_distributions)
    if p.ndim == 1:
        p = stack_rows([p])
    out = -(p.clip_min(PROB_FLOOR).log()).mean(axis=None)
    return out if tensor_in else float(out.data)


def total_loss(l_ent, l_reg, l_neg, beta: float, gamma: float):
    """Weighted sum of the three terms; gamma = 0 drops negative prompting."""
    if beta < 0 or gamma < 0:
        raise NegativeWeight(f"weights must be non-negative, got beta={beta} gamma={gamma}")
    tensor_in = _is_tensor_input(l_ent, l_reg, l_neg)
    out = as_tensor(l_ent) + float(beta) * as_tensor(l_reg) + float(gamma) * as_tensor(l_neg)
    return out if tensor_in else float(out.data)


@dataclass
class PromptEmbeddingSet:
    """Aligned prompt embeddings plus the loss weights that consume them."""

    soft: list[list]
    textual: list[list]
    negative: list | None
    zero_shot: list | None
    tau: float
    beta: float
    gamma: float

    def __post_init__(self):
        _check_tau(self.tau)
        if self.beta < 0 or self.gamma < 0:
            raise NegativeWeight("beta and gamma must be non-negative")
        if [len(g) for g in self.soft] != [len(g) for g in self.textual]:
            raise DimensionMismatch("soft and textual sets are not index-aligned")
