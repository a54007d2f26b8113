"""Attribute pool ingestion and attribute sampling.

Sampling runs per class in three stages: embed every candidate attribute text
on its own, partition the embeddings into N clusters (seeded k-means++ with
Lloyd iterations), then rank each cluster's members by their mean cosine
similarity against the class's training images under a full textual prompt
(template + class + attribute) and keep the top one per cluster. Clustering
sees only attribute semantics; ranking sees image relevance.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .encoders import ImageEncoder, TextEncoder, Vocabulary, tokenize
from .errors import (
    DuplicateAttribute,
    EmptyClass,
    NoImages,
    SchemaViolation,
    TooFewPoints,
)

POOL_FORMAT_VERSION = 1


@dataclass
class AttributeRecord:
    text: str
    planted: bool = False


@dataclass
class PoolClass:
    name: str
    attributes: list[AttributeRecord]
    type: str = ""
    source_template: int = 0


@dataclass
class AttributePool:
    dataset: str
    classes: list[PoolClass]

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def texts(self, class_id: int) -> list[str]:
        return [a.text for a in self.classes[class_id].attributes]

    def to_json_dict(self) -> dict:
        return {
            "version": POOL_FORMAT_VERSION,
            "dataset": self.dataset,
            "classes": [
                {
                    "name": c.name,
                    "type": c.type,
                    "attributes": [{"text": a.text, "planted": a.planted}
                                   for a in c.attributes],
                    "source_template": c.source_template,
                }
                for c in self.classes
            ],
        }


def _normalize_text(text) -> str:
    if not isinstance(text, str):
        raise SchemaViolation(f"attribute text must be a string, got {type(text).__name__}")
    return " ".join(text.lower().split())


def pool_from_json_dict(payload: dict) -> AttributePool:
    if not isinstance(payload, dict):
        raise SchemaViolation("pool document must be a JSON object")
    if payload.get("version") != POOL_FORMAT_VERSION:
        raise SchemaViolation(f"unsupported pool version {payload.get('version')!r}")
    if "classes" not in payload or not isinstance(payload["classes"], list):
        raise SchemaViolation("pool document needs a 'classes' list")
    classes: list[PoolClass] = []
    for entry in payload["classes"]:
        if not isinstance(entry, dict) or "name" not in entry:
            raise SchemaViolation("every class entry needs a 'name'")
        if "attributes" not in entry:
            raise SchemaViolation(f"class {entry['name']!r} is missing 'attributes'")
        records: list[AttributeRecord] = []
        seen: set[str] = set()
        for raw in entry["attributes"]:
            if not isinstance(raw, dict) or "text" not in raw:
                raise SchemaViolation("attributes must be objects with a 'text' field")
            text = _normalize_text(raw["text"])
            if text in seen:
                raise DuplicateAttribute(
                    f"class {entry['name']!r} lists {text!r} more than once")
            seen.add(text)
            records.append(AttributeRecord(text=text, planted=bool(raw.get("planted", False))))
        if not records:
            raise EmptyClass(f"class {entry['name']!r} has no attributes")
        classes.append(PoolClass(
            name=_normalize_text(entry["name"]),
            attributes=records,
            type=_normalize_text(entry.get("type", "")),
            source_template=int(entry.get("source_template", 0)),
        ))
    if not classes:
        raise SchemaViolation("pool lists no classes")
    return AttributePool(dataset=str(payload.get("dataset", "")), classes=classes)


def load_pool(path: str | Path) -> AttributePool:
    with open(path) as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"pool file is not valid JSON: {exc}") from None
    return pool_from_json_dict(payload)


def save_pool(pool: AttributePool, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(pool.to_json_dict(), f, indent=2, sort_keys=True)
        f.write("\n")


def pool_vocabulary_gaps(pool: AttributePool, vocab: Vocabulary) -> list[str]:
    """Words used by the pool that the vocabulary does not know."""
    missing: list[str] = []
    for cls in pool.classes:
        for word in cls.name.split():
            if word not in vocab and word not in missing:
                missing.append(word)
        for attr in cls.attributes:
            for word in attr.text.split():
                if word not in vocab and word not in missing:
                    missing.append(word)
    return missing


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------

def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[int(rng.integers(n))]
    closest = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = closest.sum()
        if total <= 1e-300:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[i] = points[idx]
        closest = np.minimum(closest, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_with_history(points: np.ndarray, k: int, seed: int,
                        max_iter: int = 100) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations with k-means++ seeding; returns labels and inertia trace.

    Empty clusters are repaired by stealing the farthest point from the
    largest cluster, which never increases the objective. Iteration stops
    when the assignment is a fixed point.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n == 0:
        raise TooFewPoints("cannot cluster zero points")
    if not (1 <= k <= n):
        raise ValueError(f"cluster count {k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(points, k, rng)
    labels = np.full(n, -1)
    history: list[float] = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        for cid in range(k):
            if not np.any(new_labels == cid):
                counts = np.bincount(new_labels, minlength=k)
                donor = int(np.argmax(counts))
                members = np.flatnonzero(new_labels == donor)
                far = members[int(np.argmax(d2[members, donor]))]
                new_labels[far] = cid
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for cid in range(k):
            centroids[cid] = points[labels == cid].mean(axis=0)
        history.append(float(((points - centroids[labels]) ** 2).sum()))
    return labels, history


def cluster_attributes(embeddings: np.ndarray, n_clusters: int, seed: int) -> np.ndarray:
    """Assign each attribute embedding to one of up to ``n_clusters`` clusters.

    When fewer distinct embeddings exist than requested clusters, the count is
    clamped with a warning so sweeps over the cluster number stay runnable.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if embeddings.shape[0] == 0:
        raise TooFewPoints("no attribute embeddings to cluster")
    if n_clusters < 1:
        raise ValueError("cluster count must be at least 1")
    distinct = np.unique(embeddings, axis=0).shape[0]
    k = min(n_clusters, distinct)
    if k < n_clusters:
        warnings.warn(
            f"clamping cluster count from {n_clusters} to {k} "
            f"({distinct} distinct embeddings)", stacklevel=2)
    labels, _ = kmeans_with_history(embeddings, k, seed)
    return labels


# ---------------------------------------------------------------------------
# Ranking and selection
# ---------------------------------------------------------------------------

@dataclass
class SelectedAttribute:
    text: str
    score: float
    cluster_id: int
    pool_index: int


@dataclass
class SampledAttributes:
    class_names: list[str]
    per_class: list[list[SelectedAttribute]]

    def texts(self, class_id: int) -> list[str]:
        return [s.text for s in self.per_class[class_id]]

    def to_json_dict(self) -> dict:
        return {
            "version": POOL_FORMAT_VERSION,
            "classes": [
                {
                    "name": name,
                    "selected": [
                        {"text": s.text, "score": s.score,
                         "cluster_id": s.cluster_id, "pool_index": s.pool_index}
                        for s in selections
                    ],
                }
                for name, selections in zip(self.class_names, self.per_class)
            ],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SampledAttributes":
        if payload.get("version") != POOL_FORMAT_VERSION:
            raise SchemaViolation(f"unsupported sampled-attributes version "
                                  f"{payload.get('version')!r}")
        names, per_class = [], []
        for entry in payload["classes"]:
            names.append(entry["name"])
            per_class.append([
                SelectedAttribute(text=s["text"], score=float(s["score"]),
                                  cluster_id=int(s["cluster_id"]),
                                  pool_index=int(s["pool_index"]))
                for s in entry["selected"]
            ])
        return cls(class_names=names, per_class=per_class)


def embed_attributes(pool: AttributePool, class_id: int, text_encoder: TextEncoder,
                     vocab: Vocabulary) -> np.ndarray:
    """One unit embedding per attribute, from the attribute text alone."""
    rows = []
    for text in pool.texts(class_id):
        ids = tokenize(text, vocab, max_len=text_encoder.max_len)
        rows.append(text_encoder.encode([vocab.embeddings[i] for i in ids]).data)
    return np.stack(rows)


def score_attributes(pool: AttributePool, class_id: int, image_features: np.ndarray,
                     text_encoder: TextEncoder, image_encoder: ImageEncoder,
                     vocab: Vocabulary, template: str) -> np.ndarray:
    """Mean cosine of each full textual prompt against the class's shot images."""
    image_features = np.asarray(image_features, dtype=np.float64)
    if image_features.ndim != 2 or image_features.shape[0] == 0:
        raise NoImages(f"class {class_id} has no image features to rank against")
    image_embs = image_encoder.encode(image_features)
    name = pool.classes[class_id].name
    scores = []
    for text in pool.texts(class_id):
        prompt = f"{template} {name} {text}".strip()
        ids = tokenize(prompt, vocab, max_len=text_encoder.max_len)
        emb = text_encoder.encode([vocab.embeddings[i] for i in ids]).data
        scores.append(float(np.mean(image_embs @ emb)))
    return np.array(scores)


def rank_and_select(assignment: np.ndarray, pool: AttributePool, class_id: int,
                    image_features: np.ndarray, text_encoder: TextEncoder,
                    image_encoder: ImageEncoder, vocab: Vocabulary,
                    template: str) -> list[SelectedAttribute]:
    """Keep the highest-scoring attribute of every cluster.

    Ties break toward the lower pool index; output is ordered by cluster id.
    """
    scores = score_attributes(pool, class_id, image_features, text_encoder,
                              image_encoder, vocab, template)
    texts = pool.texts(class_id)
    selections: list[SelectedAttribute] = []
    for cid in sorted(set(int(a) for a in assignment)):
        members = np.flatnonzero(assignment == cid)
        best = members[int(np.argmax(scores[members]))]
        selections.append(SelectedAttribute(
            text=texts[best], score=float(scores[best]),
            cluster_id=cid, pool_index=int(best)))
    return selections


def sample_attributes(pool: AttributePool,
                      shots_by_class: Sequence[np.ndarray] | Mapping[int, np.ndarray],
                      text_encoder: TextEncoder, image_encoder: ImageEncoder,
                      vocab: Vocabulary, n_clusters: int, seed: int,
                      template: str = "a photo of a") -> SampledAttributes:
    """Full per-class pipeline: embed, cluster, rank, select top-1 per cluster."""
    seeds = np.random.SeedSequence(seed).spawn(len(pool.classes))
    per_class: list[list[SelectedAttribute]] = []
    for class_id in range(len(pool.classes)):
        embeddings = embed_attributes(pool, class_id, text_encoder, vocab)
        class_seed = int(seeds[class_id].generate_state(1)[0])
        assignment = cluster_attributes(embeddings, n_clusters, class_seed)
        shots = shots_by_class[class_id]
        per_class.append(rank_and_select(
            assignment, pool, class_id, shots, text_encoder, image_encoder,
            vocab, template))
    return SampledAttributes(class_names=pool.class_names, per_class=per_class)
