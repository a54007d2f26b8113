"""Seeded synthetic few-shot tasks with a planted spurious channel.

Feature space layout: a core block carrying class semantics (each class's
core is the sum of its attribute directions, attributes shared across
classes), a spurious block carrying one signature direction per class, and a
residual block that never correlates with labels. Training images pair a
class core with its own signature with probability ``rho``; shifted test
variants shuffle, zero, or drown that signature.

Vocabulary planting inverts the text encoder's linearized token map so each
class/attribute/negative token encodes to the same direction the image
encoder assigns to its feature-space meaning. The general negative token sits
on the mean signature direction; class-specific negative tokens sit on each
class's own signature. Attribute pools are seeded with distractors: tokens
pointing at the label-free residual block (non-visual) and tokens pointing at
other classes' signatures (wrong style).

Ground-truth generator metadata travels in ``FewShotTask.oracle`` and is read
only by verification tests, never by training or sampling code.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .attributes import AttributePool, AttributeRecord, PoolClass
from .autodiff import Tensor, normalize_rows
from .encoders import ImageEncoder, TextEncoder, VocabWords, Vocabulary, build_vocabulary
from .errors import InvalidSpec, UnknownKind, VersionMismatch

TASK_FORMAT_VERSION = 1

OOD_KINDS = ("shuffled_signature", "zeroed_signature", "noise_boost")


@dataclass
class TaskSpec:
    """Knobs of the synthetic generator. Defaults give the standard task."""

    n_classes: int = 10
    base_fraction: float = 0.5
    shots: int = 16
    rho: float = 0.95
    core_dim: int = 24
    spurious_dim: int = 8
    noise_dim: int = 4
    noise_std: float = 0.25
    attributes_per_class: int = 15
    sharing_degree: int = 2
    n_nonvisual: int = 2
    n_wrong_signature: int = 2
    test_per_class: int = 200
    spurious_scale: float = 2.5
    planted_token_norm: float = 2.0
    plant_jitter: float = 0.05
    seed: int = 0
    d_token: int = 40
    d_embed: int = 40
    d_hidden: int = 56
    max_len: int = 16
    gate_strength: float = 1.0

    @property
    def feature_dim(self) -> int:
        return self.core_dim + self.spurious_dim + self.noise_dim

    @property
    def n_true_attributes(self) -> int:
        return self.attributes_per_class - self.n_nonvisual - self.n_wrong_signature

    @property
    def n_base(self) -> int:
        return max(1, int(round(self.n_classes * self.base_fraction)))

    def validate(self) -> None:
        if self.n_classes < 2:
            raise InvalidSpec("need at least 2 classes")
        if not (0.0 <= self.rho <= 1.0):
            raise InvalidSpec(f"rho must lie in [0, 1], got {self.rho}")
        if min(self.core_dim, self.spurious_dim) < 1 or self.noise_dim < 0:
            raise InvalidSpec("block dimensions must be positive")
        if self.n_true_attributes < 1:
            raise InvalidSpec("distractors leave no true attributes per class")
        if self.sharing_degree < 1 or self.sharing_degree > self.n_classes:
            raise InvalidSpec("sharing degree must lie in [1, n_classes]")
        if self.shots < 1 or self.test_per_class < 1:
            raise InvalidSpec("split sizes must be positive")
        if self.n_wrong_signature > self.n_classes - 1:
            raise InvalidSpec("not enough other classes for wrong-signature distractors")
        if self.n_base >= self.n_classes:
            raise InvalidSpec("base/new split leaves no new classes")
        if self.d_embed < self.feature_dim:
            raise InvalidSpec("embedding dim must cover the feature dim for planting")

    def to_mapping(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_mapping(cls, payload: Mapping) -> "TaskSpec":
        fields = {k: payload[k] for k in cls.__dataclass_fields__ if k in payload}
        unknown = set(payload) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidSpec(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**fields)


@dataclass
class SplitData:
    features: np.ndarray            # (n, F)
    labels: np.ndarray              # (n,) global class ids
    signature_ids: np.ndarray       # (n,) index of the composed signature, -1 if none

    def __len__(self) -> int:
        return int(self.features.shape[0])

    def to_json_dict(self) -> dict:
        return {
            "features": self.features.tolist(),
            "labels": self.labels.tolist(),
            "signature_ids": self.signature_ids.tolist(),
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "SplitData":
        return cls(
            features=np.array(payload["features"], dtype=np.float64),
            labels=np.array(payload["labels"], dtype=int),
            signature_ids=np.array(payload["signature_ids"], dtype=int),
        )


@dataclass
class GeneratorOracle:
    """Planted ground truth. Verification only; opaque to training/sampling."""

    directions: np.ndarray                  # (n_dirs, F) unit attribute directions
    class_direction_ids: list[list[int]]    # per class, sorted direction ids
    cores: np.ndarray                       # (C, F)
    signatures: np.ndarray                  # (C, F) unit signature directions
    mean_signature: np.ndarray              # (F,)
    true_attribute_texts: list[list[str]]
    nonvisual_texts: list[list[str]]
    wrong_signature_texts: list[list[str]]

    def to_json_dict(self) -> dict:
        return {
            "directions": self.directions.tolist(),
            "class_direction_ids": self.class_direction_ids,
            "cores": self.cores.tolist(),
            "signatures": self.signatures.tolist(),
            "mean_signature": self.mean_signature.tolist(),
            "true_attribute_texts": self.true_attribute_texts,
            "nonvisual_texts": self.nonvisual_texts,
            "wrong_signature_texts": self.wrong_signature_texts,
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "GeneratorOracle":
        return cls(
            directions=np.array(payload["directions"], dtype=np.float64),
            class_direction_ids=[list(map(int, ids))
                                 for ids in payload["class_direction_ids"]],
            cores=np.array(payload["cores"], dtype=np.float64),
            signatures=np.array(payload["signatures"], dtype=np.float64),
            mean_signature=np.array(payload["mean_signature"], dtype=np.float64),
            true_attribute_texts=payload["true_attribute_texts"],
            nonvisual_texts=payload["nonvisual_texts"],
            wrong_signature_texts=payload["wrong_signature_texts"],
        )


@dataclass
class FewShotTask:
    spec: TaskSpec
    class_names: list[str]
    base_class_ids: list[int]
    new_class_ids: list[int]
    train: SplitData
    base_test: SplitData
    new_test: SplitData
    id_test: SplitData
    ood_test: SplitData
    negative_general: str
    negative_class_specific: list[str]
    template: str
    oracle: GeneratorOracle

    def shots_by_class(self) -> list[np.ndarray]:
        """Training shot features grouped by global class id."""
        return [self.train.features[self.train.labels == c]
                for c in range(self.spec.n_classes)]

    def split(self, name: str) -> SplitData:
        mapping = {
            "train": self.train,
            "base_test": self.base_test,
            "new_test": self.new_test,
            "id_test": self.id_test,
            "ood_test": self.ood_test,
        }
        if name not in mapping:
            raise UnknownKind(f"unknown split {name!r}")
        return mapping[name]


def build_encoders(spec: TaskSpec) -> tuple[TextEncoder, ImageEncoder]:
    """Frozen encoder pair derived deterministically from the task seed."""
    text = TextEncoder(seed=spec.seed + 101, d_tok=spec.d_token, d_out=spec.d_embed,
                       d_hidden=spec.d_hidden, max_len=spec.max_len,
                       gate_strength=spec.gate_strength)
    image = ImageEncoder(seed=spec.seed + 202, d_in=spec.feature_dim,
                         d_out=spec.d_embed)
    return text, image


def plant_token_embeddings(directions: np.ndarray, text_encoder: TextEncoder,
                           image_encoder: ImageEncoder, norm: float,
                           jitter: np.ndarray | None = None,
                           refine_steps: int = 120, refine_lr: float = 0.5) -> np.ndarray:
    """Token embeddings whose single-token encodings match the directions' images.

    A least-squares inversion of the linearized token-to-output map seeds each
    embedding; a fixed number of joint gradient steps through the real encoder
    then absorbs the tanh curvature and the context gate. Rows are rescaled to
    the requested norm before the caller's jitter is added.

    The refinement replays the encoder's single-token path (position 0, gate
    fed by the token itself) on all rows at once.
    """
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    targets = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    targets = targets @ image_encoder.weight
    targets /= np.linalg.norm(targets, axis=1, keepdims=True)
    raw = targets @ np.linalg.pinv(text_encoder.token_map)
    seeds = norm * raw / np.linalg.norm(raw, axis=1, keepdims=True)

    enc = text_encoder
    pos0 = enc.positions[0]
    leaf = Tensor(seeds.copy(), requires_grad=True)
    for _ in range(refine_steps):
        leaf.zero_grad()
        hidden = ((leaf + pos0) @ enc.w1 + enc.b1).tanh()
        if enc.gate_strength != 0.0:
            hidden = hidden * ((leaf @ enc.w_gate).tanh() * enc.gate_strength + 1.0)
        out = normalize_rows(hidden @ enc.w2 + enc.b2)
        loss = -(out * targets).sum()
        loss.backward()
        leaf.data[...] -= refine_lr * leaf.grad
    emb = norm * leaf.data / np.linalg.norm(leaf.data, axis=1, keepdims=True)
    if jitter is not None:
        emb = emb + jitter
    return emb


def _share_directions(spec: TaskSpec, rng: np.random.Generator) -> list[list[int]]:
    """Assign direction ids to classes so each id serves ``sharing_degree`` classes.

    Greedy by remaining need, capping any class pair at two shared directions
    so no two cores become near-parallel. A few tail directions may serve
    fewer classes when the slot count does not divide evenly.
    """
    c, per, share = spec.n_classes, spec.n_true_attributes, spec.sharing_degree
    need = [per] * c
    result: list[list[int]] = [[] for _ in range(c)]
    pair_use: dict[tuple[int, int], int] = {}
    dir_id = 0
    while any(n > 0 for n in need):
        alive = [i for i in range(c) if need[i] > 0]
        alive.sort(key=lambda i: (-need[i], rng.random()))
        group = [alive[0]]
        for j in alive[1:]:
            if len(group) == share:
                break
            if all(pair_use.get((min(g, j), max(g, j)), 0) < 2 for g in group):
                group.append(j)
        for g in group:
            need[g] -= 1
            result[g].append(dir_id)
        for a in range(len(group)):
            for b in range(a + 1, len(group)):
                key = (min(group[a], group[b]), max(group[a], group[b]))
                pair_use[key] = pair_use.get(key, 0) + 1
        dir_id += 1
        if dir_id > 10 * c * per:
            raise InvalidSpec("could not build the attribute sharing map")
    return [sorted(ids) for ids in result]


def _direction_frame(count: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """Unit attribute directions drawn as stacked random orthonormal bases.

    Keeps mutual coherence low even when the pool exceeds the block dimension,
    so class cores (sums of their directions) stay well separated.
    """
    rows: list[np.ndarray] = []
    while len(rows) < count:
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        rows.extend(q.T)
    rows = rows[:count]
    order = rng.permutation(count)
    return np.stack([rows[i] for i in order])


def _signature_directions(spec: TaskSpec, rng: np.random.Generator) -> np.ndarray:
    """Unit signature directions, mutually orthogonal while the block allows."""
    s, c = spec.spurious_dim, spec.n_classes
    q, _ = np.linalg.qr(rng.normal(size=(s, s)))
    rows = [q[:, i] for i in range(min(c, s))]
    threshold = 0.9
    attempts = 0
    while len(rows) < c:
        v = rng.normal(size=s)
        v /= np.linalg.norm(v)
        attempts += 1
        if max(abs(v @ r) for r in rows) < threshold:
            rows.append(v)
        elif attempts % 200 == 0:
            threshold = min(0.99, threshold + 0.05)
    return np.stack(rows[:c])


def _embed_block(vec: np.ndarray, start: int, total: int) -> np.ndarray:
    out = np.zeros(total)
    out[start:start + len(vec)] = vec
    return out


def generate_task(spec: TaskSpec) -> tuple[FewShotTask, Vocabulary, AttributePool]:
    """Build the task, its planted vocabulary, and its attribute pool."""
    spec.validate()
    seeds = np.random.SeedSequence(spec.seed).spawn(8)
    rng_dirs, rng_assign, rng_sig, rng_pool, rng_plant, rng_train, rng_test, rng_ood = (
        np.random.default_rng(s) for s in seeds)
    text_encoder, image_encoder = build_encoders(spec)
    f_dim, k_dim, s_dim = spec.feature_dim, spec.core_dim, spec.spurious_dim

    # --- planted geometry ----------------------------------------------------
    class_dir_ids = _share_directions(spec, rng_assign)
    n_dirs = max(d for ids in class_dir_ids for d in ids) + 1
    raw_dirs = _direction_frame(n_dirs, k_dim, rng_dirs)
    directions = np.stack([_embed_block(d, 0, f_dim) for d in raw_dirs])
    cores = np.stack([directions[ids].sum(axis=0) for ids in class_dir_ids])

    sig_block = _signature_directions(spec, rng_sig)
    signatures = np.stack([_embed_block(s, k_dim, f_dim) for s in sig_block])
    mean_sig = signatures.mean(axis=0)
    mean_sig = mean_sig / np.linalg.norm(mean_sig)

    # --- pool contents ---------------------------------------------------------
    class_names = [f"class_{c}" for c in range(spec.n_classes)]
    true_texts = [[f"attr_{d:02d}" for d in ids] for ids in class_dir_ids]
    wrong_texts: list[list[str]] = []
    nonvis_texts: list[list[str]] = []
    nonvis_dirs: dict[str, np.ndarray] = {}
    for c in range(spec.n_classes):
        others = [i for i in range(spec.n_classes) if i != c]
        chosen = rng_pool.choice(len(others), size=spec.n_wrong_signature, replace=False)
        wrong_texts.append([f"style_{others[int(i)]}" for i in chosen])
        block: list[np.ndarray] = []
        names = []
        for i in range(spec.n_nonvisual):
            v = rng_pool.normal(size=spec.noise_dim)
            for prev in block:
                v = v - (v @ prev) * prev
            v /= np.linalg.norm(v)
            block.append(v)
            text = f"trait_{c}_{i}"
            names.append(text)
            nonvis_dirs[text] = _embed_block(v, k_dim + s_dim, f_dim)
        nonvis_texts.append(names)

    pool_classes = []
    for c in range(spec.n_classes):
        records = ([AttributeRecord(t, planted=True) for t in true_texts[c]]
                   + [AttributeRecord(t, planted=True) for t in wrong_texts[c]]
                   + [AttributeRecord(t, planted=True) for t in nonvis_texts[c]])
        order = rng_pool.permutation(len(records))
        pool_classes.append(PoolClass(
            name=class_names[c],
            attributes=[records[i] for i in order],
            type="synthetic",
            source_template=0,
        ))
    pool = AttributePool(dataset=f"synthbench-seed{spec.seed}", classes=pool_classes)

    # --- vocabulary planting ------------------------------------------------------
    negative_general = "background"
    negative_specific = [f"background_{c}" for c in range(spec.n_classes)]

    def plant(direction: np.ndarray) -> np.ndarray:
        jitter = rng_plant.normal(0.0, spec.plant_jitter, size=spec.d_token)
        return plant_token_embedding(direction, text_encoder, image_encoder,
                                     spec.planted_token_norm, jitter)

    planted: dict[str, np.ndarray] = {}
    for c in range(spec.n_classes):
        planted[class_names[c]] = plant(cores[c])
    for d in range(n_dirs):
        planted[f"attr_{d:02d}"] = plant(directions[d])
    for c in range(spec.n_classes):
        planted[f"style_{c}"] = plant(signatures[c])
    for text, direction in nonvis_dirs.items():
        planted[text] = plant(direction)
    planted[negative_general] = plant(mean_sig)
    for c in range(spec.n_classes):
        planted[negative_specific[c]] = plant(signatures[c])

    words = VocabWords(
        class_names=class_names,
        attribute_texts=sorted({a.text for pc in pool_classes for a in pc.attributes}),
        negative_texts=[negative_general] + negative_specific,
        template_words=["a", "photo", "of"],
    )
    vocab = build_vocabulary(words, d_tok=spec.d_token, seed=spec.seed + 303,
                             planted=planted)

    # --- splits ---------------------------------------------------------------------
    base_ids = list(range(spec.n_base))
    new_ids = list(range(spec.n_base, spec.n_classes))

    def draw(rng: np.random.Generator, class_ids: list[int], per_class: int) -> SplitData:
        feats, labels, sids = [], [], []
        for c in class_ids:
            own = rng.random(per_class) < spec.rho
            sid = np.where(own, c, rng.integers(0, spec.n_classes, size=per_class))
            noise = rng.normal(0.0, spec.noise_std, size=(per_class, f_dim))
            feats.append(cores[c] + spec.spurious_scale * signatures[sid] + noise)
            labels.append(np.full(per_class, c))
            sids.append(sid)
        return SplitData(
            features=np.concatenate(feats),
            labels=np.concatenate(labels).astype(int),
            signature_ids=np.concatenate(sids).astype(int),
        )

    train = draw(rng_train, list(range(spec.n_classes)), spec.shots)
    base_test = draw(rng_test, base_ids, spec.test_per_class)
    new_test = draw(rng_test, new_ids, spec.test_per_class)
    id_test = draw(rng_test, base_ids, spec.test_per_class)

    oracle = GeneratorOracle(
        directions=directions,
        class_direction_ids=class_dir_ids,
        cores=cores,
        signatures=signatures,
        mean_signature=mean_sig,
        true_attribute_texts=true_texts,
        nonvisual_texts=nonvis_texts,
        wrong_signature_texts=wrong_texts,
    )
    task = FewShotTask(
        spec=spec,
        class_names=class_names,
        base_class_ids=base_ids,
        new_class_ids=new_ids,
        train=train,
        base_test=base_test,
        new_test=new_test,
        id_test=id_test,
        ood_test=SplitData(np.zeros((0, f_dim)), np.zeros(0, dtype=int),
                           np.zeros(0, dtype=int)),
        negative_general=negative_general,
        negative_class_specific=negative_specific,
        template="a photo of a",
        oracle=oracle,
    )
    task.ood_test = make_ood_variant(task, "shuffled_signature",
                                     int(seeds[7].generate_state(1)[0]))
    return task, vocab, pool


def make_ood_variant(task: FewShotTask, kind: str, seed: int) -> SplitData:
    """Derive a shifted test split from id_test, transforming only the nuisance."""
    if kind not in OOD_KINDS:
        raise UnknownKind(f"unknown OOD kind {kind!r}; choose from {OOD_KINDS}")
    spec = task.spec
    rng = np.random.default_rng(seed)
    base = task.id_test
    features = base.features.copy()
    sids = base.signature_ids.copy()
    present = sids >= 0
    if kind == "shuffled_signature":
        new_sids = rng.integers(0, spec.n_classes, size=len(base))
        features[present] -= spec.spurious_scale * task.oracle.signatures[sids[present]]
        features += spec.spurious_scale * task.oracle.signatures[new_sids]
        sids = new_sids
    elif kind == "zeroed_signature":
        features[present] -= spec.spurious_scale * task.oracle.signatures[sids[present]]
        sids = np.full(len(base), -1)
    elif kind == "noise_boost":
        features = features + rng.normal(0.0, 2.0 * spec.noise_std,
                                         size=features.shape)
    return SplitData(features=features, labels=base.labels.copy(), signature_ids=sids)


# ---------------------------------------------------------------------------
# Task (de)serialization
# ---------------------------------------------------------------------------

def task_to_json_dict(task: FewShotTask, vocab_hash: str) -> dict:
    return {
        "version": TASK_FORMAT_VERSION,
        "spec": task.spec.to_mapping(),
        "class_names": task.class_names,
        "base_class_ids": task.base_class_ids,
        "new_class_ids": task.new_class_ids,
        "splits": {
            "train": task.train.to_json_dict(),
            "base_test": task.base_test.to_json_dict(),
            "new_test": task.new_test.to_json_dict(),
            "id_test": task.id_test.to_json_dict(),
            "ood_test": task.ood_test.to_json_dict(),
        },
        "negative_general": task.negative_general,
        "negative_class_specific": task.negative_class_specific,
        "template": task.template,
        "vocab_hash": vocab_hash,
        "oracle": task.oracle.to_json_dict(),
    }


def task_from_json_dict(payload: dict) -> tuple[FewShotTask, str]:
    if payload.get("version") != TASK_FORMAT_VERSION:
        raise VersionMismatch(f"unsupported task version {payload.get('version')!r}")
    spec = TaskSpec.from_mapping(payload["spec"])
    splits = payload["splits"]
    task = FewShotTask(
        spec=spec,
        class_names=list(payload["class_names"]),
        base_class_ids=list(map(int, payload["base_class_ids"])),
        new_class_ids=list(map(int, payload["new_class_ids"])),
        train=SplitData.from_json_dict(splits["train"]),
        base_test=SplitData.from_json_dict(splits["base_test"]),
        new_test=SplitData.from_json_dict(splits["new_test"]),
        id_test=SplitData.from_json_dict(splits["id_test"]),
        ood_test=SplitData.from_json_dict(splits["ood_test"]),
        negative_general=payload["negative_general"],
        negative_class_specific=list(payload["negative_class_specific"]),
        template=payload["template"],
        oracle=GeneratorOracle.from_json_dict(payload["oracle"]),
    )
    return task, payload["vocab_hash"]


def save_task(task: FewShotTask, vocab_hash: str, path: str | Path) -> None:
    with open(path, "w") as f:
        json.dump(task_to_json_dict(task, vocab_hash), f, sort_keys=True)
        f.write("\n")


def load_task(path: str | Path) -> tuple[FewShotTask, str]:
    with open(path) as f:
        return task_from_json_dict(json.load(f))
