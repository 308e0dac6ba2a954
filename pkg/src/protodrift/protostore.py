"""Class prototypes and their frozen base-model distributions.

A prototype is the mean classifier-input feature of a class; its base
distribution is the softmax of the base classifier evaluated on that mean.
The store is the only thing that carries base-class knowledge into later
sessions, so it is written to a single JSON document and validated on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import adapt, extract_features

SIMPLEX_TOL = 1e-9


class StoreError(ValueError):
    pass


@dataclass
class Prototype:
    class_id: int
    name: str
    mean_feature: np.ndarray
    base_distribution: np.ndarray | None = None

    def __eq__(self, other):
        if not isinstance(other, Prototype):
            return NotImplemented
        same_dist = (self.base_distribution is None and other.base_distribution is None) or (
            self.base_distribution is not None
            and other.base_distribution is not None
            and np.array_equal(self.base_distribution, other.base_distribution)
        )
        return (
            self.class_id == other.class_id
            and self.name == other.name
            and np.array_equal(self.mean_feature, other.mean_feature)
            and same_dist
        )


@dataclass
class PrototypeStore:
    """Base prototypes (with distributions) plus novel prototypes appended by sessions."""

    checkpoint_id: str
    seed: int
    feature_dim: int
    base: list[Prototype]
    novel: list[Prototype] = field(default_factory=list)

    def __post_init__(self):
        ids = [p.class_id for p in self.base + self.novel]
        if len(set(ids)) != len(ids):
            raise StoreError(f"duplicate class ids in store: {ids}")
        for p in self.base + self.novel:
            if p.mean_feature.shape != (self.feature_dim,):
                raise StoreError(f"class {p.class_id}: mean_feature has shape {p.mean_feature.shape}, expected ({self.feature_dim},)")
        for p in self.base:
            check_simplex(p.base_distribution, f"class {p.class_id} base_distribution")

    @property
    def base_ids(self):
        return [p.class_id for p in self.base]

    def means(self):
        return {p.class_id: p.mean_feature for p in self.base + self.novel}

    def base_matrix(self):
        return np.stack([p.mean_feature for p in self.base])

    def distributions(self):
        return np.stack([p.base_distribution for p in self.base])

    def all_prototype_matrix(self):
        return np.stack([p.mean_feature for p in self.base + self.novel])

    def with_novel(self, prototypes):
        return PrototypeStore(self.checkpoint_id, self.seed, self.feature_dim, list(self.base), list(self.novel) + list(prototypes))


def check_simplex(p, what):
    if p is None:
        raise StoreError(f"{what}: missing")
    p = np.asarray(p)
    if p.ndim != 1 or p.size == 0:
        raise StoreError(f"{what}: expected a non-empty vector")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise StoreError(f"{what}: not a probability vector (min {p.min():.3g}, sum {p.sum():.12g})")


def compute_prototype(features, class_id=None):
    """Arithmetic mean of feature vectors, accumulated in input order."""
    features = [np.asarray(f, dtype=np.float64) for f in features]
    if not features:
        raise StoreError(f"class {class_id} has no samples")
    total = np.zeros_like(features[0])
    for f in features:
        if f.shape != total.shape:
            raise StoreError(f"class {class_id}: feature shapes differ ({f.shape} vs {total.shape})")
        total = total + f
    return total / len(features)


def prototype_distribution(prototype, classifier_weights, classifier_bias):
    """softmax(W p + b)."""
    w = np.asarray(classifier_weights, dtype=np.float64)
    b = np.asarray(classifier_bias, dtype=np.float64)
    p = np.asarray(prototype, dtype=np.float64)
    if w.ndim != 2 or p.shape != (w.shape[1],) or b.shape != (w.shape[0],):
        raise StoreError(f"shape mismatch: weights {w.shape}, bias {b.shape}, prototype {p.shape}")
    o = w @ p + b
    e = np.exp(o - o.max())
    return e / e.sum()


def extract_store(ckpt, base_dataset):
    """One prototype per base class, taken at the classifier input."""
    missing = [k for k in ckpt.base_ids if not np.any(base_dataset.y == k)]
    if missing:
        raise StoreError(f"base classes with no samples: {missing}")
    stray = sorted(set(base_dataset.y.tolist()) - set(ckpt.base_ids))
    if stray:
        raise StoreError(f"dataset labels outside the base registry: {stray}")
    feats = adapt(ckpt.params, extract_features(ckpt.params, base_dataset.x))
    rows = {c.class_id: i for i, c in enumerate(ckpt.registry)}
    base_rows = [rows[k] for k in ckpt.base_ids]
    w = ckpt.params["classifier.w"][base_rows]
    b = ckpt.params["classifier.b"][base_rows]
    protos = []
    for c in ckpt.registry:
        if c.kind != "base":
            continue
        mean = compute_prototype(feats[base_dataset.y == c.class_id], c.class_id)
        protos.append(Prototype(c.class_id, c.name, mean, prototype_distribution(mean, w, b)))
    return PrototypeStore(ckpt.fingerprint(), ckpt.seed, ckpt.feature_dim, protos)


def store_to_json(store):
    def entry(p):
        d = {"class_id": p.class_id, "name": p.name, "mean_feature": p.mean_feature.tolist()}
        if p.base_distribution is not None:
            d["base_distribution"] = p.base_distribution.tolist()
        return d

    return {
        "checkpoint_id": store.checkpoint_id,
        "seed": store.seed,
        "feature_dim": store.feature_dim,
        "classes": [entry(p) for p in store.base],
        "novel_classes": [entry(p) for p in store.novel],
    }


def _require(doc, key, path, kind):
    if key not in doc:
        raise StoreError(f"{path}{key}: missing field")
    value = doc[key]
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind) and not (kind is int and isinstance(value, bool))
    if not ok:
        raise StoreError(f"{path}{key}: expected {kind.__name__}, got {type(value).__name__}")
    return value


def _vector(doc, key, path):
    values = _require(doc, key, path, list)
    for i, v in enumerate(values):
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            raise StoreError(f"{path}{key}[{i}]: expected a number")
    return np.array(values, dtype=np.float64)


def store_from_json(doc, registry=None):
    if not isinstance(doc, dict):
        raise StoreError("store: top level must be an object")
    checkpoint_id = _require(doc, "checkpoint_id", "", str)
    seed = _require(doc, "seed", "", int)
    feature_dim = _require(doc, "feature_dim", "", int)
    groups = {}
    for group, needs_dist in (("classes", True), ("novel_classes", False)):
        entries = doc.get(group, []) if group == "novel_classes" else _require(doc, group, "", list)
        protos = []
        for i, e in enumerate(entries):
            path = f"{group}[{i}]."
            if not isinstance(e, dict):
                raise StoreError(f"{group}[{i}]: expected an object")
            dist = _vector(e, "base_distribution", path) if needs_dist else None
            if dist is not None:
                try:
                    check_simplex(dist, f"{path}base_distribution")
                except StoreError as exc:
                    raise StoreError(f"validation error: {exc}") from None
            protos.append(
                Prototype(
                    _require(e, "class_id", path, int),
                    _require(e, "name", path, str),
                    _vector(e, "mean_feature", path),
                    dist,
                )
            )
        groups[group] = protos
    store = PrototypeStore(checkpoint_id, seed, feature_dim, groups["classes"], groups["novel_classes"])
    if registry is not None:
        base_ids = [c.class_id for c in registry if c.kind == "base"]
        if sorted(base_ids) != sorted(store.base_ids):
            raise StoreError(f"class-count mismatch: registry has base classes {base_ids}, store has {store.base_ids}")
    return store


def save_store(store, path):
    Path(path).write_text(json.dumps(store_to_json(store), indent=1) + "\n")


def load_store(path, registry=None):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StoreError(f"{path}: malformed JSON ({exc})") from None
    return store_from_json(doc, registry)
