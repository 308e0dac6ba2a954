"""Seeded synthetic proposal-feature world.

Each class is a Gaussian cluster around a mean drawn uniformly on a sphere.
Every sample carries an IoU-like score that decreases with its distance from
the class mean, so the contrastive gate sees realistic variation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

BACKGROUND = -1


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    kind: str  # "base" | "novel"


@dataclass
class WorldConfig:
    raw_dim: int = 16
    num_base: int = 7
    num_novel: int = 3
    samples_per_class_train: int = 200
    samples_per_class_test: int = 100
    cluster_radius: float = 4.0
    cluster_sigma: float = 1.0
    iou_noise: float = 0.05
    background: bool = False
    seed: int = 0

    def validate(self):
        if self.raw_dim < 1:
            raise ValueError("raw_dim must be >= 1")
        if self.num_base < 2:
            raise ValueError("num_base must be >= 2")
        if self.num_novel < 1:
            raise ValueError("num_novel must be >= 1")
        if self.samples_per_class_train < 1 or self.samples_per_class_test < 1:
            raise ValueError("samples per class must be >= 1")
        if not self.cluster_radius > 0:
            raise ValueError("cluster_radius must be positive")
        if not self.cluster_sigma > 0:
            raise ValueError("cluster_sigma must be positive")
        if not 0 <= self.iou_noise < 1:
            raise ValueError("iou_noise must lie in [0, 1)")


@dataclass(frozen=True)
class ProposalFeature:
    x: np.ndarray
    y: int
    u: float


@dataclass
class Dataset:
    """Column-wise sample storage: ``x`` (n, raw_dim), ``y`` (n,), ``u`` (n,)."""

    x: np.ndarray
    y: np.ndarray
    u: np.ndarray
    classes: list[ClassInfo] = field(default_factory=list)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.y), -1)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.u = np.asarray(self.u, dtype=np.float64)
        if not (len(self.x) == len(self.y) == len(self.u)):
            raise ValueError("x, y and u must have the same length")
        if np.any((self.u < 0) | (self.u > 1)):
            raise ValueError("IoU scores must lie in [0, 1]")

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        for x, y, u in zip(self.x, self.y, self.u):
            yield ProposalFeature(x, int(y), float(u))

    def subset(self, mask_or_index):
        return Dataset(self.x[mask_or_index], self.y[mask_or_index], self.u[mask_or_index], list(self.classes))

    def only(self, class_ids):
        return self.subset(np.isin(self.y, list(class_ids)))

    def kind_of(self, class_id):
        for c in self.classes:
            if c.class_id == class_id:
                return c.kind
        raise KeyError(f"class {class_id} not in dataset registry")

    def class_ids(self, kind=None):
        return [c.class_id for c in self.classes if kind is None or c.kind == kind]

    def to_json(self):
        return {
            "classes": [asdict(c) for c in self.classes],
            "x": self.x.tolist(),
            "y": self.y.tolist(),
            "u": self.u.tolist(),
        }

    @classmethod
    def from_json(cls, doc):
        for key in ("classes", "x", "y", "u"):
            if key not in doc:
                raise ValueError(f"dataset: missing key {key!r}")
        classes = [ClassInfo(int(c["class_id"]), str(c["name"]), str(c["kind"])) for c in doc["classes"]]
        return cls(np.array(doc["x"], dtype=np.float64), doc["y"], doc["u"], classes)


def save_dataset(ds, path):
    Path(path).write_text(json.dumps(ds.to_json()) + "\n")


def load_dataset(path):
    return Dataset.from_json(json.loads(Path(path).read_text()))


@dataclass
class World:
    config: WorldConfig
    train: Dataset
    test: Dataset
    registry: list[ClassInfo]
    means: np.ndarray

    @property
    def base_ids(self):
        return [c.class_id for c in self.registry if c.kind == "base"]

    @property
    def novel_ids(self):
        return [c.class_id for c in self.registry if c.kind == "novel"]


def iou_from_distance(dist, q05, q95, radius, noise):
    """Map distances to IoU-like scores in [0, 1].

    Distances at the 5th percentile of the class score 1, the 95th percentile
    scores 0.5, linear in between, then uniform ``noise`` is added and the
    result clipped. The small ``1e-3 * radius`` slack keeps collapsed clusters
    (sigma -> 0) at scores near 1 instead of dividing by zero.
    """
    spread = (q95 - q05) + 1e-3 * radius
    base = np.clip(1.0 - 0.5 * np.maximum(dist - q05, 0.0) / spread, 0.0, 1.0)
    return np.clip(base + noise, 0.0, 1.0)


def generate_world(cfg):
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_classes = cfg.num_base + cfg.num_novel
    registry = [ClassInfo(k, f"class_{k}", "base" if k < cfg.num_base else "novel") for k in range(n_classes)]

    means = rng.standard_normal((n_classes, cfg.raw_dim))
    means *= cfg.cluster_radius / np.linalg.norm(means, axis=1, keepdims=True)

    splits = {}
    quantiles = {}
    for split, count in (("train", cfg.samples_per_class_train), ("test", cfg.samples_per_class_test)):
        xs, ys, us = [], [], []
        for k in range(n_classes):
            x = means[k] + cfg.cluster_sigma * rng.standard_normal((count, cfg.raw_dim))
            dist = np.linalg.norm(x - means[k], axis=1)
            if split == "train":
                quantiles[k] = (np.quantile(dist, 0.05), np.quantile(dist, 0.95))
            q05, q95 = quantiles[k]
            noise = rng.uniform(-cfg.iou_noise, cfg.iou_noise, size=count)
            xs.append(x)
            ys.append(np.full(count, k))
            us.append(iou_from_distance(dist, q05, q95, cfg.cluster_radius, noise))
        if cfg.background:
            count = max(1, count // 2)
            xs.append(cfg.cluster_radius * rng.standard_normal((count, cfg.raw_dim)))
            ys.append(np.full(count, BACKGROUND))
            us.append(rng.uniform(0.0, 0.3, size=count))
        splits[split] = Dataset(np.concatenate(xs), np.concatenate(ys), np.concatenate(us), list(registry))

    return World(cfg, splits["train"], splits["test"], registry, means)


def sample_kshot(train, class_ids, shots, seed):
    """Draw exactly ``shots`` samples per class without replacement."""
    if shots < 1:
        raise ValueError(f"shots must be >= 1, got {shots}")
    rng = np.random.default_rng(seed)
    picked = []
    for k in class_ids:
        pool = np.flatnonzero(train.y == k)
        if len(pool) < shots:
            raise ValueError(f"class {k} has {len(pool)} samples, fewer than {shots} shots")
        picked.append(rng.choice(pool, size=shots, replace=False))
    return train.subset(np.concatenate(picked))
