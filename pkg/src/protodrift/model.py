"""Checkpoint container and the forward passes of the feature learner.

Parameter layout (all float64):

- ``extractor.w1`` (raw_dim, H), ``extractor.b1`` (H,), ``extractor.w2`` (H, M),
  ``extractor.b2`` (M,): two ReLU layers, frozen during incremental sessions.
- ``adapter.w`` (M, M): residual adapter on top of the extractor, zero at the
  base stage and trained in sessions only on request
  (``FinetuneConfig.train_adapter``). Classifier input is ``h + h @ A``.
- ``classifier.w`` (Q, M), ``classifier.b`` (Q,)
- ``head.w`` (P, M): contrastive projection head.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .synth import ClassInfo

EXTRACTOR_KEYS = ("extractor.w1", "extractor.b1", "extractor.w2", "extractor.b2")
FINETUNE_KEYS = ("adapter.w", "classifier.w", "classifier.b", "head.w")
PARAM_KEYS = EXTRACTOR_KEYS + FINETUNE_KEYS


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    registry: list[ClassInfo]
    stage: str = "base"
    seed: int = 0
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        missing = [k for k in PARAM_KEYS if k not in self.params]
        if missing:
            raise ValueError(f"checkpoint missing parameters {missing}")
        q = self.params["classifier.w"].shape[0]
        if q != len(self.registry):
            raise ValueError(f"classifier has {q} rows but registry holds {len(self.registry)} classes")
        ids = [c.class_id for c in self.registry]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class ids in registry")

    @property
    def class_ids(self):
        return [c.class_id for c in self.registry]

    @property
    def base_ids(self):
        return [c.class_id for c in self.registry if c.kind == "base"]

    @property
    def feature_dim(self):
        return self.params["extractor.w2"].shape[1]

    def copy(self):
        return Checkpoint(
            {k: v.copy() for k, v in self.params.items()},
            list(self.registry),
            self.stage,
            self.seed,
            [dict(e) for e in self.log],
        )

    def to_json(self):
        return {
            "stage": self.stage,
            "seed": self.seed,
            "registry": [asdict(c) for c in self.registry],
            "params": {k: {"shape": list(self.params[k].shape), "data": self.params[k].ravel().tolist()} for k in PARAM_KEYS},
            "log": self.log,
        }

    @classmethod
    def from_json(cls, doc):
        for key in ("stage", "seed", "registry", "params"):
            if key not in doc:
                raise ValueError(f"checkpoint: missing key {key!r}")
        params = {}
        for k in PARAM_KEYS:
            try:
                entry = doc["params"][k]
                params[k] = np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
            except KeyError as exc:
                raise ValueError(f"checkpoint: missing key params.{k}.{exc.args[0]}") from None
        registry = [ClassInfo(int(c["class_id"]), str(c["name"]), str(c["kind"])) for c in doc["registry"]]
        return cls(params, registry, str(doc["stage"]), int(doc["seed"]), list(doc.get("log", [])))

    def fingerprint(self):
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(ckpt, path):
    Path(path).write_text(json.dumps(ckpt.to_json()) + "\n")


def load_checkpoint(path):
    return Checkpoint.from_json(json.loads(Path(path).read_text()))


def init_checkpoint(registry, raw_dim, hidden_dim, feature_dim, projection_dim, seed):
    rng = np.random.default_rng(seed)
    q = len(registry)
    params = {
        "extractor.w1": rng.standard_normal((raw_dim, hidden_dim)) * np.sqrt(2.0 / raw_dim),
        "extractor.b1": np.zeros(hidden_dim),
        "extractor.w2": rng.standard_normal((hidden_dim, feature_dim)) * np.sqrt(2.0 / hidden_dim),
        "extractor.b2": np.zeros(feature_dim),
        "adapter.w": np.zeros((feature_dim, feature_dim)),
        "classifier.w": rng.standard_normal((q, feature_dim)) * 0.01,
        "classifier.b": np.zeros(q),
        "head.w": rng.standard_normal((projection_dim, feature_dim)) / np.sqrt(feature_dim),
    }
    return Checkpoint(params, list(registry), "base", seed)


def extract_features(params, x):
    """Frozen extractor output (N, M), computed off-tape."""
    h = np.maximum(x @ params["extractor.w1"] + params["extractor.b1"], 0.0)
    return np.maximum(h @ params["extractor.w2"] + params["extractor.b2"], 0.0)


def adapt(params, feats):
    return feats + feats @ params["adapter.w"]


def logits_of(params, x):
    z = adapt(params, extract_features(params, x))
    return z @ params["classifier.w"].T + params["classifier.b"]


def embed(params, x):
    """Unit-norm contrastive embeddings (N, P)."""
    z = adapt(params, extract_features(params, x)) @ params["head.w"].T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding: degenerate projection head")
    return z / norms


def predict(ckpt, x):
    """Registry class ids predicted by argmax over the current classifier."""
    idx = np.argmax(logits_of(ckpt.params, x), axis=1)
    return np.asarray(ckpt.class_ids)[idx]


# tape builders

def tape_extractor(tape, params, x):
    """Full extractor on the tape, used for base pretraining."""
    xn = tape.const(x)
    h = tape.relu(tape.add_bias(tape.matmul(xn, params["extractor.w1"]), params["extractor.b1"]))
    return tape.relu(tape.add_bias(tape.matmul(h, params["extractor.w2"]), params["extractor.b2"]))


def tape_adapt(tape, params, feats):
    return tape.add(feats, tape.matmul(feats, params["adapter.w"]))


def tape_logits(tape, params, z):
    return tape.add_bias(tape.matmul(z, tape.transpose(params["classifier.w"])), params["classifier.b"])


def leaves(tape, values, names):
    """Create named parameter leaves for ``names``; returns name -> node id."""
    return {k: tape.param(k, values[k]) for k in names}
