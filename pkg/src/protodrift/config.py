"""Strict JSON run configuration.

Every section is a dataclass; loading walks the document against the field
list, so an unknown key or a wrong type fails with the full key path instead
of being silently ignored.
"""

from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .harness import FinetuneConfig, LossWeights, PretrainConfig
from .synth import WorldConfig

SEED_ENV = "PROTODRIFT_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data: str = "run/data"
    checkpoint: str = "run/base.ckpt.json"
    store: str = "run/store.json"
    reports: str = "run/reports"


@dataclass
class AblationConfig:
    shots: int = 10
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self):
        try:
            self.world.validate()
            LossWeights(self.losses.lambda1, self.losses.lambda2)
            self.finetune.hpc
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        checks = [
            ("pretrain.hidden_dim", self.pretrain.hidden_dim >= 1),
            ("pretrain.feature_dim", self.pretrain.feature_dim >= 1),
            ("pretrain.projection_dim", self.pretrain.projection_dim >= 1),
            ("pretrain.epochs", self.pretrain.epochs >= 0),
            ("pretrain.batch_size", self.pretrain.batch_size >= 1),
            ("pretrain.lr", self.pretrain.lr > 0),
            ("pretrain.momentum", 0 <= self.pretrain.momentum < 1),
            ("pretrain.weight_decay", self.pretrain.weight_decay >= 0),
            ("pretrain.warmup_iters", self.pretrain.warmup_iters >= 0),
            ("finetune.iterations", self.finetune.iterations >= 0),
            ("finetune.lr", self.finetune.lr > 0),
            ("finetune.momentum", 0 <= self.finetune.momentum < 1),
            ("finetune.weight_decay", self.finetune.weight_decay >= 0),
            ("finetune.warmup_iters", self.finetune.warmup_iters >= 0),
            ("finetune.cost_mode", self.finetune.cost_mode in ("semantic", "zero_one")),
            ("finetune.eps_schedule", len(self.finetune.eps_schedule) > 0 and all(e > 0 for e in self.finetune.eps_schedule)),
            ("finetune.sinkhorn_max_iter", self.finetune.sinkhorn_max_iter >= 1),
            ("finetune.init_std", self.finetune.init_std >= 0),
            ("ablation.shots", self.ablation.shots >= 1),
            ("ablation.seeds", len(self.ablation.seeds) > 0 and len(set(self.ablation.seeds)) == len(self.ablation.seeds)),
            ("ablation.workers", self.ablation.workers >= 1),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"{key}: value out of range")
        for key in ("pretrain.milestones", "finetune.milestones"):
            for i, m in enumerate(_get(self, key)):
                if not (isinstance(m, list) and len(m) == 2 and all(_is_number(v) for v in m)):
                    raise ConfigError(f"{key}[{i}]: expected [step, multiplier]")
        paths = list(dataclasses.asdict(self.paths).values())
        if len(set(paths)) != len(paths):
            raise ConfigError("paths: all paths must be distinct")
        return self


def _get(obj, dotted):
    for part in dotted.split("."):
        obj = getattr(obj, part)
    return obj


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_type(value, tp, path):
    if tp is bool:
        ok = isinstance(value, bool)
    elif tp is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif tp is float:
        ok = _is_number(value)
    elif tp is str:
        ok = isinstance(value, str)
    elif tp is list:
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{path}: expected {tp.__name__}, got {type(value).__name__}")
    return float(value) if tp is float else value


def _build(cls, doc, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in names:
            raise ConfigError(f"unknown key {path}{key}")
    kwargs = {}
    for name in names & set(doc):
        tp = hints[name]
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, doc[name], f"{path}{name}.")
        else:
            origin = typing.get_origin(tp) or tp
            kwargs[name] = _check_type(doc[name], origin, f"{path}{name}")
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(doc):
    return _build(RunConfig, doc, "").validate()


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such file") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return config_from_dict(doc)


def config_to_dict(cfg):
    return dataclasses.asdict(cfg)


def save_config(cfg, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def resolve_seed(cfg, flag=None, environ=None):
    """Seed precedence: command-line flag, then environment, then config."""
    environ = os.environ if environ is None else environ
    if flag is not None:
        seed = flag
    elif environ.get(SEED_ENV, "") != "":
        raw = environ[SEED_ENV]
        try:
            seed = int(raw)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {raw!r}") from None
    else:
        seed = cfg.seed
    cfg.seed = seed
    cfg.world.seed = seed
    return cfg
