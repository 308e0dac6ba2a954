"""Two-stage protocol: base pretraining, replay-free incremental sessions, evaluation, ablation."""

from __future__ import annotations

import logging
from contextlib import contextmanager
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hpc import HpcConfig, class_cosines, hpc_loss, project
from .model import (
    EXTRACTOR_KEYS,
    FINETUNE_KEYS,
    Checkpoint,
    adapt,
    embed,
    extract_features,
    init_checkpoint,
    leaves,
    predict,
    tape_adapt,
    tape_extractor,
    tape_logits,
)
from .otcal import DEFAULT_EPS_SCHEDULE, CalibrationState, build_cost_matrix, calibration_loss
from .protostore import Prototype, compute_prototype, extract_store
from .synth import BACKGROUND, ClassInfo, WorldConfig, generate_world, sample_kshot
from .tensor import SGD, Tape, TapeError, cross_entropy

logger = logging.getLogger(__name__)

VARIANTS = ("a", "b", "c", "d", "e")


class TrainingError(RuntimeError):
    pass


@dataclass
class PretrainConfig:
    hidden_dim: int = 64
    feature_dim: int = 32
    projection_dim: int = 128
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 20
    # (epoch, multiplier)
    milestones: list = field(default_factory=lambda: [[20, 0.1], [25, 0.1]])


@dataclass
class FinetuneConfig:
    iterations: int = 300
    lr: float = 0.0003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_iters: int = 20
    # (iteration, multiplier)
    milestones: list = field(default_factory=list)
    tau: float = 0.1
    phi: float = 0.7
    cost_mode: str = "semantic"
    eps_schedule: list = field(default_factory=lambda: list(DEFAULT_EPS_SCHEDULE))
    sinkhorn_max_iter: int = 2000
    sinkhorn_tol: float = 1e-7
    init_std: float = 0.01
    # the projection head is untrained before the first session, so it learns faster
    head_lr_scale: float = 100.0
    # also train the residual adapter on the classifier input (off: classifier and head only)
    train_adapter: bool = False

    @property
    def trainable(self):
        return FINETUNE_KEYS if self.train_adapter else tuple(k for k in FINETUNE_KEYS if k != "adapter.w")

    @property
    def hpc(self):
        return HpcConfig(self.tau, self.phi)


@dataclass
class LossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class Metrics:
    per_class: dict[int, float]
    bAcc: float | None
    nAcc: float | None
    allAcc: float

    def to_json(self):
        return {
            "bAcc": self.bAcc,
            "nAcc": self.nAcc,
            "allAcc": self.allAcc,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


@contextmanager
def _diverges_at(it):
    try:
        yield
    except (TapeError, FloatingPointError) as exc:
        raise TrainingError(f"training diverged at iteration {it}: {exc}") from None


def _check_finite(value, it):
    if not np.isfinite(value):
        raise TrainingError(f"training diverged at iteration {it} (loss {value})")


def pretrain_base(world, cfg, seed):
    """Train extractor + base classifier with softmax cross-entropy."""
    base = [c for c in world.registry if c.kind == "base"]
    ckpt = init_checkpoint(base, world.config.raw_dim, cfg.hidden_dim, cfg.feature_dim, cfg.projection_dim, seed)
    data = world.train.only([c.class_id for c in base])
    if len(data) == 0:
        raise TrainingError("world has no base training samples")
    if cfg.epochs < 0:
        raise ValueError("epochs must be >= 0")
    row_of = {c.class_id: i for i, c in enumerate(base)}
    targets = np.array([row_of[y] for y in data.y])
    batches_per_epoch = -(-len(data) // cfg.batch_size)
    opt = SGD(
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.warmup_iters,
        [(int(e * batches_per_epoch), float(m)) for e, m in cfg.milestones],
    )
    trainable = EXTRACTOR_KEYS + ("classifier.w", "classifier.b")
    params = dict(ckpt.params)
    rng = np.random.default_rng([seed, 1])
    it = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(data), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with _diverges_at(it):
                tape = Tape()
                p = leaves(tape, params, trainable)
                feats = tape_extractor(tape, p, data.x[idx])
                loss = cross_entropy(tape, tape_logits(tape, p, feats), targets[idx])
                value = float(tape.value(loss))
                _check_finite(value, it)
                opt.step(params, tape.backward(loss), it)
            total += value * len(idx)
            it += 1
        ckpt.log.append({"stage": "base", "epoch": epoch, "loss": total / len(data)})
    ckpt.params = params
    return ckpt


def _session_index(stage):
    return 0 if stage == "base" else int(stage.split("-")[1])


def finetune_incremental(ckpt, store, support, weights, cfg, seed=None):
    """Enroll the classes present in ``support`` without touching base data.

    Returns the new checkpoint and the store extended with prototypes of the
    newly enrolled classes. The extractor is frozen; classifier and projection
    head (optionally the adapter) train on ``L_cls + lambda1 * L_hpc + lambda2 * L_cal``.
    """
    if len(support) == 0:
        raise ValueError("support set is empty (K must be >= 1)")
    new_ids = sorted(set(support.y.tolist()) - {BACKGROUND})
    clash = [k for k in new_ids if k in ckpt.class_ids]
    if clash:
        raise ValueError(f"support contains already-registered classes {clash}")
    seed = ckpt.seed if seed is None else seed
    session = _session_index(ckpt.stage) + 1
    rng = np.random.default_rng([seed, 2, session])

    out = ckpt.copy()
    names = {c.class_id: c for c in support.classes}
    new_classes = [names.get(k, ClassInfo(k, f"class_{k}", "novel")) for k in new_ids]
    out.registry = list(ckpt.registry) + new_classes
    params = out.params
    params["classifier.w"] = np.concatenate(
        [params["classifier.w"], rng.normal(0.0, cfg.init_std, (len(new_ids), out.feature_dim))]
    )
    params["classifier.b"] = np.concatenate([params["classifier.b"], np.zeros(len(new_ids))])
    out.stage = f"session-{session}"

    keep = support.y != BACKGROUND
    feats = extract_features(params, support.x)
    row_of = {k: i for i, k in enumerate(out.class_ids)}
    targets = np.array([row_of[y] for y in support.y[keep]])

    proto_all = store.all_prototype_matrix()
    proto_base = store.base_matrix()
    dists = store.distributions()
    cost = None
    if weights.lambda2 > 0:
        means = store.means()
        start = adapt(params, feats)
        for k in new_ids:
            means[k] = compute_prototype(start[support.y == k], k)
        cost = build_cost_matrix(out.class_ids, store.base_ids, means, cfg.cost_mode)

    opt = SGD(
        cfg.lr,
        cfg.momentum,
        cfg.weight_decay,
        cfg.warmup_iters,
        [(int(i), float(m)) for i, m in cfg.milestones],
        lr_scale={"head.w": cfg.head_lr_scale},
    )
    cal_state = CalibrationState()
    hcfg = cfg.hpc
    for it in range(cfg.iterations):
        with _diverges_at(it):
            tape = Tape()
            p = leaves(tape, params, cfg.trainable)
            p.setdefault("adapter.w", tape.const(params["adapter.w"]))
            z = tape_adapt(tape, p, tape.const(feats[keep]))
            terms = {"cls": cross_entropy(tape, tape_logits(tape, p, z), targets)}
            if weights.lambda1 > 0:
                emb = project(tape, z, p["head.w"])
                pz = project(tape, tape.const(proto_all), p["head.w"])
                terms["hpc"] = hpc_loss(tape, emb, support.u[keep], support.y[keep], pz, hcfg)
            if weights.lambda2 > 0:
                pl = tape_logits(tape, p, tape.const(proto_base))
                terms["cal"], _ = calibration_loss(
                    tape, pl, dists, cost, cal_state, cfg.eps_schedule, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol
                )
            loss = terms["cls"]
            if "hpc" in terms:
                loss = tape.add(loss, tape.scale(terms["hpc"], weights.lambda1))
            if "cal" in terms:
                loss = tape.add(loss, tape.scale(terms["cal"], weights.lambda2))
            value = float(tape.value(loss))
            _check_finite(value, it)
            opt.step(params, tape.backward(loss), it)
        if it == cfg.iterations - 1 or it % 50 == 0:
            entry = {"stage": out.stage, "iteration": it, "loss": value}
            entry.update({k: float(tape.value(v)) for k, v in terms.items()})
            out.log.append(entry)

    final = adapt(params, feats)
    new_protos = [Prototype(c.class_id, c.name, compute_prototype(final[support.y == c.class_id], c.class_id)) for c in new_classes]
    return out, store.with_novel(new_protos)


def evaluate(ckpt, test):
    """Per-class accuracy, macro-averaged over base, novel and all test classes.

    Test classes the checkpoint has no head for are scored 0.
    """
    keep = test.y != BACKGROUND
    y = test.y[keep]
    if len(y) == 0:
        raise ValueError("empty test set")
    pred = predict(ckpt, test.x[keep])
    kinds = {c.class_id: c.kind for c in test.classes}
    kinds.update({c.class_id: c.kind for c in ckpt.registry})
    per_class = {}
    for k in sorted(set(y.tolist())):
        m = y == k
        per_class[k] = float(np.mean(pred[m] == k))

    def avg(ids):
        return float(np.mean([per_class[k] for k in ids])) if ids else None

    base = [k for k in per_class if kinds.get(k) == "base"]
    novel = [k for k in per_class if kinds.get(k) != "base"]
    return Metrics(per_class, avg(base), avg(novel), avg(list(per_class)))


def embedding_gap(ckpt, test):
    """Mean intra-class minus mean inter-class cosine of test embeddings.

    Samples whose projection is exactly zero (every extractor unit inactive)
    have no direction and are left out.
    """
    keep = test.y != BACKGROUND
    z = adapt(ckpt.params, extract_features(ckpt.params, test.x[keep])) @ ckpt.params["head.w"].T
    alive = np.linalg.norm(z, axis=1) > 0
    if not alive.all():
        logger.warning("embedding_gap: skipping %d zero-norm embeddings", int((~alive).sum()))
    intra, inter = class_cosines(embed(ckpt.params, test.x[keep][alive]), test.y[keep][alive])
    return intra - inter


def variant_weights(variant):
    return {
        "b": LossWeights(0.0, 0.0),
        "c": LossWeights(0.5, 0.0),
        "d": LossWeights(0.0, 0.5),
        "e": LossWeights(0.5, 0.5),
    }[variant]


def run_seed(world_cfg, pretrain_cfg, finetune_cfg, shots, seed, weights=None):
    """All variants for one seed; returns rows and per-variant checkpoints' embedding gaps."""
    wc = WorldConfig(**{**world_cfg.__dict__, "seed": seed})
    world = generate_world(wc)
    ckpt = pretrain_base(world, pretrain_cfg, seed)
    store = extract_store(ckpt, world.train.only(world.base_ids))
    support = sample_kshot(world.train, world.novel_ids, shots, seed)
    weights = weights or {}
    rows = []
    m = evaluate(ckpt, world.test)
    rows.append({"variant": "a", "seed": seed, "bAcc": m.bAcc, "nAcc": m.nAcc, "allAcc": m.allAcc, "gap": embedding_gap(ckpt, world.test)})
    for v in VARIANTS[1:]:
        w = weights.get(v, variant_weights(v))
        tuned, _ = finetune_incremental(ckpt, store, support, w, finetune_cfg, seed)
        m = evaluate(tuned, world.test)
        rows.append({"variant": v, "seed": seed, "bAcc": m.bAcc, "nAcc": m.nAcc, "allAcc": m.allAcc, "gap": embedding_gap(tuned, world.test)})
    return rows


def _run_seed_star(args):
    return run_seed(*args)


def run_ablation(world_cfg, pretrain_cfg, finetune_cfg, shots=10, seeds=(0, 1, 2, 3, 4), workers=1):
    """Five variants per seed on shared data; returns per-seed rows followed by median rows."""
    jobs = [(world_cfg, pretrain_cfg, finetune_cfg, shots, s) for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_seed_star, jobs))
    else:
        results = [run_seed(*j) for j in jobs]
    rows = [r for seed_rows in results for r in seed_rows]
    rows.sort(key=lambda r: (VARIANTS.index(r["variant"]), seeds.index(r["seed"]) if isinstance(seeds, tuple) else list(seeds).index(r["seed"])))
    medians = []
    for v in VARIANTS:
        sel = [r for r in rows if r["variant"] == v]
        medians.append(
            {
                "variant": v,
                "seed": "median",
                **{k: float(np.median([r[k] for r in sel])) for k in ("bAcc", "nAcc", "allAcc", "gap")},
            }
        )
    return rows + medians
