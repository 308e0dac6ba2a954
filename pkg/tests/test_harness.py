import copy
import json

import numpy as np
import pytest

from protodrift.harness import (
    VARIANTS,
    FinetuneConfig,
    LossWeights,
    PretrainConfig,
    TrainingError,
    embedding_gap,
    evaluate,
    finetune_incremental,
    pretrain_base,
    run_ablation,
    variant_weights,
)
from protodrift.model import EXTRACTOR_KEYS, Checkpoint, init_checkpoint, load_checkpoint, predict, save_checkpoint
from protodrift.protostore import load_store, save_store
from protodrift.synth import ClassInfo, Dataset, WorldConfig, generate_world, load_dataset, sample_kshot, save_dataset

SMALL_WORLD = WorldConfig(samples_per_class_train=40, samples_per_class_test=20, seed=3)
SMALL_PRETRAIN = PretrainConfig(hidden_dim=16, feature_dim=8, projection_dim=16, epochs=3, milestones=[[2, 0.1]])


def test_zero_epochs_equals_seeded_init(world):
    ckpt = pretrain_base(world, PretrainConfig(epochs=0), 7)
    init = init_checkpoint(ckpt.registry, 16, 64, 32, 128, 7)
    for k in init.params:
        assert ckpt.params[k].tobytes() == init.params[k].tobytes()


def test_base_accuracy_at_least_095(base_ckpt, world):
    m = evaluate(base_ckpt, world.test.only(world.base_ids))
    assert m.bAcc >= 0.95


def test_pretrain_deterministic():
    w = generate_world(SMALL_WORLD)
    a, b = pretrain_base(w, SMALL_PRETRAIN, 1), pretrain_base(w, SMALL_PRETRAIN, 1)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())


def test_pretrain_divergence_names_iteration():
    w = generate_world(SMALL_WORLD)
    with pytest.raises(TrainingError, match="iteration"):
        pretrain_base(w, PretrainConfig(hidden_dim=16, feature_dim=8, epochs=2, lr=1e6, warmup_iters=0), 0)


def test_checkpoint_round_trip(base_ckpt, tmp_path):
    save_checkpoint(base_ckpt, tmp_path / "c.json")
    back = load_checkpoint(tmp_path / "c.json")
    assert back.fingerprint() == base_ckpt.fingerprint()
    for k, v in base_ckpt.params.items():
        assert np.array_equal(back.params[k], v)


def test_checkpoint_rejects_row_mismatch(base_ckpt):
    with pytest.raises(ValueError, match="rows"):
        Checkpoint(base_ckpt.params, base_ckpt.registry[:-1])


def test_base_checkpoint_scores_novel_zero(base_ckpt, world):
    m = evaluate(base_ckpt, world.test.only(world.novel_ids))
    assert m.nAcc == 0.0
    full = evaluate(base_ckpt, world.test)
    assert full.nAcc == 0.0
    assert full.allAcc == pytest.approx(0.7 * full.bAcc, abs=1e-12)


def test_single_correct_sample(base_ckpt, world):
    x = world.test.x[:1]
    label = int(predict(base_ckpt, x)[0])
    m = evaluate(base_ckpt, Dataset(x, [label], [1.0], world.test.classes))
    assert m.per_class == {label: 1.0}


def test_duplication_invariance(base_ckpt, world):
    t = world.test
    doubled = Dataset(np.concatenate([t.x, t.x]), np.concatenate([t.y, t.y]), np.concatenate([t.u, t.u]), t.classes)
    a, b = evaluate(base_ckpt, t), evaluate(base_ckpt, doubled)
    for key in ("bAcc", "nAcc", "allAcc"):
        assert abs(getattr(a, key) - getattr(b, key)) <= 1e-12


def test_empty_test_set_raises(base_ckpt, world):
    with pytest.raises(ValueError):
        evaluate(base_ckpt, world.test.only([]))


def test_finetune_freezes_extractor_bitwise(base_ckpt, store, support, short_finetune):
    before = {k: base_ckpt.params[k].tobytes() for k in EXTRACTOR_KEYS}
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(), short_finetune, 0)
    for k in EXTRACTOR_KEYS:
        assert tuned.params[k].tobytes() == before[k]
        assert base_ckpt.params[k].tobytes() == before[k]


def test_finetune_extends_registry_in_order(base_ckpt, store, support, short_finetune):
    tuned, new_store = finetune_incremental(base_ckpt, store, support, LossWeights(), short_finetune, 0)
    assert tuned.class_ids == base_ckpt.class_ids + [7, 8, 9]
    assert tuned.params["classifier.w"].shape[0] == 10
    assert tuned.stage == "session-1"
    assert [p.class_id for p in new_store.novel] == [7, 8, 9]
    assert new_store.base == store.base


def test_new_rows_are_small_gaussian(base_ckpt, store, support):
    cfg = FinetuneConfig(iterations=0)
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(0, 0), cfg, 0)
    rows = tuned.params["classifier.w"][7:]
    assert rows.shape == (3, 32)
    assert 0.003 < rows.std() < 0.03


def test_noop_session_keeps_base_predictions(base_ckpt, store, support, world):
    cfg = FinetuneConfig(iterations=0, lr=1e-12)
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(0, 0), cfg, 0)
    base_test = world.test.only(world.base_ids)
    assert np.array_equal(predict(tuned, base_test.x), predict(base_ckpt, base_test.x))


def test_registered_class_rejected(base_ckpt, store, world, short_finetune):
    clash = sample_kshot(world.train, [0, 7], 2, 0)
    with pytest.raises(ValueError, match="already-registered"):
        finetune_incremental(base_ckpt, store, clash, LossWeights(), short_finetune, 0)


def test_empty_support_rejected(base_ckpt, store, world, short_finetune):
    with pytest.raises(ValueError):
        finetune_incremental(base_ckpt, store, world.train.only([]), LossWeights(), short_finetune, 0)


def test_replay_free_with_base_data_deleted(world, base_ckpt, store, tmp_path):
    """Sessions run from files holding only the checkpoint, store and novel pool."""
    save_checkpoint(base_ckpt, tmp_path / "base.json")
    save_store(store, tmp_path / "store.json")
    save_dataset(world.train.only(world.base_ids), tmp_path / "base_train.json")
    save_dataset(world.train.only(world.novel_ids), tmp_path / "novel_pool.json")
    (tmp_path / "base_train.json").unlink()
    ckpt = load_checkpoint(tmp_path / "base.json")
    st = load_store(tmp_path / "store.json", ckpt.registry)
    pool = load_dataset(tmp_path / "novel_pool.json")
    assert set(pool.y.tolist()) == set(world.novel_ids)
    support = sample_kshot(pool, world.novel_ids, 10, 0)
    tuned, _ = finetune_incremental(ckpt, st, support, LossWeights(), FinetuneConfig(iterations=100, lr=0.001), 0)
    assert evaluate(tuned, world.test).nAcc > 0


def test_finetune_deterministic(base_ckpt, store, support, short_finetune):
    a, sa = finetune_incremental(base_ckpt, store, support, LossWeights(), short_finetune, 0)
    b, sb = finetune_incremental(base_ckpt, store, support, LossWeights(), short_finetune, 0)
    assert json.dumps(a.to_json()) == json.dumps(b.to_json())
    assert sa == sb


def test_second_session_uses_earlier_novel_prototypes(world, base_ckpt, store):
    first = sample_kshot(world.train, [7], 5, 0)
    mid, mid_store = finetune_incremental(base_ckpt, store, first, LossWeights(), FinetuneConfig(iterations=10), 0)
    second = sample_kshot(world.train, [8, 9], 5, 0)
    final, final_store = finetune_incremental(mid, mid_store, second, LossWeights(), FinetuneConfig(iterations=10), 0)
    assert final.stage == "session-2"
    assert final.class_ids == list(range(10))
    assert [p.class_id for p in final_store.novel] == [7, 8, 9]
    for k in EXTRACTOR_KEYS:
        assert np.array_equal(final.params[k], base_ckpt.params[k])


def test_unknown_support_classes_get_registered(base_ckpt, store, world, short_finetune):
    support = sample_kshot(world.train, [7], 3, 0)
    support.classes = []
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(0, 0), short_finetune, 0)
    assert tuned.registry[-1] == ClassInfo(7, "class_7", "novel")


def test_training_log_records_terms(base_ckpt, store, support, short_finetune):
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(), short_finetune, 0)
    last = tuned.log[-1]
    assert {"cls", "hpc", "cal", "loss"} <= set(last)
    assert last["loss"] == pytest.approx(last["cls"] + 0.5 * last["hpc"] + 0.5 * last["cal"], rel=1e-12)


def test_hpc_does_not_reach_classifier(base_ckpt, store, support, world, short_finetune):
    """With the adapter frozen the contrastive term only trains the projection head."""
    b, _ = finetune_incremental(base_ckpt, store, support, variant_weights("b"), short_finetune, 0)
    c, _ = finetune_incremental(base_ckpt, store, support, variant_weights("c"), short_finetune, 0)
    assert np.array_equal(b.params["classifier.w"], c.params["classifier.w"])
    assert not np.array_equal(b.params["head.w"], c.params["head.w"])
    assert embedding_gap(c, world.test) != embedding_gap(b, world.test)


def test_adapter_trains_when_enabled(base_ckpt, store, support):
    cfg = FinetuneConfig(iterations=10, train_adapter=True)
    tuned, _ = finetune_incremental(base_ckpt, store, support, LossWeights(), cfg, 0)
    assert np.any(tuned.params["adapter.w"] != 0)
    frozen, _ = finetune_incremental(base_ckpt, store, support, LossWeights(), FinetuneConfig(iterations=10), 0)
    assert not np.any(frozen.params["adapter.w"])


def test_gap_skips_dead_samples(caplog):
    w = generate_world(SMALL_WORLD)
    ckpt = pretrain_base(w, SMALL_PRETRAIN, 0)
    # a huge negative bias kills every unit, leaving nothing to compare
    dead = ckpt.copy()
    dead.params["extractor.b2"] = np.full_like(dead.params["extractor.b2"], -1e9)
    with pytest.raises(ValueError):
        embedding_gap(dead, w.test)
    with caplog.at_level("WARNING"):
        gap = embedding_gap(ckpt, w.test)
    assert np.isfinite(gap)


def test_variant_weights_table():
    assert variant_weights("b") == LossWeights(0, 0)
    assert variant_weights("c") == LossWeights(0.5, 0)
    assert variant_weights("d") == LossWeights(0, 0.5)
    assert variant_weights("e") == LossWeights(0.5, 0.5)
    with pytest.raises(ValueError):
        LossWeights(-0.1, 0)


def test_ablation_shape_and_order():
    ft = FinetuneConfig(iterations=5)
    rows = run_ablation(SMALL_WORLD, SMALL_PRETRAIN, ft, shots=3, seeds=(0, 1))
    assert len(rows) == 5 * 2 + 5
    assert [(r["variant"], r["seed"]) for r in rows[:10]] == [(v, s) for v in VARIANTS for s in (0, 1)]
    assert [r["seed"] for r in rows[10:]] == ["median"] * 5
    assert all(r["nAcc"] == 0.0 for r in rows if r["variant"] == "a")


def test_ablation_workers_match_serial():
    ft = FinetuneConfig(iterations=5)
    serial = run_ablation(SMALL_WORLD, SMALL_PRETRAIN, ft, shots=3, seeds=(0, 1))
    parallel = run_ablation(SMALL_WORLD, SMALL_PRETRAIN, ft, shots=3, seeds=(0, 1), workers=2)
    assert serial == parallel


def test_world_config_not_mutated():
    cfg = copy.deepcopy(SMALL_WORLD)
    run_ablation(cfg, SMALL_PRETRAIN, FinetuneConfig(iterations=2), shots=2, seeds=(5,))
    assert cfg == SMALL_WORLD
