"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 runtime or training error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness, report
from .config import ConfigError, load_config, resolve_seed, save_config
from .model import load_checkpoint, save_checkpoint
from .otcal import TransportError
from .protostore import StoreError, extract_store, load_store, save_store
from .synth import generate_world, load_dataset, sample_kshot, save_dataset

logger = logging.getLogger("protodrift")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# file names inside paths.data; the base and novel training pools are kept
# apart so sessions can run with the base pool deleted
BASE_TRAIN = "base_train.json"
NOVEL_POOL = "novel_pool.json"
TEST = "test.json"


class InputError(Exception):
    pass


def _config(args):
    cfg = load_config(args.config)
    return resolve_seed(cfg, getattr(args, "seed", None))


def _existing(path, what):
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _out(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _config_copy(cfg, output):
    save_config(cfg, Path(str(output) + ".config.json"))


def cmd_pretrain(args):
    cfg = _config(args)
    world = generate_world(cfg.world)
    data = Path(cfg.paths.data)
    data.mkdir(parents=True, exist_ok=True)
    save_dataset(world.train.only(world.base_ids), data / BASE_TRAIN)
    save_dataset(world.train.only(world.novel_ids), data / NOVEL_POOL)
    save_dataset(world.test, data / TEST)
    ckpt = harness.pretrain_base(world, cfg.pretrain, cfg.seed)
    out = _out(cfg.paths.checkpoint)
    save_checkpoint(ckpt, out)
    _config_copy(cfg, out)
    print(f"pretrain: wrote {out} (fingerprint {ckpt.fingerprint()})")


def cmd_extract(args):
    cfg = _config(args)
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    base = load_dataset(_existing(Path(cfg.paths.data) / BASE_TRAIN, "base training data"))
    store = extract_store(ckpt, base)
    out = _out(args.out or cfg.paths.store)
    save_store(store, out)
    _config_copy(cfg, out)
    print(f"extract: wrote {out} ({len(store.base)} base prototypes)")


def _session_classes(selection, pool):
    available = sorted(set(pool.y.tolist()))
    if selection in (None, "all"):
        return available
    try:
        ids = [int(t) for t in selection.split(",") if t.strip()]
    except ValueError:
        raise InputError(f"--session: expected 'all' or comma-separated class ids, got {selection!r}") from None
    missing = [k for k in ids if k not in available]
    if missing or not ids:
        raise InputError(f"--session: classes {missing or ids} not in the novel pool {available}")
    return ids


def cmd_finetune(args):
    cfg = _config(args)
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    store = load_store(_existing(args.store, "store"), ckpt.registry)
    pool = load_dataset(_existing(Path(cfg.paths.data) / NOVEL_POOL, "novel pool"))
    shots = cfg.ablation.shots if args.shots is None else args.shots
    classes = _session_classes(args.session, pool)
    support = sample_kshot(pool, classes, shots, cfg.seed)
    tuned, new_store = harness.finetune_incremental(ckpt, store, support, cfg.losses, cfg.finetune, cfg.seed)
    reports = Path(cfg.paths.reports)
    out = _out(args.out or reports / f"{tuned.stage}.ckpt.json")
    out_store = _out(args.out_store or reports / f"{tuned.stage}.store.json")
    save_checkpoint(tuned, out)
    save_store(new_store, out_store)
    _config_copy(cfg, out)
    print(f"finetune: enrolled {classes} with {shots} shots; wrote {out} and {out_store}")


def cmd_eval(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    test = load_dataset(_existing(args.test, "test set"))
    if args.split != "all":
        ids = test.class_ids(args.split)
        test = test.only(ids)
    metrics = harness.evaluate(ckpt, test)
    out = _out(args.out or f"{args.checkpoint}.metrics-{args.split}.json")
    report.write_json(report.metrics_record(metrics, args.variant or ckpt.stage, ckpt.seed), out)
    parts = []
    for name, value in (("bAcc", metrics.bAcc), ("nAcc", metrics.nAcc), ("allAcc", metrics.allAcc)):
        if value is not None:
            parts.append(f"{name} {value:.4f}")
    print(f"eval[{args.split}] {ckpt.stage}: " + " ".join(parts))


def cmd_ablate(args):
    cfg = _config(args)
    workers = cfg.ablation.workers if args.workers is None else args.workers
    seeds = tuple(cfg.ablation.seeds)
    rows = harness.run_ablation(cfg.world, cfg.pretrain, cfg.finetune, cfg.ablation.shots, seeds, workers)
    reports = Path(cfg.paths.reports)
    reports.mkdir(parents=True, exist_ok=True)
    out = Path(args.out) if args.out else reports / "ablation.csv"
    _out(out)
    report.write_ablation_csv(rows, out)
    report.plot_ablation(rows, out.with_suffix(".png"))
    _config_copy(cfg, out)
    for r in rows:
        if r["seed"] == "median":
            print(f"median {r['variant']}: bAcc {r['bAcc']:.4f} nAcc {r['nAcc']:.4f} allAcc {r['allAcc']:.4f}")
    print(f"ablate: wrote {out} ({len(rows)} rows)")


def cmd_plot(args):
    ckpt = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    test = load_dataset(_existing(args.test, "test set"))
    report.emit_scatter(ckpt, test, _out(args.out))
    print(f"plot: wrote {args.out} ({len(test)} points)")


def build_parser():
    parser = argparse.ArgumentParser(prog="protodrift", description="Replay-free few-shot class enrollment on a synthetic world.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the config seed (precedence: flag, then PROTODRIFT_SEED, then config)")

    p = sub.add_parser("pretrain", help="generate data and train the base model")
    with_config(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="build the prototype store from base training data")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="store path (default paths.store)")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("finetune", help="enroll novel classes from K shots, without base data")
    with_config(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--shots", type=int, default=None, help="samples per new class (default ablation.shots)")
    p.add_argument("--session", default="all", help="'all' or comma-separated novel class ids")
    p.add_argument("--out", help="output checkpoint path")
    p.add_argument("--out-store", help="output store path")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="accuracy metrics on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--split", choices=("all", "base", "novel"), default="all")
    p.add_argument("--variant", help="label stored in the metrics JSON (default: checkpoint stage)")
    p.add_argument("--out", help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="five-variant ablation over the configured seeds")
    with_config(p)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", help="CSV path (default <paths.reports>/ablation.csv)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="PCA scatter of test embeddings as SVG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, StoreError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.TrainingError, TransportError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
