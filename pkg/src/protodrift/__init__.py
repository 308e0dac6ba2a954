"""Few-shot class enrollment without base-data replay.

A frozen feature extractor, a prototype store of base classes, a hybrid
prototypical contrastive loss and an optimal-transport calibration term,
exercised on a synthetic proposal-feature world.
"""

from .harness import FinetuneConfig, LossWeights, Metrics, PretrainConfig, evaluate, finetune_incremental, pretrain_base, run_ablation
from .protostore import PrototypeStore, extract_store, load_store, save_store
from .synth import WorldConfig, generate_world, sample_kshot

__all__ = [
    "FinetuneConfig",
    "LossWeights",
    "Metrics",
    "PretrainConfig",
    "PrototypeStore",
    "WorldConfig",
    "evaluate",
    "extract_store",
    "finetune_incremental",
    "generate_world",
    "load_store",
    "pretrain_base",
    "run_ablation",
    "sample_kshot",
    "save_store",
]
__version__ = "0.1.0"
