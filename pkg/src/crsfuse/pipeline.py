"""Pre-train / fine-tune / evaluate wiring, plus the ablation runner.

Variants mirror an architecture-matched comparison:

* ``full``       MIP + SAD pre-training with generator negatives, then fine-tuning
* ``no_mip``     SAD-only pre-training
* ``no_sad``     MIP-only pre-training (generator negatives)
* ``no_ng``      MIP + SAD with uniform negatives
* ``scratch``    no pre-training, fine-tuning from a fresh initialisation
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, SplitSpec, leave_one_out_split, pretraining_sequences
from .finetune import EvalResult, FinetuneConfig, evaluate, finetune
from .model import DualEncoder, Generator, ModelConfig
from .negsampler import NegativePolicy, train_generator
from .pretrain import PretrainConfig, pretrain

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_mip", "no_sad", "no_ng", "scratch")


@dataclass
class ExperimentSettings:
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    top_k: int = 100
    pretrain_epochs: int = 30
    pretrain_lr: float = 1e-3
    finetune_epochs: int = 50
    finetune_lr: float = 1e-4
    gen_epochs: int = 50
    gen_lr: float = 1e-3


def variant_pretrain_config(base: PretrainConfig, variant: str) -> PretrainConfig | None:
    if variant == "scratch":
        return None
    if variant == "no_mip":
        return replace(base, lambda_mip=0.0)
    if variant == "no_sad":
        return replace(base, lambda_sad=0.0)
    if variant in ("full", "no_ng"):
        return base
    raise ValueError(f"unknown variant {variant!r}")


def variant_policy(variant: str, generator: Generator | None, top_k: int) -> NegativePolicy:
    if variant in ("full", "no_sad"):
        return NegativePolicy("generator", top_k, generator)
    return NegativePolicy("uniform", top_k)


def run_variant(ds: Dataset, split: SplitSpec, variant: str, seed: int,
                settings: ExperimentSettings, generator: Generator | None = None,
                pretrained: DualEncoder | None = None) -> tuple[DualEncoder, EvalResult]:
    """Pre-train (unless scratch or ``pretrained`` given), fine-tune, evaluate on test."""
    cat = ds.catalog
    if pretrained is not None:
        model = pretrained
    else:
        model = DualEncoder(settings.model, cat.n_items, cat.n_attrs, seed=seed)
        pcfg = variant_pretrain_config(settings.pretrain, variant)
        if pcfg is not None:
            policy = variant_policy(variant, generator, settings.top_k)
            pretrain(model, cat, pretraining_sequences(ds.log, split), policy, pcfg,
                     settings.pretrain_epochs, settings.pretrain_lr, seed=seed)
    finetune(model, ds.log, split, NegativePolicy("uniform"), settings.finetune,
             settings.finetune_epochs, settings.finetune_lr, seed=seed, eval_seed=seed)
    return model, evaluate(model, split.test, ds.log, cat.n_items, seed=seed)


def compare_variants(ds: Dataset, seed: int, settings: ExperimentSettings,
                     variants=VARIANTS) -> dict[str, EvalResult]:
    split = leave_one_out_split(ds.records)
    generator = None
    if any(v in ("full", "no_sad") for v in variants):
        generator, _ = train_generator(pretraining_sequences(ds.log, split), ds.catalog.n_items,
                                       settings.model, settings.gen_epochs, settings.gen_lr,
                                       settings.pretrain.batch_size, seed=seed)
    results = {}
    for v in variants:
        _, results[v] = run_variant(ds, split, v, seed, settings, generator)
        log.info("seed %d %-8s mrr %.4f ndcg@10 %.4f", seed, v, results[v].mrr,
                 results[v].ndcg10)
    return results


def mean_metric(per_seed: list[dict[str, EvalResult]], variant: str, metric: str) -> float:
    return float(np.mean([getattr(r[variant], metric) for r in per_seed]))
