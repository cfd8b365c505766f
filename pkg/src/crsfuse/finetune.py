"""Pairwise fine-tuning and leave-one-out ranking evaluation (NDCG@10, MRR)."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from .data import FIRST_ITEM, ConversationRecord, InteractionLog, SplitSpec, history
from .model import DualEncoder, pad_batch
from .negsampler import NegativePolicy
from .pretrain import pairwise_loss

log = logging.getLogger(__name__)

N_EVAL_NEGATIVES = 100


@dataclass
class EvalResult:
    mrr: float
    ndcg10: float
    ranks: list[int] = field(default_factory=list)
    users: list[int] = field(default_factory=list)

    @property
    def num_records(self) -> int:
        return len(self.ranks)


def ndcg_at_10(rank: int) -> float:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / math.log2(rank + 1) if rank <= 10 else 0.0


def mrr(rank: int) -> float:
    if rank < 1:
        raise ValueError("rank must be >= 1")
    return 1.0 / rank


def rank_of_target(scores) -> int:
    """1-based rank of ``scores[0]``; ties count against it."""
    scores = np.asarray(scores)
    return 1 + int(np.sum(scores[1:] >= scores[0]))


def rank_candidates(model, history_items, attributes, target: int, negatives) -> int:
    """Rank of ``target`` among ``[target] + negatives`` under the model's scores."""
    cands = [int(target)] + [int(n) for n in negatives]
    if len(set(cands)) != len(cands):
        raise ValueError("duplicate candidate ids")
    scores = model.predict([list(history_items)], [list(attributes)], np.array([cands]))[0]
    return rank_of_target(scores)


def _batches(seq, size):
    for start in range(0, len(seq), size):
        yield seq[start:start + size]


def finetune_loss(model: DualEncoder, log_: InteractionLog, records, policy: NegativePolicy,
                  rng, train: bool = True) -> ad.Tensor:
    """-mean log sigmoid(score(target) - score(negative)) for a batch of records."""
    histories = [history(log_, r) for r in records]
    targets = np.array([r.target for r in records], dtype=np.int64)
    negatives = policy.for_targets(histories, targets, model.n_items, rng)
    item_ids = pad_batch(histories, model.cfg.max_items)
    attr_ids = pad_batch([r.attributes for r in records], model.cfg.max_attrs)
    s_i, s_a = model.user_state(item_ids, attr_ids, rng if train else None)
    return pairwise_loss(model.score(s_i, s_a, np.stack([targets, negatives], axis=1)))


@dataclass
class FinetuneConfig:
    batch_size: int = 256
    clip: float = 0.1
    patience: int = 5


def finetune_epoch(model, log_, records, policy, cfg: FinetuneConfig, opt, rng) -> float:
    order = rng.permutation(len(records))
    total, count = 0.0, 0
    for idx in _batches(order, cfg.batch_size):
        batch = [records[i] for i in idx]
        with ad.Tape() as tape:
            loss = finetune_loss(model, log_, batch, policy, rng)
            grads = ad.grads_for(opt.params, tape.backward(loss))
        grads, _ = ad.clip_global_norm(grads, cfg.clip)
        opt.step(grads)
        total += loss.item() * len(batch)
        count += len(batch)
    return total / max(count, 1)


def dataset_loss(model, log_, records, policy, cfg: FinetuneConfig, seed: int = 0) -> float:
    """Dropout-free fine-tuning loss over ``records`` with seeded negatives."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for batch in _batches(list(records), cfg.batch_size):
        total += finetune_loss(model, log_, batch, policy, rng, train=False).item() * len(batch)
    return total / max(len(records), 1)


def finetune(model: DualEncoder, log_: InteractionLog, split: SplitSpec, policy: NegativePolicy,
             cfg: FinetuneConfig, epochs: int, lr: float = 1e-4, seed: int = 0,
             eval_seed: int = 0, opt: ad.Adam | None = None) -> list[dict]:
    """Optimise the pairwise objective; early-stop on validation NDCG@10.

    When a validation split exists the best-scoring parameters are restored at
    the end. Returns per-epoch ``{"epoch", "loss", "valid_ndcg10"}`` rows.
    """
    if not split.train:
        raise ValueError("no training records")
    rng = np.random.default_rng(seed)
    opt = opt or ad.Adam(model.parameters(), lr=lr)
    history_rows = []
    best, best_state, stale = -1.0, None, 0
    for epoch in range(1, epochs + 1):
        loss = finetune_epoch(model, log_, split.train, policy, cfg, opt, rng)
        row = {"epoch": epoch, "loss": loss}
        if split.valid:
            res = evaluate(model, split.valid, log_, model.n_items, seed=eval_seed)
            row["valid_ndcg10"] = res.ndcg10
            if res.ndcg10 > best:
                best, stale = res.ndcg10, 0
                best_state = {k: p.data.copy() for k, p in model.params.items()}
            else:
                stale += 1
        history_rows.append(row)
        log.info("finetune epoch %d loss %.4f valid ndcg@10 %s", epoch, loss,
                 row.get("valid_ndcg10"))
        if split.valid and stale >= cfg.patience:
            break
    if best_state is not None:
        for k, p in model.params.items():
            p.data[...] = best_state[k]
    return history_rows


def eval_negatives(n_items: int, target: int, seed: int, user: int,
                   count: int = N_EVAL_NEGATIVES) -> np.ndarray:
    """Negatives fixed per (seed, user): uniform without replacement, excluding the target."""
    if n_items - 1 < count:
        raise ValueError(f"need at least {count + 1} items for evaluation, have {n_items}")
    rng = np.random.default_rng([seed, user])
    draw = rng.choice(n_items - 1, count, replace=False) + FIRST_ITEM
    return draw + (draw >= target)


class OracleScorer:
    """Scores 1 for the true target and 0 otherwise; consumes records in evaluation order."""

    def __init__(self, records):
        self._targets = [r.target for r in records]
        self._cursor = 0

    def predict(self, histories, attr_seqs, candidates):
        candidates = np.asarray(candidates)
        n = len(candidates)
        t = np.array(self._targets[self._cursor:self._cursor + n])
        self._cursor += n
        return (candidates == t[:, None]).astype(np.float64)


def evaluate(model, records, log_: InteractionLog, n_items: int, seed: int = 0,
             batch_size: int = 256) -> EvalResult:
    """Rank each record's target against 100 seeded negatives; average NDCG@10 and MRR.

    ``model`` is anything with ``predict(histories, attr_seqs, candidates)``.
    """
    records = list(records)
    if not records:
        raise ValueError("no evaluation records")
    if n_items < N_EVAL_NEGATIVES + 1:
        raise ValueError(f"evaluation needs at least {N_EVAL_NEGATIVES + 1} items")
    ranks = []
    for batch in _batches(records, batch_size):
        cands = np.stack([np.concatenate([[r.target],
                                          eval_negatives(n_items, r.target, seed, r.user)])
                          for r in batch])
        scores = model.predict([history(log_, r) for r in batch],
                               [r.attributes for r in batch], cands)
        ranks.extend(rank_of_target(s) for s in scores)
    return EvalResult(float(np.mean([mrr(k) for k in ranks])),
                      float(np.mean([ndcg_at_10(k) for k in ranks])),
                      ranks, [r.user for r in records])


def paired_significance(ranks_a, ranks_b) -> float:
    """Two-sided paired t-test p-value on per-record reciprocal ranks."""
    a = 1.0 / np.asarray(ranks_a, dtype=np.float64)
    b = 1.0 / np.asarray(ranks_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("rank lists differ in length")
    if len(a) < 2:
        raise ValueError("need at least two pairs")
    diff = a - b
    if np.all(diff == 0):
        return 1.0
    if np.all(diff == diff[0]):
        return 0.0
    return float(stats.ttest_rel(a, b).pvalue)


def write_report(path, name: str, result: EvalResult) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{name}\t{result.mrr:.6f}\t{result.ndcg10:.6f}\t{result.num_records}\n")


def write_ranks(path, result: EvalResult, user_raw=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for u, k in zip(result.users, result.ranks):
            fh.write(f"{user_raw[u] if user_raw else u}\t{k}\n")


def read_ranks(path) -> list[int]:
    with open(path, encoding="utf-8") as fh:
        return [int(line.split("\t")[1]) for line in fh if line.strip()]

