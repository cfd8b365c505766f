"""Negative items: uniform sampling and a frozen causal generator."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import FIRST_ITEM, MASK, PAD, Catalog, InteractionLog
from .model import Generator, ModelConfig, generator_forward, pad_batch

log = logging.getLogger(__name__)


class SamplingError(ValueError):
    pass


def uniform_negative(n_items: int, exclusions, rng: np.random.Generator) -> int:
    """Uniform draw over real items not in ``exclusions`` (PAD/MASK never returned)."""
    excl = {int(e) for e in exclusions if FIRST_ITEM <= int(e) < FIRST_ITEM + n_items}
    if len(excl) >= n_items:
        raise SamplingError("no valid item left to sample")
    if len(excl) * 4 < n_items:
        while True:
            cand = int(rng.integers(FIRST_ITEM, FIRST_ITEM + n_items))
            if cand not in excl:
                return cand
    pool = np.setdiff1d(np.arange(FIRST_ITEM, FIRST_ITEM + n_items), np.fromiter(excl, int))
    return int(pool[rng.integers(len(pool))])


def uniform_negatives(n_items: int, positives, rng: np.random.Generator) -> np.ndarray:
    """One uniform negative per positive, never equal to it (vectorised)."""
    positives = np.asarray(positives, dtype=np.int64)
    if n_items < 2:
        raise SamplingError("need at least two items")
    # draw from n_items - 1 slots and skip over the positive
    draw = rng.integers(FIRST_ITEM, FIRST_ITEM + n_items - 1, size=positives.shape)
    return draw + (draw >= positives)


def sample_from_scores(scores: np.ndarray, exclusions, top_k: int,
                       rng: np.random.Generator) -> int:
    """Sample an item id from softmax over the ``top_k`` best non-excluded scores.

    ``scores[k]`` belongs to item ``k + 2``. Ties at the cut-off keep lower ids.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    s = np.array(scores, dtype=np.float64)
    for e in exclusions:
        k = int(e) - FIRST_ITEM
        if 0 <= k < len(s):
            s[k] = -np.inf
    valid = np.isfinite(s).sum()
    if valid == 0:
        raise SamplingError("no valid item left to sample")
    k = min(top_k, int(valid))
    order = np.argsort(-s, kind="stable")[:k]
    top = s[order]
    p = np.exp(top - top.max())
    p /= p.sum()
    return int(order[rng.choice(k, p=p)]) + FIRST_ITEM


def generator_sample(gen: Generator, prefix, exclusions, top_k: int,
                     rng: np.random.Generator) -> int:
    """One negative for the item following ``prefix``; uniform if the prefix is empty."""
    prefix = [int(i) for i in prefix if int(i) not in (PAD, MASK)]
    if not prefix:
        return uniform_negative(gen.n_items, exclusions, rng)
    return sample_from_scores(generator_forward(gen, prefix), exclusions, top_k, rng)


@dataclass
class NegativePolicy:
    kind: str = "uniform"  # "uniform" | "generator"
    top_k: int = 100
    generator: Generator | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("uniform", "generator"):
            raise ValueError(f"unknown negative policy {self.kind!r}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.kind == "generator" and self.generator is None:
            raise ValueError("generator policy needs a trained generator")

    def for_masked(self, masked: np.ndarray, positions, truths, n_items: int,
                   rng: np.random.Generator) -> np.ndarray:
        """Negatives for masked positions of a batch.

        ``masked`` is the (B, T) masked id matrix; ``positions`` are (b, k) pairs
        and ``truths`` the original items there. The generator sees, for each
        masked position, the left context with MASK entries removed.
        """
        truths = np.asarray(truths, dtype=np.int64)
        if self.kind == "uniform" or len(truths) == 0:
            return uniform_negatives(n_items, truths, rng)
        return self._generator_negatives(masked, positions, truths, rng)

    def for_targets(self, histories, targets, n_items: int, rng) -> np.ndarray:
        """Negatives for next-item style targets given their full left histories."""
        targets = np.asarray(targets, dtype=np.int64)
        if self.kind == "uniform":
            return uniform_negatives(n_items, targets, rng)
        out = np.empty_like(targets)
        for r, (h, t) in enumerate(zip(histories, targets)):
            out[r] = generator_sample(self.generator, h, (t,), self.top_k, rng)
        return out

    def _generator_negatives(self, masked, positions, truths, rng) -> np.ndarray:
        gen = self.generator
        masked = np.asarray(masked)
        # compact each row (drop MASK/PAD) and remember where each original slot lands
        compact, before = [], []
        for row in masked:
            keep = (row != MASK) & (row != PAD)
            compact.append(row[keep])
            before.append(np.concatenate([[0], np.cumsum(keep)]))
        ids = pad_batch(compact, gen.cfg.max_items)
        h = gen.hidden(ids).data
        shift = [max(len(c) - gen.cfg.max_items, 0) for c in compact]
        out = np.empty(len(truths), dtype=np.int64)
        rows, queries = [], []
        for n, ((b, k), t) in enumerate(zip(positions, truths)):
            n_prefix = int(before[b][k]) - shift[b]
            if n_prefix <= 0:
                out[n] = uniform_negative(gen.n_items, (t,), rng)
            else:
                rows.append(n)
                queries.append(h[b, n_prefix - 1])
        if rows:
            scores = gen.next_scores(np.stack(queries))
            for n, s in zip(rows, scores):
                out[n] = sample_from_scores(s, (truths[n],), self.top_k, rng)
        return out


def train_generator(sequences, n_items: int, cfg: ModelConfig, epochs: int = 50,
                    lr: float = 1e-3, batch_size: int = 256, seed: int = 0,
                    clip: float | None = 0.1) -> tuple[Generator, list[float]]:
    """Fit the causal generator with BPR next-item loss and uniform negatives.

    Returns the generator (treat as frozen afterwards) and per-epoch mean losses;
    entry 0 is the loss of the untrained model.
    """
    seqs = [list(s) for s in sequences if len(s) >= 2]
    if not seqs:
        raise ValueError("generator needs sequences of length >= 2")
    rng = np.random.default_rng(seed)
    gen = Generator(cfg, n_items, seed=seed)
    params = gen.parameters()
    opt = ad.Adam(params, lr=lr)
    T = cfg.max_items + 1
    windows = [s[-T:] for s in seqs]
    losses = [_generator_epoch(gen, windows, n_items, batch_size, rng, None, None)]
    for epoch in range(epochs):
        losses.append(_generator_epoch(gen, windows, n_items, batch_size, rng, opt, clip))
        log.debug("generator epoch %d loss %.4f", epoch + 1, losses[-1])
    for p in params:
        p.requires_grad = False
        p.grad = None
    return gen, losses


def _generator_loss(gen: Generator, batch, n_items, rng, train: bool):
    inputs = pad_batch([s[:-1] for s in batch], gen.cfg.max_items, keep="first")
    targets = pad_batch([s[1:] for s in batch], gen.cfg.max_items, keep="first")
    weight = (targets != PAD).astype(ad.default_dtype())
    negs = np.where(targets != PAD, uniform_negatives(n_items, np.maximum(targets, FIRST_ITEM), rng),
                    PAD)
    h = gen.hidden(inputs, rng if train else None)
    emb = gen.params["gen_item_emb"]
    pos = ad.sum(ad.mul(h, ad.embedding(emb, targets)), axis=-1)
    neg = ad.sum(ad.mul(h, ad.embedding(emb, negs)), axis=-1)
    ll = ad.mul_const(ad.log_sigmoid(pos - neg), weight)
    return ad.scale(ad.sum(ll), -1.0 / max(weight.sum(), 1.0))


def _generator_epoch(gen, windows, n_items, batch_size, rng, opt, clip) -> float:
    order = rng.permutation(len(windows))
    total, count = 0.0, 0
    for start in range(0, len(order), batch_size):
        batch = [windows[i] for i in order[start:start + batch_size]]
        if opt is None:
            loss = _generator_loss(gen, batch, n_items, rng, False)
        else:
            with ad.Tape() as tape:
                loss = _generator_loss(gen, batch, n_items, rng, True)
                grads = ad.grads_for(opt.params, tape.backward(loss))
            if clip:
                grads, _ = ad.clip_global_norm(grads, clip)
            opt.step(grads)
        total += loss.item() * len(batch)
        count += len(batch)
    return total / count
