"""Pre-training: masked item prediction (MIP) and substituted attribute discrimination (SAD)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import MASK, PAD, Catalog
from .model import DualEncoder, last_state, pad_batch
from .negsampler import NegativePolicy

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    mask_prob: float = 0.2
    sub_prob: float = 0.5
    sad_prob: float = 0.2  # fraction of positions whose attribute sets get corrupted
    lambda_mip: float = 1.0
    lambda_sad: float = 1.0
    batch_size: int = 256
    clip: float = 0.1
    sad_raw_attributes: bool = False  # score SAD against attribute embeddings, not encoder output


@dataclass
class MipBatch:
    masked: np.ndarray  # (B, T) item ids with MASK at masked positions
    positions: np.ndarray  # (N, 2) (row, position) of every masked slot
    truths: np.ndarray  # (N,) original items
    attrs: np.ndarray  # (N, n) serialised attribute sets of the original items
    negatives: np.ndarray  # (N,)


@dataclass
class SadBatch:
    items: np.ndarray  # (B, T) uncorrupted item ids
    positions: np.ndarray  # (N, 2)
    attrs: np.ndarray  # (N, n) corrupted attribute sequences
    labels: np.ndarray  # (N, n) 1 = original, 0 = substituted; PAD slots 0
    weights: np.ndarray  # (N, n) 1 on real attribute slots


def select_positions(seq, prob: float, rng: np.random.Generator) -> np.ndarray:
    """Indices of non-PAD entries chosen independently with ``prob``.

    If nothing is chosen, one non-PAD position is picked uniformly so every
    sequence yields at least one training signal.
    """
    seq = np.asarray(seq)
    real = np.flatnonzero(seq != PAD)
    if len(real) == 0:
        raise ValueError("sequence has no items")
    chosen = real[rng.random(len(real)) < prob]
    if len(chosen) == 0:
        chosen = real[[rng.integers(len(real))]]
    return chosen


def mask_sequence(seq, mask_prob: float, rng: np.random.Generator):
    """Replace a random subset of items with MASK; returns (masked copy, masked positions)."""
    if not 0 < mask_prob < 1:
        raise ValueError("mask_prob must lie in (0, 1)")
    seq = np.asarray(seq, dtype=np.int64)
    pos = select_positions(seq, mask_prob, rng)
    out = seq.copy()
    out[pos] = MASK
    return out, pos


def corrupt_attributes(attrs, sub_prob: float, n_attrs: int, rng: np.random.Generator):
    """Substitute each attribute with probability ``sub_prob`` by one outside the set.

    Substitutes are distinct and drawn uniformly from the complement. Returns
    ``(corrupted, labels)`` with label 1 for kept and 0 for substituted slots.
    """
    attrs = [int(a) for a in attrs]
    if not attrs:
        raise ValueError("attribute set is empty")
    if len(set(attrs)) >= n_attrs:
        raise ValueError("no negative attribute exists for this item")
    replace = rng.random(len(attrs)) < sub_prob
    labels = np.where(replace, 0, 1).astype(np.int64)
    n_sub = int(replace.sum())
    if n_sub == 0:
        return tuple(attrs), labels
    own = set(attrs)
    pool = np.array([a for a in range(1, n_attrs + 1) if a not in own])
    subs = rng.choice(pool, n_sub, replace=n_sub > len(pool))
    out = np.array(attrs)
    out[replace] = subs
    return tuple(int(a) for a in out), labels


def sliding_windows(seqs, max_len: int) -> list[list[int]]:
    """Windows of length <= max_len with stride max_len // 2, always covering the tail."""
    stride = max(max_len // 2, 1)
    out = []
    for s in seqs:
        s = list(s)
        if not s:
            continue
        if len(s) <= max_len:
            out.append(s)
            continue
        starts = list(range(0, len(s) - max_len + 1, stride))
        if starts[-1] != len(s) - max_len:
            starts.append(len(s) - max_len)
        out.extend(s[a:a + max_len] for a in starts)
    return out


def build_mip(model: DualEncoder, catalog: Catalog, ids: np.ndarray, policy: NegativePolicy,
              mask_prob: float, rng) -> MipBatch:
    masked = ids.copy()
    positions = []
    for b, row in enumerate(ids):
        m, pos = mask_sequence(row, mask_prob, rng)
        masked[b] = m
        positions.extend((b, int(k)) for k in pos)
    positions = np.array(positions, dtype=np.int64).reshape(-1, 2)
    truths = ids[positions[:, 0], positions[:, 1]]
    attrs = pad_batch([catalog.item_attributes[t] for t in truths], model.cfg.max_attrs,
                      keep="first")
    negatives = policy.for_masked(masked, positions, truths, catalog.n_items, rng)
    return MipBatch(masked, positions, truths, attrs, negatives)


def build_sad(model: DualEncoder, catalog: Catalog, ids: np.ndarray, sad_prob: float,
              sub_prob: float, rng) -> SadBatch:
    positions, corrupted, labels = [], [], []
    for b, row in enumerate(ids):
        for k in select_positions(row, sad_prob, rng):
            c, y = corrupt_attributes(catalog.item_attributes[row[k]], sub_prob,
                                      catalog.n_attrs, rng)
            positions.append((b, int(k)))
            corrupted.append(c)
            labels.append(y)
    n = model.cfg.max_attrs
    attrs = pad_batch(corrupted, n, keep="first")
    lab = pad_batch(labels, n, keep="first")
    return SadBatch(ids, np.array(positions, dtype=np.int64).reshape(-1, 2), attrs, lab,
                    (attrs != PAD).astype(ad.default_dtype()))


def pairwise_loss(logits: ad.Tensor) -> ad.Tensor:
    """-mean log sigmoid(logits[:, 0] - logits[:, 1])."""
    diff = ad.sum(ad.mul_const(logits, np.array([1.0, -1.0])), axis=-1)
    return ad.neg(ad.mean(ad.log_sigmoid(diff)))


def mip_loss(model: DualEncoder, batch: MipBatch, rng=None, hidden: ad.Tensor | None = None):
    """Pairwise MIP loss; ``hidden`` lets callers reuse an item-encoder pass over ``batch.masked``."""
    if hidden is None:
        hidden = model.encode_items(batch.masked, rng)
    f = ad.gather_rows(hidden, batch.positions[:, 0], batch.positions[:, 1])
    s_a = last_state(model.encode_attributes(batch.attrs, rng), batch.attrs)
    cands = np.stack([batch.truths, batch.negatives], axis=1)
    return pairwise_loss(model.mip_logit(f, s_a, cands))


def sad_loss(model: DualEncoder, batch: SadBatch, rng=None, hidden: ad.Tensor | None = None,
             raw_attributes: bool = False):
    """Binary cross-entropy over real slots of the corrupted attribute sequences.

    ``raw_attributes`` pairs each item state with the plain attribute
    embeddings instead of the attribute encoder's output.
    """
    if hidden is None:
        hidden = model.encode_items(batch.items, rng)
    f_item = ad.gather_rows(hidden, batch.positions[:, 0], batch.positions[:, 1])
    if raw_attributes:
        f_attr = ad.embedding(model.params["attr_emb"], batch.attrs)
    else:
        f_attr = model.encode_attributes(batch.attrs, rng)
    return sad_from_logits(model.sad_logit(f_item, f_attr), batch.labels, batch.weights)


def sad_from_logits(logits: ad.Tensor, labels, weights) -> ad.Tensor:
    sign = 2.0 * np.asarray(labels, dtype=np.float64) - 1.0
    ll = ad.mul_const(ad.log_sigmoid(ad.mul_const(logits, sign)), weights)
    return ad.scale(ad.sum(ll), -1.0 / max(float(np.sum(weights)), 1.0))


def pretrain_step(model: DualEncoder, catalog: Catalog, seqs, policy: NegativePolicy,
                  cfg: PretrainConfig, opt: ad.Adam | None, rng) -> tuple[float, float]:
    """One batch: build instances, weighted joint loss, backward, clip, Adam.

    With ``opt=None`` only the (dropout-free) losses are computed.
    Returns (mip_loss, sad_loss); a disabled task reports 0.
    """
    ids = pad_batch(seqs, model.cfg.max_items)
    B = len(ids)
    use_mip, use_sad = cfg.lambda_mip > 0, cfg.lambda_sad > 0
    mip = build_mip(model, catalog, ids, policy, cfg.mask_prob, rng) if use_mip else None
    sad = build_sad(model, catalog, ids, cfg.sad_prob, cfg.sub_prob, rng) if use_sad else None
    drop = rng if opt is not None else None
    with ad.Tape() as tape:
        if use_mip and use_sad:
            hidden = model.encode_items(np.concatenate([mip.masked, ids]), drop)
            l_mip = mip_loss(model, mip, drop, hidden)
            sad_pos = sad.positions + np.array([B, 0])
            shifted = SadBatch(ids, sad_pos, sad.attrs, sad.labels, sad.weights)
            l_sad = sad_loss(model, shifted, drop, hidden, cfg.sad_raw_attributes)
            total = ad.scale(l_mip, cfg.lambda_mip) + ad.scale(l_sad, cfg.lambda_sad)
        elif use_mip:
            l_mip, l_sad = mip_loss(model, mip, drop), None
            total = ad.scale(l_mip, cfg.lambda_mip)
        elif use_sad:
            l_mip, l_sad = None, sad_loss(model, sad, drop, raw_attributes=cfg.sad_raw_attributes)
            total = ad.scale(l_sad, cfg.lambda_sad)
        else:
            raise ValueError("at least one pre-training task must be enabled")
        if opt is not None:
            grads = ad.grads_for(opt.params, tape.backward(total))
    if opt is not None:
        grads, _ = ad.clip_global_norm(grads, cfg.clip)
        opt.step(grads)
    return (l_mip.item() if l_mip is not None else 0.0,
            l_sad.item() if l_sad is not None else 0.0)


def pretrain_epoch(model: DualEncoder, catalog: Catalog, windows, policy: NegativePolicy,
                   cfg: PretrainConfig, opt: ad.Adam | None, rng) -> dict[str, float]:
    order = rng.permutation(len(windows))
    sums = np.zeros(2)
    count = 0
    for start in range(0, len(order), cfg.batch_size):
        batch = [windows[i] for i in order[start:start + cfg.batch_size]]
        sums += np.array(pretrain_step(model, catalog, batch, policy, cfg, opt, rng)) * len(batch)
        count += len(batch)
    mip, sad = sums / max(count, 1)
    return {"mip": float(mip), "sad": float(sad),
            "total": float(cfg.lambda_mip * mip + cfg.lambda_sad * sad)}


def pretrain(model: DualEncoder, catalog: Catalog, sequences, policy: NegativePolicy,
             cfg: PretrainConfig, epochs: int, lr: float = 1e-3, seed: int = 0,
             log_path=None) -> list[dict[str, float]]:
    """Joint pre-training over sliding windows of the given item sequences."""
    windows = sliding_windows(sequences, model.cfg.max_items)
    if not windows:
        raise ValueError("no pre-training sequences")
    rng = np.random.default_rng(seed)
    opt = ad.Adam(model.parameters(), lr=lr)
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            m = pretrain_epoch(model, catalog, windows, policy, cfg, opt, rng)
            history.append(m)
            log.info("pretrain epoch %d mip %.4f sad %.4f", epoch, m["mip"], m["sad"])
            if fh:
                fh.write(f"{epoch}\t{m['mip']:.6f}\t{m['sad']:.6f}\n")
    finally:
        if fh:
            fh.close()
    return history
