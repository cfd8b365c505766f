"""Dual self-attentive encoder (items + attributes) and the causal generator.

Sequences are right-padded with PAD (0); position ``t`` of a sequence always
uses row ``t`` of the position matrix, and the "last state" of a sequence is
the row of its last non-PAD element (row 0 for an all-PAD sequence).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FIRST_ITEM, PAD

NEG_INF = -1e9


@dataclass
class ModelConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 2
    max_items: int = 50
    max_attrs: int = 10
    dropout: float = 0.2
    causal: bool = False

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 1 or self.max_items < 1 or self.max_attrs < 1:
            raise ValueError("layers and maximum lengths must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to two standard deviations (resampling)."""
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2
    return (x * std).astype(ad.default_dtype())


def _param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def init_encoder(cfg: ModelConfig, max_len: int, rng, prefix: str) -> dict[str, Tensor]:
    d, ff = cfg.dim, 4 * cfg.dim
    dt = ad.default_dtype()
    p = {f"{prefix}.pos": _param(trunc_normal(rng, (max_len, d)))}
    for layer in range(cfg.layers):
        q = f"{prefix}.l{layer}"
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{q}.{name}"] = _param(trunc_normal(rng, (d, d)))
            p[f"{q}.b{name[1]}"] = _param(np.zeros(d, dt))
        p[f"{q}.ln1.g"] = _param(np.ones(d, dt))
        p[f"{q}.ln1.b"] = _param(np.zeros(d, dt))
        p[f"{q}.w1"] = _param(trunc_normal(rng, (d, ff)))
        p[f"{q}.b1"] = _param(np.zeros(ff, dt))
        p[f"{q}.w2"] = _param(trunc_normal(rng, (ff, d)))
        p[f"{q}.b2"] = _param(np.zeros(d, dt))
        p[f"{q}.ln2.g"] = _param(np.ones(d, dt))
        p[f"{q}.ln2.b"] = _param(np.zeros(d, dt))
    return p


def attention_bias(ids: np.ndarray, causal: bool) -> np.ndarray:
    """Additive (B, 1, T, T) mask: PAD keys, and future keys when causal, get -1e9."""
    B, T = ids.shape
    bias = np.where(ids == PAD, NEG_INF, 0.0)[:, None, None, :]
    bias = np.broadcast_to(bias, (B, 1, T, T))
    if causal:
        future = np.triu(np.ones((T, T), dtype=bool), k=1)
        bias = bias + np.where(future, NEG_INF, 0.0)[None, None]
    return bias


def _attention(x: Tensor, p, q: str, bias, heads: int, drop: float, rng) -> Tensor:
    B, T, d = x.shape
    dh = d // heads

    def split(t):
        return ad.transpose(ad.reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    qh = split(x @ p[f"{q}.wq"] + p[f"{q}.bq"])
    kh = split(x @ p[f"{q}.wk"] + p[f"{q}.bk"])
    vh = split(x @ p[f"{q}.wv"] + p[f"{q}.bv"])
    logits = ad.scale(qh @ ad.transpose(kh, (0, 1, 3, 2)), 1.0 / math.sqrt(dh))
    weights = ad.softmax(ad.add_const(logits, np.broadcast_to(bias, logits.shape)))
    weights = ad.dropout(weights, drop, rng)
    ctx = ad.reshape(ad.transpose(weights @ vh, (0, 2, 1, 3)), (B, T, d))
    return ctx @ p[f"{q}.wo"] + p[f"{q}.bo"]


def encode(params: dict[str, Tensor], prefix: str, emb: Tensor, ids, cfg: ModelConfig,
           causal: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Self-attention stack over an id matrix (B, T); returns hidden states (B, T, d).

    ``rng`` enables dropout (training); pass None for deterministic inference.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    B, T = ids.shape
    pos = params[f"{prefix}.pos"]
    if T > pos.shape[0]:
        raise ValueError(f"sequence length {T} exceeds maximum {pos.shape[0]}")
    if ids.size and (ids.min() < 0 or ids.max() >= emb.shape[0]):
        raise ValueError("sequence contains an invalid id")
    x = ad.embedding(emb, ids) + ad.embedding(pos, np.broadcast_to(np.arange(T), (B, T)))
    bias = attention_bias(ids, causal)
    for layer in range(cfg.layers):
        q = f"{prefix}.l{layer}"
        a = _attention(x, params, q, bias, cfg.heads, cfg.dropout, rng)
        x = ad.layer_norm(x + a, params[f"{q}.ln1.g"], params[f"{q}.ln1.b"])
        h = ad.gelu(x @ params[f"{q}.w1"] + params[f"{q}.b1"])
        f = ad.dropout(h @ params[f"{q}.w2"] + params[f"{q}.b2"], cfg.dropout, rng)
        x = ad.layer_norm(x + f, params[f"{q}.ln2.g"], params[f"{q}.ln2.b"])
    return x


def last_positions(ids: np.ndarray) -> np.ndarray:
    ids = np.asarray(ids)
    lengths = (ids != PAD).sum(axis=1)
    return np.maximum(lengths - 1, 0)


def last_state(hidden: Tensor, ids) -> Tensor:
    """(B, d) rows of ``hidden`` at the last non-PAD position of each sequence."""
    ids = np.asarray(ids)
    if ids.ndim == 1:
        ids = ids[None]
    return ad.gather_rows(hidden, np.arange(ids.shape[0]), last_positions(ids))


def pad_batch(seqs, length: int | None = None, keep: str = "last") -> np.ndarray:
    """Right-pad integer sequences into a matrix, truncating to ``length``.

    ``keep='last'`` keeps the most recent elements of overlong sequences.
    """
    if length is None:
        length = max((len(s) for s in seqs), default=1) or 1
    out = np.zeros((len(seqs), length), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = list(s)
        if len(s) > length:
            s = s[-length:] if keep == "last" else s[:length]
        out[r, :len(s)] = s
    return out


def bilinear_scores(user: Tensor, emb: Tensor, candidates) -> Tensor:
    """``user[b] . emb[candidates[b, c]]`` for user (B, d) and candidates (B, C)."""
    candidates = np.asarray(candidates, dtype=np.int64)
    B, C = candidates.shape
    e = ad.embedding(emb, candidates)
    return ad.reshape(e @ ad.reshape(user, (B, user.shape[1], 1)), (B, C))


class DualEncoder:
    """Item encoder + attribute encoder with the fusion (W_M) and discrimination (W_P) heads."""

    component = "dual-encoder"

    def __init__(self, cfg: ModelConfig, n_items: int, n_attrs: int, seed: int = 0):
        self.cfg, self.n_items, self.n_attrs = cfg, n_items, n_attrs
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.params: dict[str, Tensor] = {
            "item_emb": _param(trunc_normal(rng, (n_items + FIRST_ITEM, d))),
            "attr_emb": _param(trunc_normal(rng, (n_attrs + 1, d))),
        }
        self.params.update(init_encoder(cfg, cfg.max_items, rng, "item_enc"))
        self.params.update(init_encoder(cfg, cfg.max_attrs, rng, "attr_enc"))
        self.params["w_m"] = _param(trunc_normal(rng, (2 * d, d)))
        self.params["w_p"] = _param(trunc_normal(rng, (d, d)))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def encode_items(self, ids, rng=None, causal: bool = False) -> Tensor:
        return encode(self.params, "item_enc", self.params["item_emb"], ids, self.cfg, causal, rng)

    def encode_attributes(self, ids, rng=None) -> Tensor:
        return encode(self.params, "attr_enc", self.params["attr_emb"], ids, self.cfg, False, rng)

    def user_state(self, item_ids, attr_ids, rng=None) -> tuple[Tensor, Tensor]:
        """(s_I, s_A): last-position states of both encoders, each (B, d)."""
        s_i = last_state(self.encode_items(item_ids, rng), item_ids)
        s_a = last_state(self.encode_attributes(attr_ids, rng), attr_ids)
        return s_i, s_a

    def fused(self, s_i: Tensor, s_a: Tensor) -> Tensor:
        return ad.concat([s_i, s_a], axis=-1) @ self.params["w_m"]

    def score(self, s_i: Tensor, s_a: Tensor, candidates) -> Tensor:
        """Preference scores (B, C) = [s_I; s_A]^T W_M e_i, unnormalised."""
        candidates = np.asarray(candidates, dtype=np.int64)
        if candidates.ndim == 1:
            candidates = candidates[None]
        self._check_items(candidates)
        return bilinear_scores(self.fused(s_i, s_a), self.params["item_emb"], candidates)

    def mip_logit(self, f_k: Tensor, s_a: Tensor, candidates) -> Tensor:
        """Masked-item logits (N, C): [f_k; s_A]^T W_M e_c with the shared W_M."""
        return self.score(f_k, s_a, candidates)

    def sad_logit(self, f_item: Tensor, f_attrs: Tensor) -> Tensor:
        """Substitution logits (N, n) = f_ik^T W_P f_aj for f_item (N, d), f_attrs (N, n, d)."""
        N, n, d = f_attrs.shape
        v = f_item @ self.params["w_p"]
        return ad.reshape(f_attrs @ ad.reshape(v, (N, d, 1)), (N, n))

    def predict(self, histories, attr_seqs, candidates) -> np.ndarray:
        """Inference-time scores for padded histories / attribute sequences."""
        item_ids = pad_batch(histories, self.cfg.max_items)
        attr_ids = pad_batch(attr_seqs, self.cfg.max_attrs)
        s_i, s_a = self.user_state(item_ids, attr_ids)
        return self.score(s_i, s_a, candidates).data

    def _check_items(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < FIRST_ITEM or ids.max() >= FIRST_ITEM + self.n_items):
            raise ValueError("candidate ids must be real items (not PAD/MASK)")


class Generator:
    """Causal next-item model with tied item embeddings, used as a negative sampler."""

    component = "generator"

    def __init__(self, cfg: ModelConfig, n_items: int, seed: int = 0):
        self.cfg = ModelConfig(**{**cfg.to_dict(), "causal": True})
        self.n_items = n_items
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            "gen_item_emb": _param(trunc_normal(rng, (n_items + FIRST_ITEM, cfg.dim)))}
        self.params.update(init_encoder(self.cfg, self.cfg.max_items, rng, "gen_enc"))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def hidden(self, ids, rng=None) -> Tensor:
        return encode(self.params, "gen_enc", self.params["gen_item_emb"], ids,
                      self.cfg, True, rng)

    def next_scores(self, h: np.ndarray) -> np.ndarray:
        """Scores over real items (column k is item k + 2) for hidden rows h (N, d)."""
        return h @ self.params["gen_item_emb"].data[FIRST_ITEM:].T


def generator_forward(gen: Generator, prefix) -> np.ndarray:
    """Next-item score vector over the catalog (entry k is item k + 2)."""
    prefix = [int(i) for i in prefix]
    if not prefix:
        raise ValueError("generator needs a non-empty prefix")
    ids = pad_batch([prefix], gen.cfg.max_items)
    h = gen.hidden(ids).data
    return gen.next_scores(h[0, last_positions(ids)[0]][None])[0]
