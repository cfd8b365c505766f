import math

import numpy as np
import pytest

from crsfuse import autodiff as ad
from crsfuse.autodiff import Tensor
from crsfuse.model import (DualEncoder, Generator, ModelConfig, generator_forward, last_state,
                           pad_batch)

CFG = ModelConfig(dim=8, layers=2, heads=2, max_items=6, max_attrs=4, dropout=0.0)


def randomize(model, seed=0, std=0.5):
    """Replace the tiny init with O(1) weights so perturbations are visible."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if not name.endswith((".g",)):
            p.data[...] = rng.standard_normal(p.shape) * std
    return model


# ------------------------------------------------------------------ straight-line reference

def np_layer_norm(x, g, b, eps=1e-12):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def np_encode(P, prefix, emb, seq, heads, layers, causal=False):
    """One unpadded sequence through the encoder, written with plain loops."""
    seq = list(seq)
    T, d = len(seq), emb.shape[1]
    dh = d // heads
    x = np.stack([emb[i] + P[f"{prefix}.pos"][t] for t, i in enumerate(seq)])
    for layer in range(layers):
        q = f"{prefix}.l{layer}"
        out = np.zeros_like(x)
        Q = x @ P[f"{q}.wq"] + P[f"{q}.bq"]
        K = x @ P[f"{q}.wk"] + P[f"{q}.bk"]
        V = x @ P[f"{q}.wv"] + P[f"{q}.bv"]
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for t in range(T):
                keys = range(t + 1) if causal else range(T)
                logits = np.array([Q[t, sl] @ K[s, sl] / math.sqrt(dh) for s in keys])
                w = np.exp(logits - logits.max())
                w /= w.sum()
                out[t, sl] = sum(wi * V[s, sl] for wi, s in zip(w, keys))
        a = out @ P[f"{q}.wo"] + P[f"{q}.bo"]
        x = np_layer_norm(x + a, P[f"{q}.ln1.g"], P[f"{q}.ln1.b"])
        f = np_gelu(x @ P[f"{q}.w1"] + P[f"{q}.b1"]) @ P[f"{q}.w2"] + P[f"{q}.b2"]
        x = np_layer_norm(x + f, P[f"{q}.ln2.g"], P[f"{q}.ln2.b"])
    return x


@pytest.fixture
def model(f64):
    return randomize(DualEncoder(CFG, n_items=10, n_attrs=5, seed=1))


def raw(model):
    return {k: v.data for k, v in model.params.items()}


def test_encoder_matches_reference(model):
    P = raw(model)
    seqs = [[2, 5, 7], [3, 4, 5, 6, 11]]
    hidden = model.encode_items(pad_batch(seqs, 6)).data
    for b, s in enumerate(seqs):
        ref = np_encode(P, "item_enc", P["item_emb"], s, 2, 2)
        np.testing.assert_allclose(hidden[b, :len(s)], ref, atol=1e-5)


def test_score_matches_reference(model):
    P = raw(model)
    hist, attrs, cands = [3, 4, 9], [2, 5], [2, 6, 11]
    got = model.predict([hist], [attrs], [cands])[0]
    s_i = np_encode(P, "item_enc", P["item_emb"], hist, 2, 2)[-1]
    s_a = np_encode(P, "attr_enc", P["attr_emb"], attrs, 2, 2)[-1]
    ref = [np.concatenate([s_i, s_a]) @ P["w_m"] @ P["item_emb"][c] for c in cands]
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_mip_logit_matches_reference(model):
    P = raw(model)
    seq, k, cands = [4, 1, 6, 8], 1, [[3, 7]]
    attrs = [1, 4]
    f = model.encode_items(pad_batch([seq], 6))
    f_k = ad.gather_rows(f, [0], [k])
    s_a = last_state(model.encode_attributes(pad_batch([attrs], 4)), pad_batch([attrs], 4))
    got = model.mip_logit(f_k, s_a, cands).data[0]
    fk_ref = np_encode(P, "item_enc", P["item_emb"], seq, 2, 2)[k]
    sa_ref = np_encode(P, "attr_enc", P["attr_emb"], attrs, 2, 2)[-1]
    ref = [np.concatenate([fk_ref, sa_ref]) @ P["w_m"] @ P["item_emb"][c] for c in cands[0]]
    np.testing.assert_allclose(got, ref, atol=1e-5)


def test_sad_logit_matches_reference(model):
    rng = np.random.default_rng(2)
    fi, fa = rng.standard_normal((3, 8)), rng.standard_normal((3, 4, 8))
    got = model.sad_logit(Tensor(fi), Tensor(fa)).data
    ref = [[fi[r] @ model.params["w_p"].data @ fa[r, j] for j in range(4)] for r in range(3)]
    np.testing.assert_allclose(got, ref, atol=1e-10)


def test_generator_matches_reference(f64):
    gen = randomize(Generator(CFG, n_items=10, seed=3))
    P = {k: v.data for k, v in gen.params.items()}
    prefix = [2, 9, 4]
    h = np_encode(P, "gen_enc", P["gen_item_emb"], prefix, 2, 2, causal=True)[-1]
    np.testing.assert_allclose(generator_forward(gen, prefix), P["gen_item_emb"][2:] @ h,
                               atol=1e-5)


# ------------------------------------------------------------------ hand-computed heads

def test_hand_computed_score():
    m = DualEncoder(ModelConfig(dim=2, layers=1, heads=1, max_items=2, max_attrs=2), 3, 2)
    m.params["w_m"].data[...] = np.vstack([np.eye(2), np.eye(2)])
    m.params["item_emb"].data[2] = [2.0, 3.0]
    out = m.score(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]]), [[2]]).data
    assert out[0, 0] == pytest.approx(5.0)


def test_zero_fusion_weights_give_zero_scores(model):
    model.params["w_m"].data[...] = 0
    assert np.all(model.predict([[2, 3]], [[1]], [[4, 5, 6]]) == 0)


def test_zero_embedding_candidate_logit_zero(model):
    model.params["item_emb"].data[5] = 0
    f = Tensor(np.ones((1, 8)))
    logit = model.mip_logit(f, f, [[5]]).data[0, 0]
    assert logit == 0 and 1 / (1 + math.exp(-logit)) == 0.5


def test_mip_logit_bilinear_in_candidate(model):
    f = Tensor(np.random.default_rng(0).standard_normal((1, 8)))
    before = model.mip_logit(f, f, [[6]]).data[0, 0]
    model.params["item_emb"].data[6] *= 2
    assert model.mip_logit(f, f, [[6]]).data[0, 0] == pytest.approx(2 * before)


def test_sad_identity_case(model):
    model.params["w_p"].data[...] = np.eye(8)
    e = np.zeros(8)
    e[3] = 1
    z = model.sad_logit(Tensor(e[None]), Tensor(e[None, None])).data[0, 0]
    assert z == pytest.approx(1.0)
    assert 1 / (1 + math.exp(-z)) == pytest.approx(0.7311, abs=1e-4)
    model.params["w_p"].data[...] = 0
    assert model.sad_logit(Tensor(e[None]), Tensor(e[None, None])).data[0, 0] == 0


def test_candidate_must_be_real_item(model):
    for bad in (0, 1, 12):
        with pytest.raises(ValueError):
            model.predict([[2]], [[1]], [[bad]])


def test_encode_errors(model):
    with pytest.raises(ValueError, match="exceeds"):
        model.encode_items(np.full((1, 7), 2))
    with pytest.raises(ValueError, match="invalid id"):
        model.encode_items([[2, 99]])
    with pytest.raises(ValueError):
        generator_forward(Generator(CFG, 10), [])


def test_batched_scores_match_single(model):
    rng = np.random.default_rng(4)
    hists = [list(rng.integers(2, 12, size=rng.integers(1, 7))) for _ in range(6)]
    attrs = [list(rng.integers(1, 6, size=rng.integers(1, 5))) for _ in range(6)]
    cands = rng.integers(2, 12, size=(6, 5))
    batch = model.predict(hists, attrs, cands)
    for b in range(6):
        np.testing.assert_allclose(batch[b], model.predict([hists[b]], [attrs[b]], cands[b:b + 1])[0],
                                   atol=1e-5)


# ------------------------------------------------------------------ masking / structure

def test_causal_generator_prefix_unchanged(f64):
    gen = randomize(Generator(CFG, n_items=10, seed=5))
    a = gen.hidden([[2, 3, 4, 5, 6]]).data
    b = gen.hidden([[2, 3, 4, 9, 6]]).data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
    assert not np.allclose(a[0, 3:], b[0, 3:])


def test_bidirectional_encoder_sees_the_future(model):
    a = model.encode_items([[2, 3, 4, 5, 6]]).data
    b = model.encode_items([[2, 3, 4, 9, 6]]).data
    assert not np.allclose(a[0, :3], b[0, :3])


def test_attribute_order_matters(model):
    a = model.predict([[2]], [[1, 3]], [[4]])
    b = model.predict([[2]], [[3, 1]], [[4]])
    assert not np.allclose(a, b)


def test_single_attribute_depends_only_on_its_embedding(model):
    s1 = model.encode_attributes([[2]]).data
    model.params["attr_emb"].data[4] += 1.0
    model.params["attr_enc.pos"].data[1:] += 1.0
    np.testing.assert_array_equal(model.encode_attributes([[2]]).data, s1)


def test_pad_rows_do_not_leak(model):
    ids = np.array([[2, 5, 7, 0, 0, 0], [3, 0, 0, 0, 0, 0]])
    a = model.encode_items(ids).data
    model.params["item_emb"].data[0] += 5.0
    model.params["item_enc.pos"].data[3:] += 5.0
    b = model.encode_items(ids).data
    np.testing.assert_array_equal(a[0, :3], b[0, :3])
    np.testing.assert_array_equal(a[1, :1], b[1, :1])


def test_all_pad_sequence_is_defined(model):
    h = model.encode_items(np.zeros((1, 4), dtype=int)).data
    assert np.all(np.isfinite(h))
    assert last_state(Tensor(h), np.zeros((1, 4), dtype=int)).shape == (1, 8)


def test_encoders_share_no_storage(model):
    items = [[2, 3, 4]]
    h_items = model.encode_items(items).data.copy()
    for name, p in model.params.items():
        if name.startswith("attr_"):
            p.data += 1.0
    np.testing.assert_array_equal(model.encode_items(items).data, h_items)
    ids = {id(p.data) for n, p in model.params.items() if n.startswith("item_")}
    assert not ids & {id(p.data) for n, p in model.params.items() if n.startswith("attr_")}


def test_ranking_invariant_to_constant_shift(model):
    s = model.predict([[2, 3]], [[1]], [list(range(2, 12))])[0]
    assert list(np.argsort(-s, kind="stable")) == list(np.argsort(-(s + 3.0), kind="stable"))


def test_zero_generator_weights_give_uniform_softmax():
    gen = Generator(CFG, n_items=10)
    gen.params["gen_item_emb"].data[...] = 0
    s = generator_forward(gen, [2, 3])
    p = np.exp(s - s.max())
    np.testing.assert_allclose(p / p.sum(), np.full(10, 0.1))


def test_dropout_only_with_rng(model):
    model.cfg = ModelConfig(**{**CFG.to_dict(), "dropout": 0.5})
    ids = [[2, 3, 4]]
    np.testing.assert_array_equal(model.encode_items(ids).data, model.encode_items(ids).data)
    a = model.encode_items(ids, rng=np.random.default_rng(0)).data
    assert not np.allclose(a, model.encode_items(ids).data)


def test_pad_batch_keeps_most_recent():
    np.testing.assert_array_equal(pad_batch([[1, 2, 3], [4]], 2), [[2, 3], [4, 0]])
    np.testing.assert_array_equal(pad_batch([[1, 2, 3]], 2, keep="first"), [[1, 2]])


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(dim=7, heads=2)
