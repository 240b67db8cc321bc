import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dian.cli import RunConfig, gradcheck_batch
from dian.datamodel import ItemRef, encode_sessions
from dian.models import (
    VARIANTS,
    CheckpointError,
    DIAN,
    ModelConfig,
    checkpoint_dict,
    dian_forward,
    fuse,
    fuse_backward,
    hard_search,
    hard_search_batch,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
    target_attention,
    target_attention_backward,
)
from dian.numerics import ConfigError, ParamStore, finite_diff_gradcheck
from dian.synthgen import GenConfig, generate_dataset, generate_world
from dian.training import full_batch_loss, multitask_loss_and_grad

SMALL_MODEL = dict(d_id=6, d_cat=2, d_user=4, d_profile=2, d_crs=2, n_heads=2, mlp_hidden=[8, 4], K_s=6, K_l=20, hard_search_K=5)
GEN = GenConfig(n_users=30, n_items=60, n_categories=4, n_sessions=40, long_len_min=5, long_len_max=25, short_len_max=8, n_age=3, n_occupation=3)


@pytest.fixture(scope="module")
def data():
    world = generate_world(GEN)
    vocab = world.vocab(GEN.n_age, GEN.n_occupation)
    batch = encode_sessions(generate_dataset(world, GEN), vocab, K_s=6, K_l=20)
    return vocab, batch


def small(variant="DIAN", **kw) -> ModelConfig:
    return ModelConfig(**{**SMALL_MODEL, "variant": variant, **kw})


def test_config_validation():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig(d_id=12, d_cat=4, n_heads=5)
    with pytest.raises(ConfigError, match="decreasing"):
        ModelConfig(mlp_hidden=[16, 32])
    with pytest.raises(ConfigError, match="variant"):
        ModelConfig(variant="BOTH")


def test_hard_search_oracle():
    seq = [ItemRef(1, 2), ItemRef(2, 3), ItemRef(3, 2), ItemRef(4, 2), ItemRef(5, 1)]
    assert hard_search(seq, 2, 2) == [ItemRef(1, 2), ItemRef(3, 2)]
    assert hard_search(seq, 7, 3) == []
    assert hard_search(seq, 1, 10) == [ItemRef(5, 1)]


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=0, max_size=12), st.integers(1, 4), st.integers(1, 6))
def test_hard_search_batch_matches_list_version(cats, anchor, K):
    L = 12
    long_cat = np.zeros((1, L), dtype=np.int32)
    long_cat[0, : len(cats)] = cats
    mask = np.zeros((1, L), dtype=bool)
    mask[0, : len(cats)] = True
    pos, valid = hard_search_batch(long_cat, mask, np.array([anchor]), K)
    got = [int(p) for p, v in zip(pos[0], valid[0]) if v]
    refs = [ItemRef(i, c) for i, c in enumerate(cats)]
    assert got == [r.item_id for r in hard_search(refs, anchor, K)]
    # valid entries form a prefix
    assert list(valid[0]) == sorted(valid[0], reverse=True)


def _attn_store(wq, wk, wv) -> ParamStore:
    s = ParamStore()
    for n, w in (("wq", wq), ("wk", wk), ("wv", wv)):
        s.add(f"a.{n}", np.array(w, dtype=float))
    return s


def test_attention_hand_trace():
    # scores [1, 0] -> weights [sigmoid(1), 1 - sigmoid(1)]; values [[1, 1], [0, 1]]
    store = _attn_store(np.eye(2), [[1, 0], [0, 2]], [[1, 1], [0, 1]])
    out, _ = target_attention(
        np.array([[1.0, 0.0]]), np.array([[[1.0, 0.0], [0.0, 1.0]]]), np.ones((1, 2), bool), store, "a", 1
    )
    np.testing.assert_allclose(out[0], [0.7310585786300049, 1.0], rtol=1e-15)


def test_attention_empty_row_gives_zero():
    store = _attn_store(np.eye(2), np.eye(2), np.eye(2))
    out, _ = target_attention(np.ones((1, 2)), np.ones((1, 3, 2)), np.zeros((1, 3), bool), store, "a", 2)
    assert np.all(out == 0)


def test_attention_heads_are_independent_blocks():
    rng = np.random.default_rng(0)
    d, n = 4, 2
    store = _attn_store(*(rng.normal(size=(d, d)) for _ in range(3)))
    q, seq = rng.normal(size=(3, d)), rng.normal(size=(3, 5, d))
    mask = np.ones((3, 5), bool)
    out, _ = target_attention(q, seq, mask, store, "a", n)
    # head 0 by hand
    qh = (q @ store["a.wq"])[:, :2]
    kh = (seq @ store["a.wk"])[..., :2]
    vh = (seq @ store["a.wv"])[..., :2]
    s = np.einsum("bd,bkd->bk", qh, kh)
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(out[:, :2], np.einsum("bk,bkd->bd", w, vh), rtol=1e-12)


def test_attention_backward_gradcheck():
    rng = np.random.default_rng(1)
    d, n = 6, 3
    store = _attn_store(*(rng.normal(size=(d, d)) * 0.5 for _ in range(3)))
    q, seq = rng.normal(size=(4, d)), rng.normal(size=(4, 5, d))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [0, 0, 0, 0, 0], [1, 1, 0, 0, 0]], bool)
    up = rng.normal(size=(4, d))
    out, cache = target_attention(q, seq, mask, store, "a", n)
    dq, dseq = target_attention_backward(up, cache, store)
    rep = finite_diff_gradcheck(lambda s: float((target_attention(q, seq, mask, s, "a", n)[0] * up).sum()), store, sample=60)
    assert rep.max_rel_err < 1e-6
    h = 1e-6
    e = np.zeros_like(q)
    e[1, 2] = h
    num = ((target_attention(q + e, seq, mask, store, "a", n)[0] - target_attention(q - e, seq, mask, store, "a", n)[0]) * up).sum() / (2 * h)
    assert dq[1, 2] == pytest.approx(num, rel=1e-6)
    assert np.all(dseq[2] == 0)


@pytest.mark.parametrize("variant", VARIANTS)
def test_variant_tables(variant, data):
    vocab, _ = data
    m = DIAN(small(variant), vocab)
    names = set(m.store.names())
    assert names == set(m.expected_shapes())
    assert ("intent.mlp.w0" in names) == (variant in ("DIAN", "NO_INTENT_LOSS"))
    assert ("emb.visit" in names) == (variant in ("DIAN", "NO_INTENT_LOSS"))
    assert ("tan.tri.short.wq" in names) == (variant != "TFN_ONLY")
    assert ("tfn.tar.long.wv" in names) == (variant != "TAN_ONLY")


def test_fusion_identity_on_random_batches(data):
    vocab, batch = data
    m = DIAN(small(), vocab)
    rng = np.random.default_rng(0)
    for _ in range(50):
        tr = m.forward(batch.take(rng.integers(0, len(batch), size=16)), keep_cache=False)
        np.testing.assert_allclose(tr.y_hat, tr.y_int * tr.y_tan + (1 - tr.y_int) * tr.y_tfn, rtol=0, atol=1e-12)


def test_fuse_variants():
    yi, ya, yf = np.array([0.2]), np.array([0.9]), np.array([0.1])
    assert fuse("AVG_FUSION", yi, ya, yf)[0] == pytest.approx(0.5)
    assert fuse("TAN_ONLY", None, ya, None)[0] == 0.9
    assert fuse("DIAN", yi, ya, yf)[0] == pytest.approx(0.26)
    d_tan, d_tfn, d_int = fuse_backward("DIAN", yi, ya, yf, np.array([1.0]))
    assert (d_tan[0], d_tfn[0], d_int[0]) == pytest.approx((0.2, 0.8, 0.8))
    _, _, d_int = fuse_backward("DIAN", yi, ya, yf, np.array([1.0]), grad_to_intent=False)
    assert d_int[0] == 0.0


def test_tfn_is_trigger_blind_and_intent_is_target_blind(data):
    vocab, batch = data
    m = DIAN(small(), vocab)
    base = m.forward(batch, keep_cache=False)
    rng = np.random.default_rng(5)
    moved_trig = batch.replace(
        trigger_item=rng.integers(1, vocab.item, len(batch)), trigger_cat=rng.integers(1, vocab.category, len(batch))
    )
    moved_tar = batch.replace(
        target_item=rng.integers(1, vocab.item, len(batch)), target_cat=rng.integers(1, vocab.category, len(batch))
    )
    t1 = m.forward(moved_trig, keep_cache=False)
    t2 = m.forward(moved_tar, keep_cache=False)
    np.testing.assert_array_equal(t1.y_tfn, base.y_tfn)
    np.testing.assert_array_equal(t2.y_int, base.y_int)
    assert not np.array_equal(t1.y_tan, base.y_tan)


def test_dian_forward_rejects_other_variant(data):
    vocab, batch = data
    m = DIAN(small("TAN_ONLY"), vocab)
    assert dian_forward(m, batch.take(np.arange(3))).y_tfn is None
    with pytest.raises(ConfigError):
        dian_forward(m, batch, "DIAN")


@pytest.mark.parametrize("variant", VARIANTS)
def test_full_model_gradcheck(variant):
    cfg = RunConfig(model=ModelConfig(variant=variant))
    vocab, batch = gradcheck_batch(cfg)
    m = DIAN(cfg.model, vocab)
    rng = np.random.default_rng(1)
    for name in m.store.names():
        m.store.values[name] += rng.normal(0, 0.3, size=m.store[name].shape)
    tr = m.forward(batch)
    _, dh, di = multitask_loss_and_grad(tr, batch.click, batch.intent, 0.1)
    m.backward(tr, batch, dh, di)
    rep = finite_diff_gradcheck(lambda s: full_batch_loss(m, batch, 0.1), m.store, sample=250)
    assert rep.tables == set(m.store.names())
    assert rep.max_rel_err < 1e-4


def test_checkpoint_round_trip(tmp_path, data):
    vocab, batch = data
    m = DIAN(small(), vocab)
    m.store.values["emb.item"][3, 1] = 1 / 3
    p = tmp_path / "m.json"
    save_checkpoint(p, m)
    back = load_checkpoint(p)
    for n in m.store.names():
        np.testing.assert_array_equal(back.store[n], m.store[n])
    np.testing.assert_array_equal(back.forward(batch, keep_cache=False).y_hat, m.forward(batch, keep_cache=False).y_hat)


def test_checkpoint_validation(data):
    vocab, _ = data
    d = checkpoint_dict(DIAN(small(), vocab))
    bad = json.loads(json.dumps(d))
    del bad["tables"]["tan.mlp.b0"]
    with pytest.raises(CheckpointError, match="tan.mlp.b0"):
        model_from_checkpoint(bad)
    bad = json.loads(json.dumps(d))
    bad["tables"]["emb.cat"]["shape"] = [3, 2]
    with pytest.raises(CheckpointError, match="emb.cat"):
        model_from_checkpoint(bad)
    bad = dict(d, version=99)
    with pytest.raises(CheckpointError, match="version"):
        model_from_checkpoint(bad)


def test_init_is_seeded(data):
    vocab, _ = data
    a, b, c = DIAN(small(), vocab), DIAN(small(), vocab), DIAN(small(init_seed=1), vocab)
    assert all(np.array_equal(a.store[n], b.store[n]) for n in a.store.names())
    assert not np.array_equal(a.store["tan.mlp.w0"], c.store["tan.mlp.w0"])
