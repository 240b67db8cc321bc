"""Intention Net, Trigger-Aware Net, Trigger-Free Net and their fusion.

All three sub-nets read from one set of embedding tables. Forward functions
return ``(output, cache)``; the matching ``*_backward`` consumes the cache and
accumulates parameter gradients into the store.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .datamodel import DEFAULT_K_LONG, DEFAULT_K_SHORT, EncodedBatch, ItemRef, Vocab
from .numerics import (
    ConfigError,
    ParamStore,
    average_pool,
    average_pool_backward,
    embedding_init,
    init_mlp,
    masked_softmax,
    masked_softmax_backward,
    mlp_backward,
    mlp_forward,
    sigmoid,
    sigmoid_backward,
)

VARIANTS = ("DIAN", "TAN_ONLY", "TFN_ONLY", "AVG_FUSION", "NO_INTENT_LOSS")
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d_id: int = 12
    d_cat: int = 4
    d_user: int = 8
    d_profile: int = 4
    d_crs: int = 4
    n_heads: int = 4
    mlp_hidden: list[int] = field(default_factory=lambda: [64, 32, 16])
    K_s: int = DEFAULT_K_SHORT
    K_l: int = DEFAULT_K_LONG
    hard_search_K: int = 10
    alpha: float = 0.1
    variant: str = "DIAN"
    # let the CTR loss reach the Intention Net through the fusion weights
    fusion_grad_to_intent: bool = True
    init_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    @property
    def d(self) -> int:
        return self.d_id + self.d_cat

    @property
    def d_user_total(self) -> int:
        return self.d_user + 2 * self.d_profile

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("d_id", "d_cat", "d_user", "d_profile", "d_crs", "n_heads", "K_s", "K_l", "hard_search_K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.d % self.n_heads:
            raise ConfigError(f"item width d={self.d} (d_id + d_cat) is not divisible by n_heads={self.n_heads}")
        if not self.mlp_hidden or any(a <= b for a, b in zip(self.mlp_hidden, self.mlp_hidden[1:])):
            raise ConfigError(f"model.mlp_hidden must be non-empty and strictly decreasing, got {self.mlp_hidden}")
        if self.alpha < 0:
            raise ConfigError("model.alpha must be >= 0")

    @property
    def has_intent(self) -> bool:
        return self.variant in ("DIAN", "NO_INTENT_LOSS")

    @property
    def has_tan(self) -> bool:
        return self.variant != "TFN_ONLY"

    @property
    def has_tfn(self) -> bool:
        return self.variant != "TAN_ONLY"


# ---------------------------------------------------------------- building blocks


def embed_item(store: ParamStore, items: np.ndarray, cats: np.ndarray) -> np.ndarray:
    """Item vector = item-id row concatenated with category-id row."""
    return np.concatenate([store["emb.item"][items], store["emb.cat"][cats]], axis=-1)


def embed_item_backward(store: ParamStore, items: np.ndarray, cats: np.ndarray, dout: np.ndarray) -> None:
    d_id = store["emb.item"].shape[1]
    _scatter(store, "emb.item", items, dout[..., :d_id])
    _scatter(store, "emb.cat", cats, dout[..., d_id:])


def _scatter(store: ParamStore, name: str, idx: np.ndarray, grad: np.ndarray) -> None:
    np.add.at(store.grads[name], idx.reshape(-1), grad.reshape(-1, grad.shape[-1]))


def hard_search(long_seq: Sequence[ItemRef], anchor_category: int, K: int) -> list[ItemRef]:
    """The up-to-``K`` most recent entries of ``long_seq`` in ``anchor_category``."""
    out = []
    for ref in long_seq:
        if ref.category_id == anchor_category:
            out.append(ref)
            if len(out) == K:
                break
    return out


def hard_search_batch(
    long_cat: np.ndarray, long_mask: np.ndarray, anchor_cat: np.ndarray, K: int
) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`hard_search` on padded arrays; returns positions and validity."""
    match = long_mask & (long_cat == anchor_cat[:, None])
    K = min(K, long_cat.shape[1])
    # stable sort brings matches to the front in their original (recency) order
    pos = np.argsort(~match, axis=1, kind="stable")[:, :K]
    valid = np.take_along_axis(match, pos, axis=1)
    return pos, valid


@dataclass
class AttentionCache:
    query: np.ndarray
    seq: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    weights: np.ndarray
    prefix: str


def target_attention(
    query: np.ndarray, seq: np.ndarray, mask: np.ndarray, store: ParamStore, prefix: str, n_heads: int
) -> tuple[np.ndarray, AttentionCache]:
    """Multi-head target attention of one query over a masked sequence.

    Scores are unscaled dot products of the per-head query and key projections.
    Rows with no valid position produce a zero vector.
    """
    wq, wk, wv = store[f"{prefix}.wq"], store[f"{prefix}.wk"], store[f"{prefix}.wv"]
    B, K, d = seq.shape
    if query.shape != (B, d) or wq.shape != (d, d):
        raise ConfigError(f"{prefix}: query {query.shape} / seq {seq.shape} / projection {wq.shape} mismatch")
    dh = d // n_heads
    # per-head layouts: q [B, n, dh], k/v [B, n, K, dh]
    q = (query @ wq).reshape(B, n_heads, dh)
    k = (seq @ wk).reshape(B, K, n_heads, dh).transpose(0, 2, 1, 3)
    v = (seq @ wv).reshape(B, K, n_heads, dh).transpose(0, 2, 1, 3)
    scores = np.matmul(k, q[..., None])[..., 0]
    weights = masked_softmax(scores, np.broadcast_to(mask[:, None, :], scores.shape), allow_empty=True)
    heads = np.matmul(weights[:, :, None, :], v)[:, :, 0, :]
    return heads.reshape(B, d), AttentionCache(query, seq, q, k, v, weights, prefix)


def target_attention_backward(
    dout: np.ndarray, cache: AttentionCache, store: ParamStore
) -> tuple[np.ndarray, np.ndarray]:
    """Returns gradients w.r.t. (query, seq)."""
    B, n, K, dh = cache.k.shape
    d = n * dh
    p = cache.prefix
    dheads = dout.reshape(B, n, 1, dh)
    dweights = np.matmul(cache.v, dheads.transpose(0, 1, 3, 2))[..., 0]
    dv = np.matmul(cache.weights[..., None], dheads).transpose(0, 2, 1, 3).reshape(B, K, d)
    dscores = masked_softmax_backward(cache.weights, dweights)
    dq = np.matmul(dscores[:, :, None, :], cache.k)[:, :, 0, :].reshape(B, d)
    dk = np.matmul(dscores[..., None], cache.q[:, :, None, :]).transpose(0, 2, 1, 3).reshape(B, K, d)
    seq2 = cache.seq.reshape(B * K, d)
    store.accumulate(f"{p}.wq", cache.query.T @ dq)
    store.accumulate(f"{p}.wk", seq2.T @ dk.reshape(B * K, d))
    store.accumulate(f"{p}.wv", seq2.T @ dv.reshape(B * K, d))
    dquery = dq @ store[f"{p}.wq"].T
    dseq = dk @ store[f"{p}.wk"].T + dv @ store[f"{p}.wv"].T
    return dquery, dseq


def interest_extract(
    anchor: np.ndarray,
    short_emb: np.ndarray,
    short_mask: np.ndarray,
    long_emb: np.ndarray,
    long_mask: np.ndarray,
    store: ParamStore,
    namespace: str,
    n_heads: int,
):
    """Short-term plus hard-searched long-term attention, with unshared projections."""
    hs, cs = target_attention(anchor, short_emb, short_mask, store, f"{namespace}.short", n_heads)
    hl, cl = target_attention(anchor, long_emb, long_mask, store, f"{namespace}.long", n_heads)
    return hs + hl, (cs, cl)


def interest_extract_backward(dout: np.ndarray, cache, store: ParamStore):
    """Returns gradients w.r.t. (anchor, short_emb, long_emb)."""
    cs, cl = cache
    da_s, dshort = target_attention_backward(dout, cs, store)
    da_l, dlong = target_attention_backward(dout, cl, store)
    return da_s + da_l, dshort, dlong


ATTENTION_STACKS = {
    "tan": ("tan.tri", "tan.tar"),
    "tfn": ("tfn.tar",),
}


# ---------------------------------------------------------------- trace


@dataclass
class ForwardTrace:
    y_hat: np.ndarray
    y_int: Optional[np.ndarray]
    y_tan: Optional[np.ndarray]
    y_tfn: Optional[np.ndarray]
    H_tri: Optional[np.ndarray] = None
    H_tar: Optional[np.ndarray] = None
    H_tar_tfn: Optional[np.ndarray] = None
    variant: str = "DIAN"
    cache: dict = field(default_factory=dict, repr=False)


# ---------------------------------------------------------------- model


class DIAN:
    """Parameter layout and forward/backward for every variant.

    Only the tables a variant actually reads are created, so e.g. a
    ``TFN_ONLY`` store has no trigger-anchored attention projections.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocab, store: ParamStore | None = None) -> None:
        cfg.validate()
        self.cfg = cfg
        self.vocab = vocab
        if store is None:
            store = ParamStore()
            self._init_params(store, np.random.default_rng(cfg.init_seed))
        self.store = store

    # ------------------------------------------------------------ params

    def expected_shapes(self) -> dict[str, tuple[int, ...]]:
        c, v = self.cfg, self.vocab
        d = c.d
        shapes: dict[str, tuple[int, ...]] = {
            "emb.item": (v.item, c.d_id),
            "emb.cat": (v.category, c.d_cat),
            "emb.user": (v.user, c.d_user),
            "emb.age": (v.age, c.d_profile),
            "emb.occupation": (v.occupation, c.d_profile),
        }

        def mlp(prefix: str, d_in: int) -> None:
            dims = [d_in, *c.mlp_hidden, 1]
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
                shapes[f"{prefix}.w{i}"] = (a, b)
                shapes[f"{prefix}.b{i}"] = (b,)

        def attention(namespace: str) -> None:
            for branch in ("short", "long"):
                for w in ("wq", "wk", "wv"):
                    shapes[f"{namespace}.{branch}.{w}"] = (d, d)

        if c.has_intent:
            shapes["emb.visit"] = (v.visit, c.d_crs)
            shapes["emb.stay"] = (v.stay, c.d_crs)
            mlp("intent.mlp", c.d_user_total + d + 2 * c.d_crs + d)
        if c.has_tan:
            for ns in ATTENTION_STACKS["tan"]:
                attention(ns)
            mlp("tan.mlp", c.d_user_total + 4 * d)
        if c.has_tfn:
            for ns in ATTENTION_STACKS["tfn"]:
                attention(ns)
            mlp("tfn.mlp", c.d_user_total + 2 * d)
        return shapes

    def _init_params(self, store: ParamStore, rng: np.random.Generator) -> None:
        shapes = self.expected_shapes()
        c = self.cfg
        for name in sorted(shapes):
            if not name.startswith("emb."):
                continue
            rows, width = shapes[name]
            store.add(name, embedding_init(rng, rows, width))
        for prefix, sub in (("intent.mlp", c.has_intent), ("tan.mlp", c.has_tan), ("tfn.mlp", c.has_tfn)):
            if sub:
                d_in = shapes[f"{prefix}.w0"][0]
                init_mlp(store, rng, prefix, [d_in, *c.mlp_hidden, 1])
        for name in sorted(shapes):
            if name.endswith((".wq", ".wk", ".wv")):
                d = shapes[name][0]
                limit = np.sqrt(6.0 / (d + d // c.n_heads))
                store.add(name, rng.uniform(-limit, limit, size=shapes[name]))

    # ------------------------------------------------------------ forward

    def forward(self, batch: EncodedBatch, keep_cache: bool = True) -> ForwardTrace:
        c, s = self.cfg, self.store
        n_heads = c.n_heads
        cache: dict = {}

        user_vec = np.concatenate(
            [s["emb.user"][batch.user], s["emb.age"][batch.age], s["emb.occupation"][batch.occupation]], axis=1
        )
        e_tri = embed_item(s, batch.trigger_item, batch.trigger_cat)
        e_tar = embed_item(s, batch.target_item, batch.target_cat)
        short_emb = embed_item(s, batch.short_item, batch.short_cat)
        cache.update(user_vec=user_vec, short_emb=short_emb)

        out = ForwardTrace(y_hat=None, y_int=None, y_tan=None, y_tfn=None, variant=c.variant)  # type: ignore[arg-type]

        tar_pos, tar_valid = hard_search_batch(batch.long_cat, batch.long_mask, batch.target_cat, c.hard_search_K)
        tar_items = np.take_along_axis(batch.long_item, tar_pos, axis=1)
        tar_cats = np.take_along_axis(batch.long_cat, tar_pos, axis=1)
        long_tar = embed_item(s, tar_items, tar_cats)
        cache.update(tar_items=tar_items, tar_cats=tar_cats)

        if c.has_intent:
            pooled = average_pool(short_emb, batch.short_mask)
            crs = np.concatenate([s["emb.visit"][batch.visit], s["emb.stay"][batch.stay]], axis=1)
            x = np.concatenate([user_vec, pooled, crs, e_tri], axis=1)
            logit, mc = mlp_forward(x, s, "intent.mlp")
            out.y_int = sigmoid(logit[:, 0])
            cache["intent"] = mc

        if c.has_tan:
            tri_pos, tri_valid = hard_search_batch(
                batch.long_cat, batch.long_mask, batch.trigger_cat, c.hard_search_K
            )
            tri_items = np.take_along_axis(batch.long_item, tri_pos, axis=1)
            tri_cats = np.take_along_axis(batch.long_cat, tri_pos, axis=1)
            long_tri = embed_item(s, tri_items, tri_cats)
            h_tri, c_tri = interest_extract(
                e_tri, short_emb, batch.short_mask, long_tri, tri_valid, s, "tan.tri", n_heads
            )
            h_tar, c_tar = interest_extract(
                e_tar, short_emb, batch.short_mask, long_tar, tar_valid, s, "tan.tar", n_heads
            )
            x = np.concatenate([user_vec, e_tri, e_tar, h_tri, h_tar], axis=1)
            logit, mc = mlp_forward(x, s, "tan.mlp")
            out.y_tan = sigmoid(logit[:, 0])
            out.H_tri, out.H_tar = h_tri, h_tar
            cache.update(tan=mc, tan_tri=c_tri, tan_tar=c_tar, tri_items=tri_items, tri_cats=tri_cats)

        if c.has_tfn:
            h_tfn, c_tfn = interest_extract(
                e_tar, short_emb, batch.short_mask, long_tar, tar_valid, s, "tfn.tar", n_heads
            )
            x = np.concatenate([user_vec, e_tar, h_tfn], axis=1)
            logit, mc = mlp_forward(x, s, "tfn.mlp")
            out.y_tfn = sigmoid(logit[:, 0])
            out.H_tar_tfn = h_tfn
            cache.update(tfn=mc, tfn_tar=c_tfn)

        out.y_hat = fuse(c.variant, out.y_int, out.y_tan, out.y_tfn)
        if keep_cache:
            out.cache = cache
        return out

    # ------------------------------------------------------------ backward

    def backward(self, trace: ForwardTrace, batch: EncodedBatch, d_y_hat: np.ndarray, d_y_int=None) -> None:
        """Accumulate gradients given d loss/d y_hat and (optionally) a direct d loss/d y_int."""
        c, s = self.cfg, self.store
        d_tan, d_tfn, d_int = fuse_backward(
            c.variant, trace.y_int, trace.y_tan, trace.y_tfn, d_y_hat, c.fusion_grad_to_intent
        )
        if d_y_int is not None:
            d_int = d_y_int if d_int is None else d_int + d_y_int
        cache = trace.cache
        if not cache:
            raise RuntimeError("forward was run without keep_cache=True")
        B = len(batch)
        du = c.d_user
        dp = c.d_profile
        d = c.d
        duser = np.zeros((B, c.d_user_total))
        de_tri = np.zeros((B, d))
        de_tar = np.zeros((B, d))
        dshort = np.zeros_like(cache["short_emb"])
        dlong_tar = np.zeros((B, cache["tar_items"].shape[1], d))

        if c.has_intent and d_int is not None:
            dlogit = sigmoid_backward(trace.y_int, d_int)[:, None]
            dx = mlp_backward(dlogit, cache["intent"], s)
            o = 0
            duser += dx[:, o : o + c.d_user_total]
            o += c.d_user_total
            dshort += average_pool_backward(dx[:, o : o + d], batch.short_mask)
            o += d
            _scatter(s, "emb.visit", batch.visit, dx[:, o : o + c.d_crs])
            o += c.d_crs
            _scatter(s, "emb.stay", batch.stay, dx[:, o : o + c.d_crs])
            o += c.d_crs
            de_tri += dx[:, o : o + d]

        if c.has_tan:
            dlogit = sigmoid_backward(trace.y_tan, d_tan)[:, None]
            dx = mlp_backward(dlogit, cache["tan"], s)
            o = c.d_user_total
            duser += dx[:, :o]
            de_tri += dx[:, o : o + d]
            de_tar += dx[:, o + d : o + 2 * d]
            dh_tri = dx[:, o + 2 * d : o + 3 * d]
            dh_tar = dx[:, o + 3 * d : o + 4 * d]
            da, ds, dl = interest_extract_backward(dh_tri, cache["tan_tri"], s)
            de_tri += da
            dshort += ds
            embed_item_backward(s, cache["tri_items"], cache["tri_cats"], dl)
            da, ds, dl = interest_extract_backward(dh_tar, cache["tan_tar"], s)
            de_tar += da
            dshort += ds
            dlong_tar += dl

        if c.has_tfn:
            dlogit = sigmoid_backward(trace.y_tfn, d_tfn)[:, None]
            dx = mlp_backward(dlogit, cache["tfn"], s)
            o = c.d_user_total
            duser += dx[:, :o]
            de_tar += dx[:, o : o + d]
            da, ds, dl = interest_extract_backward(dx[:, o + d : o + 2 * d], cache["tfn_tar"], s)
            de_tar += da
            dshort += ds
            dlong_tar += dl

        _scatter(s, "emb.user", batch.user, duser[:, :du])
        _scatter(s, "emb.age", batch.age, duser[:, du : du + dp])
        _scatter(s, "emb.occupation", batch.occupation, duser[:, du + dp :])
        embed_item_backward(s, batch.trigger_item, batch.trigger_cat, de_tri)
        embed_item_backward(s, batch.target_item, batch.target_cat, de_tar)
        embed_item_backward(s, batch.short_item, batch.short_cat, dshort)
        embed_item_backward(s, cache["tar_items"], cache["tar_cats"], dlong_tar)


def fuse(variant: str, y_int, y_tan, y_tfn) -> np.ndarray:
    if variant in ("DIAN", "NO_INTENT_LOSS"):
        return y_int * y_tan + (1.0 - y_int) * y_tfn
    if variant == "AVG_FUSION":
        return 0.5 * (y_tan + y_tfn)
    if variant == "TAN_ONLY":
        return y_tan
    if variant == "TFN_ONLY":
        return y_tfn
    raise ConfigError(f"unknown variant {variant!r}")


def fuse_backward(variant: str, y_int, y_tan, y_tfn, d_y_hat, grad_to_intent: bool = True):
    """Gradients w.r.t. (y_tan, y_tfn, y_int); absent components come back as None."""
    if variant in ("DIAN", "NO_INTENT_LOSS"):
        d_int = d_y_hat * (y_tan - y_tfn) if grad_to_intent else np.zeros_like(d_y_hat)
        return d_y_hat * y_int, d_y_hat * (1.0 - y_int), d_int
    if variant == "AVG_FUSION":
        return 0.5 * d_y_hat, 0.5 * d_y_hat, None
    if variant == "TAN_ONLY":
        return d_y_hat, None, None
    if variant == "TFN_ONLY":
        return None, d_y_hat, None
    raise ConfigError(f"unknown variant {variant!r}")


def dian_forward(model: DIAN, batch: EncodedBatch, variant: str | None = None) -> ForwardTrace:
    """Forward pass; ``variant`` must match the model's own when given."""
    if variant is not None and variant != model.cfg.variant:
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        raise ConfigError(f"model was built as {model.cfg.variant}, not {variant}")
    return model.forward(batch)


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def checkpoint_dict(model: DIAN) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "model_config": asdict(model.cfg),
        "vocab_sizes": model.vocab.sizes(),
        "tables": {
            name: {"shape": list(model.store[name].shape), "values": model.store[name].ravel().tolist()}
            for name in model.store.names()
        },
    }


def save_checkpoint(path: str | Path, model: DIAN) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(checkpoint_dict(model), fh, separators=(",", ":"))


def model_from_checkpoint(d: dict, item_category: list[int] | None = None) -> DIAN:
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    cfg = ModelConfig(**d["model_config"])
    vocab = Vocab(**d["vocab_sizes"], item_category=list(item_category or []))
    model = DIAN.__new__(DIAN)
    model.cfg, model.vocab = cfg, vocab
    expected = model.expected_shapes()
    tables = d["tables"]
    if set(tables) != set(expected):
        missing = sorted(set(expected) - set(tables))
        extra = sorted(set(tables) - set(expected))
        raise CheckpointError(f"table mismatch: missing {missing}, unexpected {extra}")
    store = ParamStore()
    for name in sorted(tables):
        shape = tuple(tables[name]["shape"])
        if shape != expected[name]:
            raise CheckpointError(f"table {name}: shape {shape} != expected {expected[name]}")
        values = np.asarray(tables[name]["values"], dtype=np.float64)
        if values.size != int(np.prod(shape)):
            raise CheckpointError(f"table {name}: {values.size} values for shape {shape}")
        store.add(name, values.reshape(shape))
    model.store = store
    return model


def load_checkpoint(path: str | Path) -> DIAN:
    with open(path, encoding="utf-8") as fh:
        return model_from_checkpoint(json.load(fh))
