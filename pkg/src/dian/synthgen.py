"""Synthetic trigger-induced sessions with an exact mixture click model.

A session's latent intent is drawn with probability ``intent_prob``; clicks
are then drawn from the intent-conditional click model. Because both pieces
are closed form, :func:`bayes_ctr` is the Bayes-optimal scorer for the data.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .datamodel import (
    ItemRef,
    N_STAY_BUCKETS,
    N_VISIT_BUCKETS,
    SessionRecord,
    Vocab,
    bucketize_cross_features,
    posterior_intention_label,
)
from .numerics import ConfigError, sigmoid as _sigmoid

DAY = 86_400
ENTRY_TIME = 200 * DAY
SHORT_WINDOW = 14 * DAY
LONG_WINDOW = 180 * DAY


@dataclass
class GenConfig:
    n_users: int = 5000
    n_items: int = 2000
    n_categories: int = 20
    n_sessions: int = 50_000
    n_candidates: int = 4
    short_len_min: int = 0
    short_len_max: int = 20
    long_len_min: int = 10
    long_len_max: int = 120
    n_age: int = 8
    n_occupation: int = 10
    dirichlet_alpha: float = 0.3
    visit_median: float = 5.0
    visit_sigma: float = 1.2
    stay_median: float = 60.0
    stay_sigma: float = 1.0
    affinity_a: float = 6.0
    affinity_b: float = 3.5
    w_trig: float = 5.5
    w_pref: float = 1.5
    bias_1: float = -3.5
    bias_0: float = -6.0
    candidate_pref_share: float = 0.5
    test_fraction: float = 0.1
    rng_seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        for name in ("n_users", "n_items", "n_categories", "n_sessions", "n_age", "n_occupation"):
            if getattr(self, name) < 1:
                raise ConfigError(f"gen.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_candidates < 2:
            raise ConfigError(f"gen.n_candidates must be >= 2, got {self.n_candidates}")
        if self.n_items < self.n_categories:
            raise ConfigError("gen.n_items must be >= gen.n_categories so every category has an item")
        if not 0 <= self.short_len_min <= self.short_len_max:
            raise ConfigError("gen.short_len_min/max out of order")
        if not 0 <= self.long_len_min <= self.long_len_max:
            raise ConfigError("gen.long_len_min/max out of order")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("gen.test_fraction must lie in [0, 1)")
        if not 0.0 <= self.candidate_pref_share <= 1.0:
            raise ConfigError("gen.candidate_pref_share must lie in [0, 1]")


@dataclass
class World:
    """Latent population parameters.

    Users are 1..n_users, items 1..n_items, categories 1..n_categories; slot 0
    of every per-entity array is padding. ``user_pref[u]`` has one column per
    real category (column ``c - 1`` for category ``c``).
    """

    n_users: int
    n_items: int
    n_categories: int
    item_category: np.ndarray
    user_pref: np.ndarray
    user_visit_rate: np.ndarray
    user_stay_seconds: np.ndarray
    user_age: np.ndarray
    user_occupation: np.ndarray
    affinity_a: float
    affinity_b: float
    w_trig: float
    w_pref: float
    bias_1: float
    bias_0: float
    rng_seed: int
    trigger_affinity: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.trigger_affinity = _sigmoid(self.affinity_a - self.affinity_b * np.log1p(self.user_visit_rate))

    def monthly_visit_count(self, user: int) -> int:
        return int(round(float(self.user_visit_rate[user])))

    def pref(self, user, category):
        return self.user_pref[user, np.asarray(category) - 1]

    def vocab(self, n_age: int, n_occupation: int) -> Vocab:
        return Vocab(
            user=self.n_users + 1,
            item=self.n_items + 1,
            category=self.n_categories + 1,
            age=n_age + 1,
            occupation=n_occupation + 1,
            visit=N_VISIT_BUCKETS + 1,
            stay=N_STAY_BUCKETS + 1,
            item_category=[int(c) for c in self.item_category],
        )

    def to_json(self) -> dict:
        d = {}
        for k, v in asdict(self).items():
            if k == "trigger_affinity":
                continue
            d[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return d

    @classmethod
    def from_json(cls, d: dict) -> "World":
        arrays = {
            "item_category": np.int64,
            "user_pref": np.float64,
            "user_visit_rate": np.float64,
            "user_stay_seconds": np.float64,
            "user_age": np.int64,
            "user_occupation": np.int64,
        }
        kw = {k: (np.asarray(v, dtype=arrays[k]) if k in arrays else v) for k, v in d.items()}
        return cls(**kw)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)



def generate_world(cfg: GenConfig) -> World:
    rng = np.random.default_rng([cfg.rng_seed, 0])
    n_u, n_i, n_c = cfg.n_users, cfg.n_items, cfg.n_categories
    # every category gets at least one item
    cats = np.concatenate([np.arange(1, n_c + 1), rng.integers(1, n_c + 1, size=n_i - n_c)])
    item_category = np.concatenate([[0], rng.permutation(cats)])
    pref = np.empty((n_u + 1, n_c))
    pref[0] = 1.0 / n_c
    if n_c == 1:
        pref[1:] = 1.0
    else:
        pref[1:] = rng.dirichlet(np.full(n_c, cfg.dirichlet_alpha), size=n_u)
        pref[1:] /= pref[1:].sum(axis=1, keepdims=True)
    visit = np.concatenate([[0.0], cfg.visit_median * np.exp(cfg.visit_sigma * rng.standard_normal(n_u))])
    stay = np.concatenate([[0.0], cfg.stay_median * np.exp(cfg.stay_sigma * rng.standard_normal(n_u))])
    age = np.concatenate([[0], rng.integers(1, cfg.n_age + 1, size=n_u)])
    occ = np.concatenate([[0], rng.integers(1, cfg.n_occupation + 1, size=n_u)])
    return World(
        n_users=n_u,
        n_items=n_i,
        n_categories=n_c,
        item_category=item_category,
        user_pref=pref,
        user_visit_rate=visit,
        user_stay_seconds=stay,
        user_age=age,
        user_occupation=occ,
        affinity_a=cfg.affinity_a,
        affinity_b=cfg.affinity_b,
        w_trig=cfg.w_trig,
        w_pref=cfg.w_pref,
        bias_1=cfg.bias_1,
        bias_0=cfg.bias_0,
        rng_seed=cfg.rng_seed,
    )


# ---------------------------------------------------------------- oracles
# The functions below accept scalars or equally-shaped arrays of
# user / category ids.


def intent_prob(world: World, user, trigger_category):
    """Probability that the session was caused by the trigger."""
    theta = world.trigger_affinity[user]
    scale = 0.5 + world.pref(user, trigger_category) * world.n_categories / 2.0
    return np.clip(theta * scale, 0.0, 1.0)


def click_prob(world: World, user, intent, candidate_category, trigger_category):
    pref = world.pref(user, candidate_category)
    same = (np.asarray(candidate_category) == np.asarray(trigger_category)).astype(np.float64)
    p1 = _sigmoid(world.w_trig * same + world.w_pref * pref + world.bias_1)
    p0 = _sigmoid(world.w_pref * pref * world.n_categories / 2.0 + world.bias_0)
    return np.where(np.asarray(intent) == 1, p1, p0)


def true_click_prob(world: World, user: int, intent: int, candidate: ItemRef, trigger: ItemRef) -> float:
    return float(click_prob(world, user, intent, candidate.category_id, trigger.category_id))


def mixture_ctr(intent_p, p1, p0):
    return intent_p * p1 + (1.0 - intent_p) * p0


def bayes_ctr_arrays(world: World, user, candidate_category, trigger_category):
    theta = intent_prob(world, user, trigger_category)
    p1 = click_prob(world, user, 1, candidate_category, trigger_category)
    p0 = click_prob(world, user, 0, candidate_category, trigger_category)
    return mixture_ctr(theta, p1, p0)


def bayes_ctr(world: World, user: int, candidate: ItemRef, trigger: ItemRef) -> float:
    return float(bayes_ctr_arrays(world, user, candidate.category_id, trigger.category_id))


# ---------------------------------------------------------------- sessions


class _Sampler:
    def __init__(self, world: World, cfg: GenConfig) -> None:
        self.world = world
        self.cfg = cfg
        w = world.user_visit_rate[1:]
        self.user_cdf = np.cumsum(w / w.sum())
        self.pref_cdf = np.cumsum(world.user_pref, axis=1)
        order = np.argsort(world.item_category[1:], kind="stable") + 1
        counts = np.bincount(world.item_category[1:], minlength=world.n_categories + 1)
        starts = np.concatenate([[0], np.cumsum(counts)])
        self.items_sorted = order
        self.cat_start = starts[:-1]
        self.cat_count = counts

    def user(self, rng: np.random.Generator) -> int:
        return int(min(np.searchsorted(self.user_cdf, rng.random(), side="right"), len(self.user_cdf) - 1)) + 1

    def categories(self, rng: np.random.Generator, user: int, n: int) -> np.ndarray:
        cdf = self.pref_cdf[user]
        idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
        return np.minimum(idx, self.world.n_categories - 1) + 1

    def items(self, rng: np.random.Generator, cats: np.ndarray) -> np.ndarray:
        offs = (rng.random(len(cats)) * self.cat_count[cats]).astype(np.int64)
        return self.items_sorted[self.cat_start[cats] + offs]

    def sequence(self, rng: np.random.Generator, user: int, n: int, t_lo: int, t_hi: int) -> list[ItemRef]:
        if n == 0:
            return []
        cats = self.categories(rng, user, n)
        items = self.items(rng, cats)
        ts = np.sort(ENTRY_TIME - rng.integers(t_lo, t_hi, size=n))[::-1]
        return [ItemRef(int(i), int(c), int(t)) for i, c, t in zip(items, cats, ts)]


def generate_session(world: World, cfg: GenConfig, index: int, sampler: _Sampler | None = None) -> SessionRecord:
    sampler = sampler or _Sampler(world, cfg)
    rng = np.random.default_rng([cfg.rng_seed, 1, index])
    u = sampler.user(rng)
    trig_cat = int(sampler.categories(rng, u, 1)[0])
    trig_item = int(sampler.items(rng, np.array([trig_cat]))[0])
    trigger = ItemRef(trig_item, trig_cat, ENTRY_TIME)
    latent = int(rng.random() < intent_prob(world, u, trig_cat))

    n_c = cfg.n_candidates
    n_trig = (n_c + 1) // 2
    rest = n_c - n_trig
    from_pref = rng.random(rest) < cfg.candidate_pref_share
    cand_cats = np.concatenate(
        [
            np.full(n_trig, trig_cat),
            np.where(from_pref, sampler.categories(rng, u, rest), rng.integers(1, world.n_categories + 1, size=rest)),
        ]
    )
    cand_items = sampler.items(rng, cand_cats)
    p = click_prob(world, u, latent, cand_cats, trig_cat)
    clicks = (rng.random(n_c) < p).astype(int)
    order = rng.permutation(n_c)
    candidates = [(ItemRef(int(cand_items[j]), int(cand_cats[j]), ENTRY_TIME), int(clicks[j])) for j in order]
    post = [c for c, y in candidates if y == 1]

    n_short = int(rng.integers(cfg.short_len_min, cfg.short_len_max + 1))
    n_long = int(rng.integers(cfg.long_len_min, cfg.long_len_max + 1))
    short = sampler.sequence(rng, u, n_short, 1, SHORT_WINDOW)
    older = sampler.sequence(rng, u, n_long, SHORT_WINDOW, LONG_WINDOW)
    long_seq = short + older

    _, stay_bucket = bucketize_cross_features(0, float(world.user_stay_seconds[u]))
    return SessionRecord(
        user_id=u,
        user_profile={"age_bucket": int(world.user_age[u]), "occupation_bucket": int(world.user_occupation[u])},
        cross_features={
            "monthly_visit_count": world.monthly_visit_count(u),
            "avg_stay_duration_bucket": stay_bucket,
        },
        trigger=trigger,
        short_seq=short,
        long_seq=long_seq,
        candidates=candidates,
        post_entry_clicks=post,
        intent_label=posterior_intention_label(trigger, post),
        latent_intent=latent,
    )


def generate_dataset(world: World, cfg: GenConfig, start: int = 0, count: int | None = None) -> list[SessionRecord]:
    """Sessions ``start .. start+count``; each draws from its own seeded stream."""
    count = cfg.n_sessions - start if count is None else count
    sampler = _Sampler(world, cfg)
    return [generate_session(world, cfg, i, sampler) for i in range(start, start + count)]


def train_test_split(records: list[SessionRecord], test_fraction: float) -> tuple[list, list]:
    """First sessions train, last ``test_fraction`` test (stand-in for a time split)."""
    n_test = int(math.floor(len(records) * test_fraction))
    cut = len(records) - n_test
    return records[:cut], records[cut:]


def session_bayes_ctr(world: World, records: list[SessionRecord]) -> np.ndarray:
    """Oracle CTR for every (session, candidate) row, in encoding order."""
    users, cc, tc = [], [], []
    for r in records:
        for c, _ in r.candidates:
            users.append(r.user_id)
            cc.append(c.category_id)
            tc.append(r.trigger.category_id)
    return bayes_ctr_arrays(world, np.array(users), np.array(cc), np.array(tc))


def ctr_gap_by_visit_bucket(records: list[SessionRecord]) -> list[dict]:
    """Trigger-category vs other-category CTR per monthly-visit bucket."""
    rows = []
    for b in range(N_VISIT_BUCKETS):
        rows.append({"bucket": b, "sessions": 0, "trig_pairs": 0, "trig_clicks": 0, "other_pairs": 0, "other_clicks": 0})
    for r in records:
        b, _ = bucketize_cross_features(r.cross_features["monthly_visit_count"], 0.0)
        row = rows[b]
        row["sessions"] += 1
        for c, y in r.candidates:
            key = "trig" if c.category_id == r.trigger.category_id else "other"
            row[f"{key}_pairs"] += 1
            row[f"{key}_clicks"] += y
    for row in rows:
        row["trig_ctr"] = row["trig_clicks"] / row["trig_pairs"] if row["trig_pairs"] else None
        row["other_ctr"] = row["other_clicks"] / row["other_pairs"] if row["other_pairs"] else None
        row["gap"] = (
            row["trig_ctr"] - row["other_ctr"] if row["trig_ctr"] is not None and row["other_ctr"] is not None else None
        )
    return rows
