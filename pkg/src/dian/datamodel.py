"""Session schema, posterior intention labels, and batch encoding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

VISIT_EDGES = (0, 1, 3, 7, 15, 30)
STAY_EDGES = (0, 10, 30, 60, 180, 600)
N_VISIT_BUCKETS = len(VISIT_EDGES) + 1
N_STAY_BUCKETS = len(STAY_EDGES) + 1

DEFAULT_K_SHORT = 20
DEFAULT_K_LONG = 100


class EncodingError(ValueError):
    pass


@dataclass(frozen=True)
class ItemRef:
    item_id: int
    category_id: int
    timestamp: int = 0

    def to_json(self) -> dict:
        return {"item_id": self.item_id, "category_id": self.category_id, "timestamp": self.timestamp}

    @classmethod
    def from_json(cls, d: dict) -> "ItemRef":
        return cls(int(d["item_id"]), int(d["category_id"]), int(d.get("timestamp", 0)))


@dataclass
class SessionRecord:
    """One entry into the mini-app through a trigger item.

    Sequences are most-recent-first. ``user_profile`` holds the age and
    occupation bucket indices; ``cross_features`` the raw monthly visit count
    and the stay-duration bucket.
    """

    user_id: int
    user_profile: dict
    cross_features: dict
    trigger: ItemRef
    short_seq: list[ItemRef]
    long_seq: list[ItemRef]
    candidates: list[tuple[ItemRef, int]]
    post_entry_clicks: list[ItemRef]
    intent_label: int
    latent_intent: Optional[int] = None

    def to_json(self) -> dict:
        d = {
            "user_id": self.user_id,
            "user_profile": dict(self.user_profile),
            "cross_features": dict(self.cross_features),
            "trigger": self.trigger.to_json(),
            "short_seq": [r.to_json() for r in self.short_seq],
            "long_seq": [r.to_json() for r in self.long_seq],
            "candidates": [{"item": c.to_json(), "click_label": int(y)} for c, y in self.candidates],
            "post_entry_clicks": [r.to_json() for r in self.post_entry_clicks],
            "intent_label": int(self.intent_label),
        }
        if self.latent_intent is not None:
            d["latent_intent"] = int(self.latent_intent)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SessionRecord":
        return cls(
            user_id=int(d["user_id"]),
            user_profile={k: int(v) for k, v in d["user_profile"].items()},
            cross_features={k: int(v) for k, v in d["cross_features"].items()},
            trigger=ItemRef.from_json(d["trigger"]),
            short_seq=[ItemRef.from_json(r) for r in d["short_seq"]],
            long_seq=[ItemRef.from_json(r) for r in d["long_seq"]],
            candidates=[(ItemRef.from_json(c["item"]), int(c["click_label"])) for c in d["candidates"]],
            post_entry_clicks=[ItemRef.from_json(r) for r in d["post_entry_clicks"]],
            intent_label=int(d["intent_label"]),
            latent_intent=None if d.get("latent_intent") is None else int(d["latent_intent"]),
        )


@dataclass
class Vocab:
    """Namespace sizes; index 0 is padding/unknown everywhere."""

    user: int
    item: int
    category: int
    age: int
    occupation: int
    visit: int = N_VISIT_BUCKETS + 1
    stay: int = N_STAY_BUCKETS + 1
    item_category: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        for f in ("user", "item", "category", "age", "occupation", "visit", "stay"):
            if getattr(self, f) < 2:
                raise EncodingError(f"vocab size for {f!r} must be >= 2")

    def sizes(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "item_category"}

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "Vocab":
        return cls(**d)


# ---------------------------------------------------------------- labeling / features


def posterior_intention_label(trigger: ItemRef, post_entry_clicks: Iterable[ItemRef]) -> int:
    """1 if any post-entry click hits the trigger item or its leaf category."""
    for c in post_entry_clicks:
        if c.item_id == trigger.item_id or c.category_id == trigger.category_id:
            return 1
    return 0


def _bucket(value: float, edges: Sequence[float]) -> int:
    # number of edges strictly below value: {0}, (0,1], (1,3], ...
    return int(np.searchsorted(np.asarray(edges, dtype=float), value, side="left"))


def bucketize_cross_features(monthly_visit_count: int, avg_stay_seconds: float) -> tuple[int, int]:
    if monthly_visit_count < 0 or avg_stay_seconds < 0:
        raise ValueError("cross features must be non-negative")
    return _bucket(monthly_visit_count, VISIT_EDGES), _bucket(avg_stay_seconds, STAY_EDGES)


# ---------------------------------------------------------------- batches

_ROW_FIELDS = (
    "session_index",
    "user",
    "age",
    "occupation",
    "visit",
    "stay",
    "trigger_item",
    "trigger_cat",
    "target_item",
    "target_cat",
    "short_item",
    "short_cat",
    "short_ts",
    "short_mask",
    "long_item",
    "long_cat",
    "long_ts",
    "long_mask",
    "click",
    "intent",
)


@dataclass
class EncodedBatch:
    """Row-per-(session, candidate) integer tensors with padding masks.

    ``visit`` and ``stay`` are bucket indices shifted by one so that 0 stays
    the padding slot of their namespaces.
    """

    session_index: np.ndarray
    user: np.ndarray
    age: np.ndarray
    occupation: np.ndarray
    visit: np.ndarray
    stay: np.ndarray
    trigger_item: np.ndarray
    trigger_cat: np.ndarray
    target_item: np.ndarray
    target_cat: np.ndarray
    short_item: np.ndarray
    short_cat: np.ndarray
    short_ts: np.ndarray
    short_mask: np.ndarray
    long_item: np.ndarray
    long_cat: np.ndarray
    long_ts: np.ndarray
    long_mask: np.ndarray
    click: np.ndarray
    intent: np.ndarray

    def __len__(self) -> int:
        return len(self.click)

    def take(self, rows: np.ndarray) -> "EncodedBatch":
        return EncodedBatch(**{f: getattr(self, f)[rows] for f in _ROW_FIELDS})

    def replace(self, **changes: np.ndarray) -> "EncodedBatch":
        d = {f: getattr(self, f) for f in _ROW_FIELDS}
        d.update(changes)
        return EncodedBatch(**d)

    @property
    def n_sessions(self) -> int:
        return int(np.unique(self.session_index).size)

    def first_row_of_session(self) -> np.ndarray:
        _, first = np.unique(self.session_index, return_index=True)
        return np.sort(first)


def _check(value: int, size: int, name: str, row: int, strict: bool) -> int:
    if 0 <= value < size:
        return value
    if strict:
        raise EncodingError(f"{name}={value} out of vocabulary range [0, {size}) in record {row}")
    return 0


def encode_sessions(
    records: Sequence[SessionRecord],
    vocab: Vocab,
    K_s: int = DEFAULT_K_SHORT,
    K_l: int = DEFAULT_K_LONG,
    strict: bool = True,
) -> EncodedBatch:
    """Flatten records into one row per candidate.

    Sequences keep their ``K`` most recent entries and are right-padded with 0.
    With ``strict=False`` out-of-range ids map to the unknown index 0 instead
    of raising.
    """
    if K_s < 1 or K_l < 1:
        raise EncodingError("sequence caps must be >= 1")
    n = len(records)
    n_cand = np.array([len(r.candidates) for r in records], dtype=np.int64)
    if n and n_cand.min() < 1:
        raise EncodingError(f"record {int(np.argmin(n_cand))} has no candidates")

    sess = {
        k: np.zeros(n, dtype=np.int64)
        for k in ("user", "age", "occupation", "visit", "stay", "trigger_item", "trigger_cat", "intent")
    }
    # int32 keeps row-level long sequences affordable at ~10^5 rows
    s_item = np.zeros((n, K_s), dtype=np.int32)
    s_cat = np.zeros((n, K_s), dtype=np.int32)
    s_ts = np.zeros((n, K_s), dtype=np.int32)
    s_mask = np.zeros((n, K_s), dtype=bool)
    l_item = np.zeros((n, K_l), dtype=np.int32)
    l_cat = np.zeros((n, K_l), dtype=np.int32)
    l_ts = np.zeros((n, K_l), dtype=np.int32)
    l_mask = np.zeros((n, K_l), dtype=bool)
    n_rows = int(n_cand.sum())
    tgt_item = np.zeros(n_rows, dtype=np.int64)
    tgt_cat = np.zeros(n_rows, dtype=np.int64)
    click = np.zeros(n_rows, dtype=np.float64)

    row = 0
    for i, r in enumerate(records):
        sess["user"][i] = _check(r.user_id, vocab.user, "user_id", i, strict)
        sess["age"][i] = _check(r.user_profile["age_bucket"], vocab.age, "age_bucket", i, strict)
        sess["occupation"][i] = _check(
            r.user_profile["occupation_bucket"], vocab.occupation, "occupation_bucket", i, strict
        )
        visit_b, _ = bucketize_cross_features(r.cross_features["monthly_visit_count"], 0.0)
        sess["visit"][i] = _check(visit_b + 1, vocab.visit, "monthly_visit_count", i, strict)
        sess["stay"][i] = _check(
            r.cross_features["avg_stay_duration_bucket"] + 1, vocab.stay, "avg_stay_duration_bucket", i, strict
        )
        sess["trigger_item"][i] = _check(r.trigger.item_id, vocab.item, "trigger.item_id", i, strict)
        sess["trigger_cat"][i] = _check(r.trigger.category_id, vocab.category, "trigger.category_id", i, strict)
        sess["intent"][i] = r.intent_label
        for seq, items, cats, ts, mask, cap, nm in (
            (r.short_seq, s_item, s_cat, s_ts, s_mask, K_s, "short_seq"),
            (r.long_seq, l_item, l_cat, l_ts, l_mask, K_l, "long_seq"),
        ):
            for k, ref in enumerate(seq[:cap]):
                items[i, k] = _check(ref.item_id, vocab.item, f"{nm}.item_id", i, strict)
                cats[i, k] = _check(ref.category_id, vocab.category, f"{nm}.category_id", i, strict)
                ts[i, k] = ref.timestamp
                mask[i, k] = True
        for ref, y in r.candidates:
            if y not in (0, 1):
                raise EncodingError(f"click_label={y} not in {{0,1}} in record {i}")
            tgt_item[row] = _check(ref.item_id, vocab.item, "candidate.item_id", i, strict)
            tgt_cat[row] = _check(ref.category_id, vocab.category, "candidate.category_id", i, strict)
            click[row] = y
            row += 1
        if r.intent_label not in (0, 1):
            raise EncodingError(f"intent_label={r.intent_label} not in {{0,1}} in record {i}")

    rep = np.repeat(np.arange(n), n_cand)
    return EncodedBatch(
        session_index=rep,
        user=sess["user"][rep],
        age=sess["age"][rep],
        occupation=sess["occupation"][rep],
        visit=sess["visit"][rep],
        stay=sess["stay"][rep],
        trigger_item=sess["trigger_item"][rep],
        trigger_cat=sess["trigger_cat"][rep],
        target_item=tgt_item,
        target_cat=tgt_cat,
        short_item=s_item[rep],
        short_cat=s_cat[rep],
        short_ts=s_ts[rep],
        short_mask=s_mask[rep],
        long_item=l_item[rep],
        long_cat=l_cat[rep],
        long_ts=l_ts[rep],
        long_mask=l_mask[rep],
        click=click,
        intent=sess["intent"][rep].astype(np.float64),
    )


def decode_sequences(batch: EncodedBatch, row: int) -> tuple[list[ItemRef], list[ItemRef]]:
    """Recover the (truncated) short and long sequences stored in ``row``."""

    def _seq(items: np.ndarray, cats: np.ndarray, ts: np.ndarray, mask: np.ndarray) -> list[ItemRef]:
        return [ItemRef(int(a), int(b), int(t)) for a, b, t, m in zip(items, cats, ts, mask) if m]

    return (
        _seq(batch.short_item[row], batch.short_cat[row], batch.short_ts[row], batch.short_mask[row]),
        _seq(batch.long_item[row], batch.long_cat[row], batch.long_ts[row], batch.long_mask[row]),
    )


# ---------------------------------------------------------------- files


def write_jsonl(path: str | Path, records: Iterable[SessionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | Path) -> list[SessionRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(SessionRecord.from_json(json.loads(line)))
    return out
