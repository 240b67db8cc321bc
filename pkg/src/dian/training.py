"""Joint CTR + intention loss, the training loop, and evaluation metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .datamodel import EncodedBatch
from .models import DIAN, ForwardTrace
from .numerics import AdamConfig, ConfigError, adam_step, bce, bce_grad


class TrainingError(RuntimeError):
    pass


class MetricError(ValueError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 1
    learning_rate: float = 0.01
    alpha: float = 0.1
    seed: int = 0
    eval_every: int = 500
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.alpha < 0:
            raise ConfigError("train.alpha must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("train.eval_every must be >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("train.max_steps must be >= 1 when set")
        AdamConfig(learning_rate=self.learning_rate)


# ---------------------------------------------------------------- loss


def effective_alpha(variant: str, alpha: float) -> float:
    if variant == "DIAN":
        return alpha
    # NO_INTENT_LOSS zeroes the term; the other variants have no Intention Net
    return 0.0


def _check_labels(name: str, y: np.ndarray) -> None:
    if not np.isin(y, (0.0, 1.0)).all():
        raise MetricError(f"{name} labels must be 0 or 1")


def multitask_loss_and_grad(
    trace: ForwardTrace, y: np.ndarray, y_int_true: np.ndarray, alpha: float
) -> tuple[float, np.ndarray, Optional[np.ndarray]]:
    """Mean over rows of BCE(y_hat, y) + alpha * BCE(y_int, y_int_true).

    Returns the loss with its gradients w.r.t. y_hat and y_int (the latter is
    None when the variant has no intention term).
    """
    y = np.asarray(y, dtype=np.float64)
    _check_labels("click", y)
    n = len(y)
    a = effective_alpha(trace.variant, alpha)
    loss = bce(trace.y_hat, y)
    d_hat = bce_grad(trace.y_hat, y) / n
    d_int = None
    if trace.y_int is not None and trace.variant == "DIAN":
        t = np.asarray(y_int_true, dtype=np.float64)
        _check_labels("intent", t)
        loss = loss + a * bce(trace.y_int, t)
        d_int = a * bce_grad(trace.y_int, t) / n
    return float(loss.mean()), d_hat, d_int


def multitask_loss(trace: ForwardTrace, y: np.ndarray, y_int_true: np.ndarray, alpha: float) -> float:
    return multitask_loss_and_grad(trace, y, y_int_true, alpha)[0]


# ---------------------------------------------------------------- metrics


def _tie_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    n = len(x)
    boundaries = np.flatnonzero(np.diff(xs)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(n)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC; tied positive/negative pairs count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    _check_labels("auc", y.astype(np.float64))
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC is undefined with a single class")
    r = _tie_ranks(s)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_bruteforce(scores, labels) -> float:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    p = s[y == 1]
    q = s[y == 0]
    if len(p) == 0 or len(q) == 0:
        raise MetricError("AUC is undefined with a single class")
    conc = 0.0
    for a in p:
        for b in q:
            if a > b:
                conc += 1.0
            elif a == b:
                conc += 0.5
    return conc / (len(p) * len(q))


def log_loss(p: np.ndarray, y: np.ndarray) -> float:
    return float(bce(p, y).mean())


@dataclass
class EvalReport:
    variant: str
    ctr_auc: float
    log_loss: float
    n_rows: int
    n_sessions: int
    intent_auc: Optional[float] = None
    intent_accuracy: Optional[float] = None
    intent_base_rate: Optional[float] = None
    oracle_auc: Optional[float] = None
    oracle_gap: Optional[float] = None

    def to_json(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def evaluate_scores(
    y_hat: np.ndarray,
    batch: EncodedBatch,
    y_int: Optional[np.ndarray] = None,
    oracle: Optional[np.ndarray] = None,
    variant: str = "scores",
) -> EvalReport:
    """Metrics for externally computed per-row scores.

    Intention metrics use one row per session, since the intention output
    does not depend on the candidate.
    """
    report = EvalReport(
        variant=variant,
        ctr_auc=auc(y_hat, batch.click),
        log_loss=log_loss(y_hat, batch.click),
        n_rows=len(batch),
        n_sessions=batch.n_sessions,
    )
    if y_int is not None:
        first = batch.first_row_of_session()
        yi, ti = y_int[first], batch.intent[first]
        report.intent_accuracy = float(((yi >= 0.5) == (ti == 1)).mean())
        report.intent_base_rate = float(ti.mean())
        if 0 < ti.sum() < len(ti):
            report.intent_auc = auc(yi, ti)
    if oracle is not None:
        report.oracle_auc = auc(oracle, batch.click)
        report.oracle_gap = report.oracle_auc - report.ctr_auc
    return report


def predict(model: DIAN, batch: EncodedBatch, chunk: int = 4096) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Scores without touching gradients; returns (y_hat, y_int)."""
    y_hat, y_int = [], []
    for lo in range(0, len(batch), chunk):
        tr = model.forward(batch.take(np.arange(lo, min(lo + chunk, len(batch)))), keep_cache=False)
        y_hat.append(tr.y_hat)
        if tr.y_int is not None:
            y_int.append(tr.y_int)
    return np.concatenate(y_hat), (np.concatenate(y_int) if y_int else None)


def evaluate(model: DIAN, batch: EncodedBatch, oracle: Optional[np.ndarray] = None) -> EvalReport:
    v = model.vocab
    for name, arr, size in (
        ("user", batch.user, v.user),
        ("item", batch.target_item, v.item),
        ("category", batch.target_cat, v.category),
    ):
        if len(arr) and int(arr.max()) >= size:
            raise MetricError(f"dataset {name} id {int(arr.max())} exceeds model vocabulary ({size})")
    y_hat, y_int = predict(model, batch)
    return evaluate_scores(y_hat, batch, y_int, oracle, variant=model.cfg.variant)


# ---------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: DIAN
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def train(
    model: DIAN,
    train_data: EncodedBatch,
    cfg: TrainConfig,
    eval_data: Optional[EncodedBatch] = None,
    log: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Seeded mini-batch Adam on the joint loss.

    A metrics entry is produced every ``cfg.eval_every`` steps (0 disables
    periodic entries) plus one final entry; each is passed to ``log``.
    """
    if len(train_data) == 0:
        raise TrainingError("empty training set")
    model.cfg.alpha = cfg.alpha
    adam = AdamConfig(learning_rate=cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    n = len(train_data)
    result = TrainResult(model)
    running: list[float] = []
    step = 0

    def emit(final: bool) -> None:
        entry = {"step": step, "loss": float(np.mean(running)) if running else None}
        if eval_data is not None:
            entry.update(evaluate(model, eval_data).to_json())
        if final:
            entry["final"] = True
        result.history.append(entry)
        if log is not None:
            log(entry)
        running.clear()

    model.store.zero_grad()
    done = False
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for b, lo in enumerate(range(0, n, cfg.batch_size)):
            batch = train_data.take(perm[lo : lo + cfg.batch_size])
            trace = model.forward(batch)
            loss, d_hat, d_int = multitask_loss_and_grad(trace, batch.click, batch.intent, cfg.alpha)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step} (epoch {epoch}, batch {b})")
            model.backward(trace, batch, d_hat, d_int)
            adam_step(model.store, adam)
            step += 1
            running.append(loss)
            if cfg.eval_every and step % cfg.eval_every == 0:
                emit(final=False)
            if cfg.max_steps is not None and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    result.steps = step
    emit(final=True)
    return result


def full_batch_loss(model: DIAN, batch: EncodedBatch, alpha: float) -> float:
    return multitask_loss(model.forward(batch, keep_cache=False), batch.click, batch.intent, alpha)
