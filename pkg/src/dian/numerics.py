"""Dense float64 kernels with hand-written backward passes, Adam, and a gradient checker.

Every forward kernel returns its output together with whatever the matching
backward needs; backward functions accumulate parameter gradients directly
into the :class:`ParamStore`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

DTYPE = np.float64


class ConfigError(ValueError):
    """Raised when shapes or hyperparameters do not fit together."""


class DegenerateRowError(ValueError):
    """Raised when a softmax row has no valid position."""


class GradCheckError(RuntimeError):
    """Raised when the loss becomes non-finite during a finite-difference probe."""


@dataclass
class AdamConfig:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if not 0 < self.beta1 < 1 or not 0 < self.beta2 < 1:
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")


class ParamStore:
    """Named trainable tensors with gradients and Adam moments.

    Iteration over names is always sorted so that anything derived from the
    store (checkpoints, gradient-check sampling) is order-stable.
    """

    def __init__(self) -> None:
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.adam_m: dict[str, np.ndarray] = {}
        self.adam_v: dict[str, np.ndarray] = {}
        self.step_count = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.values:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        self.adam_m[name] = np.zeros_like(value)
        self.adam_v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: object) -> bool:
        return name in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.names())

    def __len__(self) -> int:
        return len(self.values)

    def names(self) -> list[str]:
        return sorted(self.values)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(v.size for v in self.values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name in self.names():
            out.values[name] = self.values[name].copy()
            out.grads[name] = self.grads[name].copy()
            out.adam_m[name] = self.adam_m[name].copy()
            out.adam_v[name] = self.adam_v[name].copy()
        out.step_count = self.step_count
        return out


# ---------------------------------------------------------------- init


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def embedding_init(rng: np.random.Generator, rows: int, width: int) -> np.ndarray:
    return rng.uniform(-0.05, 0.05, size=(rows, width))


# ---------------------------------------------------------------- elementwise


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function, stable over the whole float64 range."""
    x = np.asarray(x, dtype=DTYPE)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


# ---------------------------------------------------------------- softmax / pooling


def masked_softmax(scores: np.ndarray, mask: np.ndarray, allow_empty: bool = False) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask``; masked entries are exactly 0.

    Rows without any valid position raise :class:`DegenerateRowError` unless
    ``allow_empty`` is set, in which case they come back as all zeros.
    """
    scores = np.asarray(scores, dtype=DTYPE)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape:
        raise ConfigError(f"scores {scores.shape} and mask {mask.shape} differ in shape")
    if not allow_empty and not (valid := mask.any(axis=-1)).all():
        bad = np.argwhere(~valid)
        raise DegenerateRowError(f"softmax row {tuple(bad[0])} has no valid position")
    # a finite fill keeps empty rows NaN-free; their exp terms are zeroed by the mask
    masked = np.where(mask, scores, -1e300)
    ex = np.exp(masked - masked.max(axis=-1, keepdims=True))
    ex *= mask
    denom = ex.sum(axis=-1, keepdims=True)
    denom[denom == 0.0] = 1.0
    return ex / denom


def masked_softmax_backward(weights: np.ndarray, dweights: np.ndarray) -> np.ndarray:
    # masked positions carry weight 0, so their score gradient vanishes too
    inner = (weights * dweights).sum(axis=-1, keepdims=True)
    return weights * (dweights - inner)


def average_pool(seq: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean of ``seq[b, k]`` over valid ``k``; rows with no valid position give zeros."""
    m = np.asarray(mask, dtype=DTYPE)
    counts = m.sum(axis=1, keepdims=True)
    total = np.einsum("bk,bkd->bd", m, seq)
    return total / np.maximum(counts, 1.0)


def average_pool_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask, dtype=DTYPE)
    counts = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return (m / counts)[:, :, None] * dout[:, None, :]


# ---------------------------------------------------------------- MLP


def mlp_layer_names(prefix: str, n_layers: int) -> list[tuple[str, str]]:
    return [(f"{prefix}.w{i}", f"{prefix}.b{i}") for i in range(n_layers)]


def init_mlp(store: ParamStore, rng: np.random.Generator, prefix: str, dims: list[int]) -> None:
    """Create affine layers ``dims[0] -> dims[1] -> ... -> dims[-1]`` under ``prefix``."""
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        store.add(f"{prefix}.w{i}", glorot_uniform(rng, fan_in, fan_out))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out))


def count_mlp_layers(store: ParamStore, prefix: str) -> int:
    n = 0
    while f"{prefix}.w{n}" in store:
        n += 1
    return n


@dataclass
class MLPCache:
    prefix: str
    inputs: list[np.ndarray] = field(default_factory=list)
    pre_acts: list[np.ndarray] = field(default_factory=list)


def mlp_forward(x: np.ndarray, store: ParamStore, prefix: str) -> tuple[np.ndarray, MLPCache]:
    """Affine layers with ReLU between them and a linear output layer."""
    n_layers = count_mlp_layers(store, prefix)
    if n_layers == 0:
        raise ConfigError(f"no MLP layers stored under {prefix!r}")
    cache = MLPCache(prefix)
    h = x
    for i, (wn, bn) in enumerate(mlp_layer_names(prefix, n_layers)):
        w, b = store[wn], store[bn]
        if h.shape[-1] != w.shape[0] or w.shape[1] != b.shape[0]:
            raise ConfigError(
                f"layer {wn}: input width {h.shape[-1]} does not match weight {w.shape} / bias {b.shape}"
            )
        cache.inputs.append(h)
        z = h @ w + b
        cache.pre_acts.append(z)
        h = np.maximum(z, 0.0) if i < n_layers - 1 else z
    return h, cache


def mlp_backward(dout: np.ndarray, cache: MLPCache, store: ParamStore) -> np.ndarray:
    n_layers = len(cache.inputs)
    dz = dout
    for i in reversed(range(n_layers)):
        wn, bn = f"{cache.prefix}.w{i}", f"{cache.prefix}.b{i}"
        if i < n_layers - 1:
            dz = dz * (cache.pre_acts[i] > 0)
        store.accumulate(wn, cache.inputs[i].T @ dz)
        store.accumulate(bn, dz.sum(axis=0))
        dz = dz @ store[wn].T
    return dz


# ---------------------------------------------------------------- loss


PROB_CLAMP = 1e-7


def clamp_prob(p: np.ndarray) -> np.ndarray:
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-element binary cross-entropy on clamped probabilities."""
    pc = clamp_prob(p)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def bce_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    """d bce / d p, zero where the clamp is active."""
    pc = clamp_prob(p)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    return np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0)


# ---------------------------------------------------------------- optimizer


def adam_step(store: ParamStore, cfg: AdamConfig) -> None:
    """One bias-corrected Adam update on every entry, then zero the gradients."""
    store.step_count += 1
    t = store.step_count
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name in store.names():
        g = store.grads[name]
        m = store.adam_m[name]
        v = store.adam_v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        store.values[name] -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.epsilon)
    store.zero_grad()


# ---------------------------------------------------------------- gradient check


@dataclass
class ProbeResult:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    max_rel_err: float
    probes: list[ProbeResult]

    def worst(self, n: int = 5) -> list[ProbeResult]:
        return sorted(self.probes, key=lambda p: -p.rel_err)[:n]

    @property
    def tables(self) -> set[str]:
        return {p.name for p in self.probes}


def relative_error(analytic: float, numeric: float, noise: float = 0.0) -> float:
    """|a - n| / max(|a|, |n|, 1e-8), after discounting ``noise`` from |a - n|."""
    return max(abs(analytic - numeric) - noise, 0.0) / max(abs(analytic), abs(numeric), 1e-8)


# the difference quotient cannot resolve gradients below ~eps * |loss| / h;
# a generous multiple of that is forgiven so exact zeros do not read as 1e-3
ROUNDOFF_FACTOR = 16.0


def finite_diff_gradcheck(
    loss_fn: Callable[[ParamStore], float],
    store: ParamStore,
    sample: int = 200,
    perturbation: float = 1e-5,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``store.grads`` against central differences of ``loss_fn``.

    The analytic gradients must already be in the store. Coordinates are drawn
    round-robin over tables so every table is probed; within a table half the
    draws favour coordinates with a nonzero analytic gradient (embedding rows
    touched by the batch), the rest are uniform.
    """
    rng = np.random.default_rng(seed)
    names = store.names()
    if not names:
        return GradCheckReport(0.0, [])
    analytic_all = {n: store.grads[n].copy() for n in names}
    probes: list[ProbeResult] = []
    n_probe = max(sample, len(names))
    for k in range(n_probe):
        name = names[k % len(names)]
        value = store.values[name]
        nonzero = np.flatnonzero(analytic_all[name])
        if nonzero.size and rng.random() < 0.5:
            flat = int(rng.choice(nonzero))
        else:
            flat = int(rng.integers(value.size))
        idx = np.unravel_index(flat, value.shape)
        orig = value[idx]
        value[idx] = orig + perturbation
        up = float(loss_fn(store))
        value[idx] = orig - perturbation
        down = float(loss_fn(store))
        value[idx] = orig
        if not (math.isfinite(up) and math.isfinite(down)):
            raise GradCheckError(f"non-finite loss while probing {name}{tuple(int(i) for i in idx)}")
        numeric = (up - down) / (2.0 * perturbation)
        a = float(analytic_all[name][idx])
        noise = ROUNDOFF_FACTOR * np.finfo(float).eps * max(abs(up), abs(down), 1.0) / (2.0 * perturbation)
        probes.append(ProbeResult(name, tuple(int(i) for i in idx), a, numeric, relative_error(a, numeric, noise)))
    # loss_fn may have clobbered gradients; restore the analytic ones
    for n in names:
        store.grads[n][...] = analytic_all[n]
    return GradCheckReport(max(p.rel_err for p in probes), probes)
