"""Multi-seed ablation runs on generated data."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .datamodel import EncodedBatch, SessionRecord, Vocab, encode_sessions
from .models import DIAN, VARIANTS, ModelConfig
from .synthgen import GenConfig, World, bayes_ctr_arrays, generate_dataset, generate_world, train_test_split
from .training import EvalReport, TrainConfig, auc, evaluate, train


@dataclass
class DataBundle:
    world: World
    vocab: Vocab
    train_records: list[SessionRecord]
    test_records: list[SessionRecord]
    train_batch: EncodedBatch
    test_batch: EncodedBatch

    def oracle_scores(self, batch: EncodedBatch | None = None) -> np.ndarray:
        b = self.test_batch if batch is None else batch
        return bayes_ctr_arrays(self.world, b.user, b.target_cat, b.trigger_cat)


def build_data(gen: GenConfig, model: ModelConfig | None = None) -> DataBundle:
    model = model or ModelConfig()
    world = generate_world(gen)
    records = generate_dataset(world, gen)
    tr, te = train_test_split(records, gen.test_fraction)
    vocab = world.vocab(gen.n_age, gen.n_occupation)
    return DataBundle(
        world, vocab, tr, te, encode_sessions(tr, vocab, model.K_s, model.K_l), encode_sessions(te, vocab, model.K_s, model.K_l)
    )


def fit_variant(data: DataBundle, model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[DIAN, EvalReport]:
    model = DIAN(model_cfg, data.vocab)
    train(model, data.train_batch, replace(train_cfg, eval_every=0))
    return model, evaluate(model, data.test_batch, oracle=data.oracle_scores())


@dataclass
class AblationResult:
    seeds: list[int]
    variants: list[str]
    reports: dict[tuple[int, str], EvalReport] = field(default_factory=dict)
    oracle_auc: dict[int, float] = field(default_factory=dict)
    seconds: float = 0.0

    def ctr_auc(self, variant: str) -> np.ndarray:
        return np.array([self.reports[(s, variant)].ctr_auc for s in self.seeds])

    def mean_auc(self, variant: str) -> float:
        return float(self.ctr_auc(variant).mean())

    def wins(self, better: str, worse: str) -> int:
        return int((self.ctr_auc(better) - self.ctr_auc(worse) > 0).sum())

    def table(self) -> str:
        lines = [f"{'variant':<16}" + "".join(f"{'seed ' + str(s):>11}" for s in self.seeds) + f"{'mean':>11}"]
        for v in self.variants:
            a = self.ctr_auc(v)
            lines.append(f"{v:<16}" + "".join(f"{x:>11.4f}" for x in a) + f"{a.mean():>11.4f}")
        o = np.array([self.oracle_auc[s] for s in self.seeds])
        lines.append(f"{'bayes oracle':<16}" + "".join(f"{x:>11.4f}" for x in o) + f"{o.mean():>11.4f}")
        return "\n".join(lines)


def run_ablation(
    seeds: list[int],
    variants: list[str] | tuple[str, ...] = VARIANTS,
    gen: GenConfig | None = None,
    model: ModelConfig | None = None,
    train_cfg: TrainConfig | None = None,
    progress=None,
) -> AblationResult:
    """Train every variant on the same generated data for each seed.

    The seed drives the generator, parameter initialisation and shuffling
    alike, so variants of one seed see identical data in identical order.
    """
    gen = gen or GenConfig()
    model = model or ModelConfig()
    train_cfg = train_cfg or TrainConfig()
    out = AblationResult(list(seeds), list(variants))
    t0 = time.time()
    for s in seeds:
        data = build_data(replace(gen, rng_seed=s), model)
        out.oracle_auc[s] = auc(data.oracle_scores(), data.test_batch.click)
        for v in variants:
            _, rep = fit_variant(data, replace(model, variant=v, init_seed=s), replace(train_cfg, seed=s))
            out.reports[(s, v)] = rep
            if progress:
                progress(f"seed {s} {v:<15} ctr_auc={rep.ctr_auc:.4f}")
        del data
    out.seconds = time.time() - t0
    return out
