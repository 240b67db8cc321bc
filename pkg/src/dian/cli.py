"""Command-line entry point: generate | train | eval | gradcheck | predict.

Exit codes: 0 success, 2 validation error, 3 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .datamodel import EncodingError, SessionRecord, Vocab, encode_sessions, read_jsonl, write_jsonl
from .models import VARIANTS, CheckpointError, DIAN, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import ConfigError, GradCheckError, finite_diff_gradcheck
from .synthgen import (
    GenConfig,
    World,
    bayes_ctr_arrays,
    ctr_gap_by_visit_bucket,
    generate_dataset,
    generate_world,
    train_test_split,
)
from .training import MetricError, TrainConfig, TrainingError, evaluate, evaluate_scores, full_batch_loss, multitask_loss_and_grad, train

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3
SIDECAR_VERSION = 1
GRADCHECK_TOL = 1e-4


class ValidationError(ValueError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    SECTIONS = ("gen", "model", "train")

    def to_json(self) -> dict:
        return {s: asdict(getattr(self, s)) for s in self.SECTIONS}


_SECTION_TYPES = {"gen": GenConfig, "model": ModelConfig, "train": TrainConfig}


def _coerce(key: str, value: Any, default: Any) -> Any:
    if default is None:
        if value is None or isinstance(value, int):
            return value
        raise ConfigError(f"{key}: expected an integer or null, got {value!r}")
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        if isinstance(value, str):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")


def build_run_config(raw: dict, overrides: Sequence[str] = ()) -> RunConfig:
    """Merge a config dict and ``section.key=value`` overrides; unknown keys are rejected."""
    merged: dict[str, dict] = {s: {} for s in RunConfig.SECTIONS}
    for section, body in raw.items():
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        merged[section].update(body)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, text = item.split("=", 1)
        if path.count(".") != 1:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = path.split(".")
        if section not in merged:
            raise ConfigError(f"unknown config section {section!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        merged[section][key] = value
    out = {}
    for section, cls in _SECTION_TYPES.items():
        defaults = {f.name: getattr(cls(), f.name) for f in fields(cls) if f.init}
        kwargs = {}
        for key, value in merged[section].items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {section}.{key}")
            kwargs[key] = _coerce(f"{section}.{key}", value, defaults[key])
        out[section] = cls(**kwargs)
    return RunConfig(**out)


def load_run_config(path: Optional[str], overrides: Sequence[str] = ()) -> RunConfig:
    raw = {}
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return build_run_config(raw, overrides)


def config_reference() -> str:
    lines = ["config keys (JSON sections or --set section.key=value):"]
    for section, cls in _SECTION_TYPES.items():
        inst = cls()
        for f in fields(cls):
            if f.init:
                lines.append(f"  {section}.{f.name} = {json.dumps(getattr(inst, f.name))}")
    return "\n".join(lines)


# ---------------------------------------------------------------- files


def write_sidecar(path: Path, vocab: Vocab, world: World, gen: GenConfig) -> None:
    doc = {"version": SIDECAR_VERSION, "vocab": vocab.to_json(), "world": world.to_json(), "gen_config": asdict(gen)}
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def read_sidecar(path: Path) -> tuple[Vocab, Optional[World]]:
    if not path.exists():
        raise ValidationError(f"sidecar not found: {path}")
    doc = json.loads(path.read_text(encoding="utf-8"))
    vocab = Vocab.from_json(doc["vocab"])
    world = World.from_json(doc["world"]) if doc.get("world") else None
    return vocab, world


def _fmt(x: Optional[float]) -> str:
    return "   -   " if x is None else f"{x:7.4f}"


# ---------------------------------------------------------------- commands


def cmd_generate(cfg: RunConfig, out_dir: str) -> int:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not os.access(out, os.W_OK):
        raise ValidationError(f"output directory not writable: {out}")
    world = generate_world(cfg.gen)
    records = generate_dataset(world, cfg.gen)
    tr, te = train_test_split(records, cfg.gen.test_fraction)
    write_jsonl(out / "train.jsonl", tr)
    write_jsonl(out / "test.jsonl", te)
    write_sidecar(out / "sidecar.json", world.vocab(cfg.gen.n_age, cfg.gen.n_occupation), world, cfg.gen)

    clicks = [y for r in records for _, y in r.candidates]
    print(f"sessions: {len(records)} (train {len(tr)}, test {len(te)}), pairs: {len(clicks)}")
    print(f"base CTR: {np.mean(clicks):.4f}")
    print(f"intent label rate: {np.mean([r.intent_label for r in records]):.4f}")
    print(f"latent intent rate: {np.mean([r.latent_intent for r in records]):.4f}")
    print("visit bucket  sessions  trig_ctr  other_ctr   gap")
    for row in ctr_gap_by_visit_bucket(records):
        print(
            f"{row['bucket']:>12}  {row['sessions']:>8}  {_fmt(row['trig_ctr'])}  {_fmt(row['other_ctr'])}  {_fmt(row['gap'])}"
        )
    return EXIT_OK


def _load_split(data_dir: Path, name: str, vocab: Vocab, model_cfg: ModelConfig):
    path = data_dir / f"{name}.jsonl"
    if not path.exists():
        return None
    records = read_jsonl(path)
    if not records:
        return None
    return encode_sessions(records, vocab, model_cfg.K_s, model_cfg.K_l)


def cmd_train(cfg: RunConfig, data_dir: str, variant: str, out_path: str, metrics_path: Optional[str] = None) -> int:
    data = Path(data_dir)
    vocab, _ = read_sidecar(data / "sidecar.json")
    model_cfg = ModelConfig(**{**asdict(cfg.model), "variant": variant})
    train_batch = _load_split(data, "train", vocab, model_cfg)
    if train_batch is None:
        raise ValidationError(f"no training sessions in {data / 'train.jsonl'}")
    test_batch = _load_split(data, "test", vocab, model_cfg)
    model = DIAN(model_cfg, vocab)
    metrics_path = metrics_path or f"{out_path}.metrics.jsonl"
    with open(metrics_path, "w", encoding="utf-8") as log:
        result = train(
            model,
            train_batch,
            cfg.train,
            eval_data=test_batch,
            log=lambda e: log.write(json.dumps(e, sort_keys=True) + "\n"),
        )
    save_checkpoint(out_path, model)
    print(json.dumps(result.history[-1], sort_keys=True))
    return EXIT_OK


def cmd_eval(
    checkpoint: Optional[str],
    dataset: str,
    sidecar: Optional[str] = None,
    compare_oracle: bool = False,
    oracle_scores: bool = False,
) -> int:
    ds = Path(dataset)
    sidecar_path = Path(sidecar) if sidecar else ds.parent / "sidecar.json"
    world = None
    if compare_oracle or oracle_scores:
        if not sidecar_path.exists():
            raise ValidationError(f"--compare oracle needs the dataset sidecar, not found: {sidecar_path}")
        _, world = read_sidecar(sidecar_path)
        if world is None:
            raise ValidationError(f"sidecar {sidecar_path} carries no world; oracle unavailable")
    records = read_jsonl(ds)
    if oracle_scores:
        vocab, _ = read_sidecar(sidecar_path)
        batch = encode_sessions(records, vocab)
        scores = bayes_ctr_arrays(world, batch.user, batch.target_cat, batch.trigger_cat)
        report = evaluate_scores(scores, batch, oracle=scores if compare_oracle else None, variant="BAYES_ORACLE")
    else:
        if checkpoint is None:
            raise ValidationError("eval needs --checkpoint or --oracle-scores")
        model = load_checkpoint(checkpoint)
        try:
            batch = encode_sessions(records, model.vocab, model.cfg.K_s, model.cfg.K_l)
        except EncodingError as e:
            raise MetricError(f"dataset does not fit the checkpoint vocabulary: {e}") from e
        oracle = bayes_ctr_arrays(world, batch.user, batch.target_cat, batch.trigger_cat) if compare_oracle else None
        report = evaluate(model, batch, oracle=oracle)
    print(report.dumps())
    return EXIT_OK


def gradcheck_batch(cfg: RunConfig):
    """A 4-row batch from 4 distinct sessions with well-populated sequences."""
    gen = GenConfig(
        n_users=12,
        n_items=24,
        n_categories=3,
        n_sessions=4,
        n_candidates=2,
        short_len_min=3,
        short_len_max=min(cfg.model.K_s, 8),
        long_len_min=20,
        long_len_max=30,
        n_age=3,
        n_occupation=3,
        dirichlet_alpha=5.0,
        rng_seed=cfg.gen.rng_seed,
    )
    world = generate_world(gen)
    vocab = world.vocab(gen.n_age, gen.n_occupation)
    records = generate_dataset(world, gen)
    batch = encode_sessions(records, vocab, cfg.model.K_s, cfg.model.K_l).take(np.array([0, 2, 4, 6]))
    return vocab, batch


def cmd_gradcheck(cfg: RunConfig, sample: int = 400, fault: Optional[str] = None) -> int:
    vocab, batch = gradcheck_batch(cfg)
    model = DIAN(cfg.model, vocab)
    # probe at a generic point rather than at the near-symmetric initialisation
    rng = np.random.default_rng(cfg.model.init_seed + 1)
    for name in model.store.names():
        model.store.values[name] += rng.normal(0.0, 0.3, size=model.store[name].shape)
    alpha = cfg.train.alpha
    trace = model.forward(batch)
    _, d_hat, d_int = multitask_loss_and_grad(trace, batch.click, batch.intent, alpha)
    model.store.zero_grad()
    model.backward(trace, batch, d_hat, d_int)
    if fault is not None:
        if fault not in model.store:
            raise ValidationError(f"unknown parameter table {fault!r}")
        model.store.grads[fault] *= 1.1
    report = finite_diff_gradcheck(lambda s: full_batch_loss(model, batch, alpha), model.store, sample=sample)
    ok = bool(report.max_rel_err < GRADCHECK_TOL)
    print(
        json.dumps(
            {
                "variant": cfg.model.variant,
                "coordinates": len(report.probes),
                "tables_probed": len(report.tables),
                "tables_total": len(model.store),
                "max_rel_err": report.max_rel_err,
                "max_abs_diff": max(abs(p.analytic - p.numeric) for p in report.probes),
                "pass": ok,
            },
            sort_keys=True,
        )
    )
    if not ok:
        for p in report.worst(5):
            print(
                f"FAIL {p.name}{list(p.index)} analytic={p.analytic:.6e} numeric={p.numeric:.6e} rel_err={p.rel_err:.3e}",
                file=sys.stderr,
            )
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_predict(checkpoint: str, stdin=None) -> int:
    stdin = stdin or sys.stdin
    model = load_checkpoint(checkpoint)
    doc = json.loads(stdin.read())
    doc.setdefault("post_entry_clicks", [])
    doc.setdefault("intent_label", 0)
    for c in doc.get("candidates", []):
        c.setdefault("click_label", 0)
    record = SessionRecord.from_json(doc)
    batch = encode_sessions([record], model.vocab, model.cfg.K_s, model.cfg.K_l, strict=False)
    trace = model.forward(batch, keep_cache=False)
    for j, (cand, _) in enumerate(record.candidates):
        row = {"item_id": cand.item_id, "category_id": cand.category_id, "y_hat": float(trace.y_hat[j])}
        for name in ("y_int", "y_tan", "y_tfn"):
            arr = getattr(trace, name)
            row[name] = None if arr is None else float(arr[j])
        print(json.dumps(row))
    return EXIT_OK


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with gen/model/train sections")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")

    p = argparse.ArgumentParser(
        prog="dian",
        description="Intention-aware CTR models on synthetic trigger-induced sessions.",
        epilog=config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = p.add_subparsers(dest="command", required=True)
    kw = dict(parents=[common], epilog=config_reference(), formatter_class=argparse.RawDescriptionHelpFormatter)

    g = sub.add_parser("generate", help="write train/test JSONL and sidecar", **kw)
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train one variant and write a checkpoint", **kw)
    t.add_argument("--data", required=True, help="directory written by `generate`")
    t.add_argument("--variant", default="DIAN", choices=VARIANTS)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--metrics", help="metrics log path (default: <out>.metrics.jsonl)")

    e = sub.add_parser("eval", help="print an EvalReport as JSON")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset", required=True, help="JSONL file")
    e.add_argument("--sidecar", help="default: sidecar.json next to the dataset")
    e.add_argument("--compare", choices=["oracle"])
    e.add_argument("--oracle-scores", action="store_true", help="score with the Bayes oracle instead of a model")

    c = sub.add_parser("gradcheck", help="finite-difference check of the full loss", **kw)
    c.add_argument("--sample", type=int, default=400)
    c.add_argument("--inject-fault", help=argparse.SUPPRESS)

    r = sub.add_parser("predict", help="score one SessionRecord JSON read from stdin")
    r.add_argument("--checkpoint", required=True)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(load_run_config(args.config, args.overrides), args.out)
        if args.command == "train":
            return cmd_train(load_run_config(args.config, args.overrides), args.data, args.variant, args.out, args.metrics)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, args.sidecar, args.compare == "oracle", args.oracle_scores)
        if args.command == "gradcheck":
            return cmd_gradcheck(load_run_config(args.config, args.overrides), args.sample, args.inject_fault)
        if args.command == "predict":
            return cmd_predict(args.checkpoint)
    except (ConfigError, EncodingError, CheckpointError, MetricError, ValidationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, IsADirectoryError, NotADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (TrainingError, GradCheckError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command}")
    return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
