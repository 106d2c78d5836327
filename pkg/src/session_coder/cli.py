"""Command-line entry point: ``session-coder <command> [flags]``.

Configuration is a flat JSON object. Precedence is flags > config file >
defaults. Every command writes its artifact plus ``manifest.json`` into the
output directory.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import baseline_crossval, fit_baseline
from .data import (
    ROLE_FILTERS,
    DimensionError,
    MetadataVocab,
    MissingEmbeddingError,
    build_examples,
    hash_embed,
    load_embeddings,
    load_sessions,
    load_vocab,
    merge_turns,
    write_embeddings,
    write_sessions,
)
from .evaluation import (
    EvalConfig,
    aggregate_saliency,
    carve_validation,
    compare_reports,
    cross_validate,
    SaliencyCurve,
    run_ablation,
    saliency_csv,
)
from .model import load_model, save_model
from .seeds import derive_seed
from .synthetic import SyntheticSpec, generate_synthetic
from .training import TrainConfig, default_max_len, train

COMMANDS = ("synth", "embed", "train", "crossval", "baseline", "ablate", "saliency", "evaluate")
MODE_ALIASES = {"single": "single_task", "multi": "multi_task", "single_task": "single_task", "multi_task": "multi_task"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # paths
    transcripts: str | None = None
    embeddings: str | None = None
    vocab: str | None = None
    out: str = "out"
    spec: str | None = None
    model: str | None = None
    report_a: str | None = None
    report_b: str | None = None
    # ingestion and embedding
    provider: str = "hash"
    embed_source: str | None = None
    merge_turns: bool = False
    d: int = 768
    # model
    mode: str = "multi_task"
    hidden_units: int = 64
    attention_units: int = 10
    mlp_units: int = 20
    max_len: int | None = None
    role_filter: str = "therapist_only"
    metadata_enabled: bool = True
    # training
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 10
    batch_size: int | None = None
    # evaluation
    k: int = 10
    val_fraction: float = 0.1
    bootstrap_n: int = 100_000
    parallel_folds: int = 1
    # baseline
    baseline_features: int = 32
    svm_C: float = 1.0
    svm_epochs: int = 100
    seed: int = 0

    def validate(self) -> None:
        self.mode = MODE_ALIASES.get(self.mode, self.mode)
        if self.mode not in ("single_task", "multi_task"):
            raise ConfigError(f"mode must be single or multi, got {self.mode!r}")
        if self.role_filter not in ROLE_FILTERS:
            raise ConfigError(f"role_filter must be one of {ROLE_FILTERS}")
        if self.provider not in ("hash", "file"):
            raise ConfigError("provider must be hash or file")
        if self.k < 2 or self.bootstrap_n < 1 or self.parallel_folds < 1:
            raise ConfigError("k >= 2, bootstrap_n >= 1 and parallel_folds >= 1 are required")

    def train_config(self, **overrides) -> TrainConfig:
        values = dict(
            mode=self.mode, learning_rate=self.learning_rate, max_epochs=self.max_epochs,
            patience=self.patience, role_filter=self.role_filter, batch_size=self.batch_size,
            max_len=self.max_len, metadata_enabled=self.metadata_enabled, hidden_units=self.hidden_units,
            attention_units=self.attention_units, mlp_units=self.mlp_units, seed=self.seed,
        )
        values.update(overrides)
        return TrainConfig(**values)

    def eval_config(self) -> EvalConfig:
        return EvalConfig(k=self.k, val_fraction=self.val_fraction, bootstrap_n=self.bootstrap_n, seed=self.seed)


def resolve_config(config_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the JSON config file, then non-None flag values."""
    values = {}
    if config_path:
        raw = json.loads(Path(config_path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a flat JSON object")
        values.update(raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    config = RunConfig(**values)
    config.validate()
    return config


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _require(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing required input: {what}")
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


def _sessions(config: RunConfig):
    sessions = load_sessions(_require(config.transcripts, "transcripts"))
    if config.merge_turns:
        sessions = [replace(s, utterances=tuple(merge_turns(s.utterances))) for s in sessions]
    return sessions


def _vocab(config: RunConfig) -> MetadataVocab:
    return load_vocab(_require(config.vocab, "vocab")) if config.vocab else MetadataVocab.default()


def _examples(config: RunConfig, role_filter: str | None = None, metadata: bool | None = None):
    role = role_filter or config.role_filter
    max_len = config.max_len or default_max_len(role)
    embeddings = load_embeddings(_require(config.embeddings, "embeddings"))
    return build_examples(_sessions(config), embeddings, _vocab(config), role,
                          config.metadata_enabled if metadata is None else metadata, max_len)


def cmd_synth(config: RunConfig, out: Path) -> dict:
    spec = SyntheticSpec.load(config.spec) if config.spec else SyntheticSpec(seed=config.seed)
    vocab = _vocab(config)
    sessions, embeddings = generate_synthetic(spec, vocab)
    write_sessions(sessions, out / "transcripts.jsonl")
    write_embeddings(embeddings, out / "embeddings.jsonl", order=[s.session_id for s in sessions])
    dump_json(vocab.to_json(), out / "vocab.json")
    dump_json(spec.to_json(), out / "synthetic_spec.json")
    return {"sessions": len(sessions), "therapists": len({s.therapist_id for s in sessions})}


def cmd_embed(config: RunConfig, out: Path) -> dict:
    sessions = _sessions(config)
    if config.provider == "hash":
        vectors = {s.session_id: np.stack([hash_embed(u, config.d) for u in s.utterances]) for s in sessions}
    else:
        source = load_embeddings(_require(config.embed_source, "embed_source"))
        missing = sorted(s.session_id for s in sessions if s.session_id not in source)
        if missing:
            raise MissingEmbeddingError(f"no embeddings for sessions: {', '.join(missing)}")
        vectors = {}
        for s in sessions:
            matrix = source[s.session_id].matrix
            if matrix.shape[0] != len(s.utterances):
                raise DimensionError(f"session {s.session_id}: {matrix.shape[0]} vectors for {len(s.utterances)} utterances")
            vectors[s.session_id] = matrix
    write_embeddings(vectors, out / "embeddings.jsonl", order=sorted(vectors))
    return {"sessions": len(vectors)}


def cmd_train(config: RunConfig, out: Path) -> dict:
    examples = _examples(config)
    fit, val = carve_validation(examples, config.val_fraction, derive_seed(config.seed, "validation"))
    params, history = train(fit, val, config.train_config(),
                            init_seed=derive_seed(config.seed, "init"),
                            shuffle_seed=derive_seed(config.seed, "shuffle"))
    save_model(params, out / "model.json")
    dump_json(history.to_json(), out / "history.json")
    return {"best_epoch": history.best_epoch, "stopped_epoch": history.stopped_epoch}


def cmd_crossval(config: RunConfig, out: Path) -> dict:
    report = cross_validate(_examples(config), config.train_config(), config.eval_config(), config.parallel_folds)
    dump_json(report, out / "report.json")
    return {"macro_f1": report["macro_f1"]}


def cmd_baseline(config: RunConfig, out: Path) -> dict:
    sessions = _sessions(config)
    report = baseline_crossval(sessions, config.role_filter, config.seed, config.eval_config(),
                               config.baseline_features, config.svm_C, config.svm_epochs)
    dump_json(report, out / "baseline_report.json")
    model = fit_baseline(sessions, config.role_filter, config.baseline_features, config.svm_C,
                         config.svm_epochs, derive_seed(config.seed, "svm"))
    model.save(out / "baseline_model.json")
    return {"macro_f1": report["macro_f1"]}


def cmd_ablate(config: RunConfig, out: Path) -> dict:
    grid = run_ablation(lambda role, meta: _examples(config, role, meta), config.train_config(),
                        config.eval_config(), config.parallel_folds)
    dump_json(grid, out / "ablation.json")
    return {t: v["relative_improvement"] for t, v in grid["toggles"].items()}


def cmd_saliency(config: RunConfig, out: Path) -> dict:
    """Attention curves of a saved model on the data, or of held-out folds when no model is given."""
    if config.model:
        params = load_model(_require(config.model, "model"))
        curves = aggregate_saliency(params, _examples(config))
    else:
        report = cross_validate(_examples(config), config.train_config(), config.eval_config(),
                                config.parallel_folds, collect_saliency=True)
        dump_json(report, out / "report.json")
        curves = [SaliencyCurve(code, np.asarray(bins), report["n_sessions"])
                  for code, bins in report["saliency"].items()]
    (out / "saliency.csv").write_text(saliency_csv(curves))
    return {"rows": len(curves)}


def cmd_evaluate(config: RunConfig, out: Path) -> dict:
    a = json.loads(_require(config.report_a, "report_a").read_text())
    b = json.loads(_require(config.report_b, "report_b").read_text())
    result = compare_reports(a, b, n=config.bootstrap_n, seed=derive_seed(config.seed, "bootstrap"))
    dump_json(result, out / "comparison.json")
    return {"p_value": result["p_value"], "delta_observed": result["delta_observed"]}


HANDLERS = {
    "synth": cmd_synth, "embed": cmd_embed, "train": cmd_train, "crossval": cmd_crossval,
    "baseline": cmd_baseline, "ablate": cmd_ablate, "saliency": cmd_saliency, "evaluate": cmd_evaluate,
}
INPUT_KEYS = ("transcripts", "embeddings", "vocab", "spec", "model", "report_a", "report_b", "embed_source")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="session-coder", description="Session quality scoring toolkit.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out")
    parser.add_argument("--role", dest="role_filter", choices=ROLE_FILTERS)
    parser.add_argument("--mode", choices=("single", "multi"))
    parser.add_argument("--metadata", choices=("on", "off"))
    parser.add_argument("--parallel-folds", dest="parallel_folds", type=int)
    parser.add_argument("--transcripts")
    parser.add_argument("--embeddings")
    parser.add_argument("--vocab")
    parser.add_argument("--spec")
    parser.add_argument("--model")
    parser.add_argument("--provider", choices=("hash", "file"))
    parser.add_argument("--embed-source", dest="embed_source")
    parser.add_argument("--reports", nargs=2, metavar=("A", "B"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config", "metadata", "reports")}
    if args.metadata is not None:
        overrides["metadata_enabled"] = args.metadata == "on"
    if args.reports:
        overrides["report_a"], overrides["report_b"] = args.reports
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")
    started = time.perf_counter()
    try:
        config = resolve_config(args.config, overrides)
        inputs = {getattr(config, k): sha256_file(getattr(config, k))
                  for k in INPUT_KEYS if getattr(config, k) and Path(getattr(config, k)).is_file()}
        out = Path(config.out)
        out.mkdir(parents=True, exist_ok=True)
        summary = HANDLERS[args.command](config, out)
        dump_json({
            "command": args.command,
            "config": asdict(config),
            "inputs": inputs,
            "version": __version__,
            "seed": config.seed,
            "wall_clock_s": round(time.perf_counter() - started, 3),
        }, out / "manifest.json")
    except Exception as exc:  # every failure is reported as JSON
        print(json.dumps({"command": args.command, "error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        print(f"{args.command} failed: {exc}")
        return 1
    print(f"{args.command} ok: " + ", ".join(f"{k}={v}" for k, v in summary.items()))
    return 0


if __name__ == "__main__":
    sys.exit(main())
