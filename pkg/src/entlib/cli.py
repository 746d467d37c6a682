"""``entlib <subcommand> --config <path> [--key value ...]``

Subcommands: train, crossval, predict, score, sigtest, gradcheck, synth, stats.

The run configuration is a flat JSON object whose keys are the fields of
:class:`RunConfig`; ``--key value`` overrides win over the file (values are
parsed as JSON when possible, list fields also accept ``a,b,c``). A key may
carry a section prefix (``--model.lstm_dim 32``, ``--train.folds 5``).

Every command writes ``<command>.config.json`` (the resolved configuration)
into ``output_dir``.

Exit codes: 0 success, 1 verification failure, 2 usage/IO/config error.

Synthetic generator settings are read from ``synth_config``, a
``key = value`` file with these keys (see ``SynthConfig``): n_entities,
n_scenes, min_participants, max_participants, min_utterances,
max_utterances, min_fillers, max_fillers, filler_vocab, p_first_person,
p_second_person, p_name, p_two_token_name, head_entities, head_mass,
scene_prefix.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import corpus as cp
from . import evaluation as ev
from . import training as tr
from .autodiff import ConfigError
from .gradcheck import gradcheck_model
from .model import ModelConfig

log = logging.getLogger("entlib")

SECTIONS = ("model", "train", "paths", "eval", "synth", "gradcheck")
COMMANDS = ("train", "crossval", "predict", "score", "sigtest", "gradcheck", "synth", "stats")


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # model
    token_dim: int = 300
    entity_dim: int = 134
    lstm_dim: int = 459
    variant: str = "EntLib"
    activation: str = "tanh"
    dropout_input: float = 0.008
    dropout_hidden: float = 0.0013
    # training
    learning_rate: float = 0.0005
    batch_scenes: int = 24
    chunk_len: int = 757
    max_epochs: int = 50
    patience: int = 5
    folds: int = 5
    min_token_count: int = 1
    track_train_loss: bool = False
    # paths
    train_corpus: str | None = None
    valid_corpus: str | None = None
    test_corpus: str | None = None
    corpus: str | None = None
    embeddings: str | None = None
    checkpoints: list[str] = field(default_factory=list)
    predictions: str | None = None
    predictions_a: str | None = None
    predictions_b: str | None = None
    synth_config: str | None = None
    output: str | None = None
    output_dir: str = "entlib_out"
    # evaluation
    condition: str = "all"
    main_entities: list[str] = field(default_factory=list)
    min_class_count: int = 3
    include_catch_all: bool = True
    with_distributions: bool = False
    permutations: int = 10000
    statistic: str = "macro_f1"
    # verification
    gradcheck_step: float = 1e-5
    gradcheck_tolerance: float = 1e-4
    corrupt_grad: str | None = None

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.token_dim, self.entity_dim, self.lstm_dim, self.variant,
                           self.activation, self.dropout_input, self.dropout_hidden, self.seed)

    def train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(self.learning_rate, self.batch_scenes, self.chunk_len, self.max_epochs,
                              self.patience, self.folds, self.seed, self.min_class_count,
                              self.track_train_loss)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value):
    default = getattr(RunConfig(), key)
    if isinstance(default, list):
        if isinstance(value, str):
            return [v for v in value.split(",") if v]
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list")
        return [str(v) for v in value]
    if value is None:
        return None
    if isinstance(default, bool):
        if isinstance(value, str):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{key} must be true or false, got {value!r}")
            return value.lower() in ("true", "1")
        return bool(value)
    if isinstance(default, int):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be an integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key} must be a number, got {value!r}") from None
    return str(value)


def _normalize_key(key: str) -> str:
    key = key.lstrip("-").replace("-", "_")
    if "." in key:
        section, _, rest = key.partition(".")
        if section in SECTIONS:
            key = rest
    if key not in _FIELDS:
        raise ConfigError(f"unknown configuration key {key!r}")
    return key


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(config_path: str | None, overrides: list[str]) -> RunConfig:
    values: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        for k, v in raw.items():
            values[_normalize_key(k)] = v
    i = 0
    while i < len(overrides):
        tok = overrides[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            k, v = tok.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(overrides):
                raise UsageError(f"missing value for {tok}")
            k, v = tok, overrides[i + 1]
            i += 2
        values[_normalize_key(k)] = _parse_value(v)
    return RunConfig(**{k: _coerce(k, v) for k, v in values.items()})


def _require(cfg: RunConfig, key: str) -> Path:
    value = getattr(cfg, key)
    if not value:
        raise ConfigError(f"this command needs {key!r} in the configuration")
    path = Path(value)
    if not path.exists():
        raise FileNotFoundError(f"{key} not found: {path}")
    return path


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(cfg: RunConfig, command: str) -> None:
    path = _outdir(cfg) / f"{command}.config.json"
    path.write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _pretrained(cfg: RunConfig, vocab: cp.Vocabulary):
    if not cfg.embeddings:
        return None
    matrix, report = cp.load_pretrained_embeddings(_require(cfg, "embeddings"), vocab, cfg.token_dim,
                                                   rng=np.random.default_rng(cfg.seed))
    print(f"pretrained coverage: {report.hits}/{report.hits + report.misses} "
          f"({100 * report.coverage:.1f}%)")
    return matrix


# ---------------------------------------------------------------------------
# commands


def cmd_train(cfg: RunConfig) -> int:
    corpus = cp.parse_corpus(_require(cfg, "train_corpus"))
    valid = cp.parse_corpus(_require(cfg, "valid_corpus")) if cfg.valid_corpus else None
    vocab = cp.build_vocab(corpus, cfg.min_token_count)
    out = _outdir(cfg)
    _snapshot(cfg, "train")
    res = tr.train(corpus, vocab, cfg.model_config(), cfg.train_config(), valid, _pretrained(cfg, vocab))
    tr.save_checkpoint(res.checkpoint, out / "model.ckpt")
    with open(out / "history.jsonl", "w", encoding="utf-8") as f:
        for rec in res.history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    print(f"checkpoint: {out / 'model.ckpt'} (epoch {res.checkpoint.metadata['epoch']})")
    if valid is not None:
        preds = tr.predict_corpus(res.params, valid, vocab, cfg.batch_scenes, cfg.chunk_len)
        report = ev.score(preds, ev.gold_labels(valid),
                          ev.identity_mapping(ev.gold_labels(valid).values()))
        print(f"held-out accuracy: {report.accuracy:.4f}")
    return 0


def cmd_crossval(cfg: RunConfig) -> int:
    corpus = cp.parse_corpus(_require(cfg, "train_corpus"))
    vocab = cp.build_vocab(corpus, cfg.min_token_count)
    tc = cfg.train_config()
    # validate the fold count before any work is done
    tr.fold_assignment([s.id for s in corpus.scenes], tc.folds, tc.seed)
    out = _outdir(cfg)
    _snapshot(cfg, "crossval")
    results, assignment = tr.crossval(corpus, vocab, cfg.model_config(), tc, _pretrained(cfg, vocab))
    folds = [[s for s, f in assignment.items() if f == k] for k in range(tc.folds)]
    manifest = {"folds": folds, "sizes": [len(f) for f in folds], "seed": tc.seed,
                "checkpoints": [], "reports": []}
    for r in results:
        path = out / f"fold{r.fold}.ckpt"
        tr.save_checkpoint(r.checkpoint, path)
        manifest["checkpoints"].append(path.name)
        manifest["reports"].append({"fold": r.fold, "macro_f1": r.report.macro_f1,
                                    "accuracy": r.report.accuracy})
        print(f"fold {r.fold}: macro-F1 {r.report.macro_f1:.4f} accuracy {r.report.accuracy:.4f}")
    (out / "fold_manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    if not cfg.checkpoints:
        raise ConfigError("predict needs at least one path in 'checkpoints'")
    for p in cfg.checkpoints:
        if not Path(p).exists():
            raise FileNotFoundError(f"checkpoint not found: {p}")
    corpus = cp.parse_corpus(_require(cfg, "test_corpus"))
    members = [tr.load_checkpoint(p) for p in cfg.checkpoints]
    ensemble = tr.EnsembleModel(members)
    vocab = members[0].vocab
    if cfg.train_corpus:
        run_vocab = cp.build_vocab(cp.parse_corpus(_require(cfg, "train_corpus")), cfg.min_token_count)
        if run_vocab.digest() != ensemble.vocab_digest:
            raise ConfigError(f"vocabulary digest mismatch: run {run_vocab.digest()}, "
                              f"checkpoint {ensemble.vocab_digest}")
    _snapshot(cfg, "predict")
    preds = tr.ensemble_predict(ensemble, corpus, vocab, cfg.batch_scenes, cfg.chunk_len)
    path = Path(cfg.predictions) if cfg.predictions else _outdir(cfg) / "predictions.tsv"
    preds.write(path, cfg.with_distributions)
    print(f"predictions: {path} ({len(preds)} mentions)")
    return 0


def _mapping(cfg: RunConfig, golds: dict[str, str]) -> ev.ClassMapping:
    if cfg.condition == "all":
        return ev.build_all_entities_mapping(golds.values(), cfg.min_class_count)
    if cfg.condition == "main":
        return ev.build_main_entities_mapping(cfg.main_entities)
    raise ConfigError(f"condition must be 'all' or 'main', got {cfg.condition!r}")


def cmd_score(cfg: RunConfig) -> int:
    gold_corpus = cp.parse_corpus(_require(cfg, "test_corpus"))
    preds = ev.read_predictions(_require(cfg, "predictions"))
    golds = ev.gold_labels(gold_corpus)
    mapping = _mapping(cfg, golds)
    _snapshot(cfg, "score")
    report = ev.score(preds, golds, mapping, cfg.include_catch_all)
    result = report.to_json()
    cats = ev.gold_categories(gold_corpus)
    if any(c != cp.UNTAGGED for c in cats.values()):
        result["breakdown"] = {tag: r.to_json() for tag, r in
                               ev.breakdown_by_category(preds, golds, cats, mapping,
                                                        cfg.include_catch_all).items()}
    text = ev.write_json(result, cfg.output or _outdir(cfg) / "report.json")
    print(text, end="")
    return 0


def cmd_sigtest(cfg: RunConfig) -> int:
    gold_corpus = cp.parse_corpus(_require(cfg, "test_corpus"))
    a = ev.read_predictions(_require(cfg, "predictions_a"))
    b = ev.read_predictions(_require(cfg, "predictions_b"))
    golds = ev.gold_labels(gold_corpus)
    mapping = _mapping(cfg, golds)
    _snapshot(cfg, "sigtest")
    res = ev.approx_randomization(a, b, golds, mapping, cfg.permutations, cfg.seed, cfg.statistic,
                                  cfg.include_catch_all)
    text = ev.write_json(res.to_json(), cfg.output or _outdir(cfg) / "sigtest.json")
    print(text, end="")
    return 0


def cmd_gradcheck(cfg: RunConfig) -> int:
    _snapshot(cfg, "gradcheck")
    ok = True
    summary = {}
    for variant in ("EntLib", "NoEntLib"):
        rep = gradcheck_model(variant, cfg.seed, cfg.gradcheck_step, cfg.gradcheck_tolerance,
                              corrupt=cfg.corrupt_grad if cfg.corrupt_grad in _param_groups(variant) else None)
        summary[variant] = rep.errors
        for name, err in rep.errors.items():
            flag = "ok" if err <= rep.tolerance else "FAIL"
            print(f"{variant:8s} {name:10s} max rel err {err:.3e}  {flag}")
        if not rep.passed:
            ok = False
            print(f"gradcheck failed for {variant}: {', '.join(rep.failures())}", file=sys.stderr)
    ev.write_json({"passed": ok, "tolerance": cfg.gradcheck_tolerance, "errors": summary},
                  _outdir(cfg) / "gradcheck.json")
    return 0 if ok else 1


def _param_groups(variant: str) -> set[str]:
    groups = {"W_t", "W_s", "W_o", "b"} | {f"{d}.{k}" for d in ("fwd", "bwd") for k in ("W_ih", "W_hh", "b")}
    return groups | {"E"} if variant == "EntLib" else groups


def cmd_synth(cfg: RunConfig) -> int:
    synth = cp.read_synth_config(_require(cfg, "synth_config")) if cfg.synth_config else cp.SynthConfig()
    _snapshot(cfg, "synth")
    corpus = cp.synth_corpus(synth, cfg.seed)
    path = Path(cfg.output) if cfg.output else _outdir(cfg) / "synth.tsv"
    cp.write_corpus(corpus, path)
    print(f"corpus: {path} ({len(corpus)} scenes, {len(corpus.mentions())} mentions)")
    return 0


def cmd_stats(cfg: RunConfig) -> int:
    key = next((k for k in ("corpus", "test_corpus", "train_corpus") if getattr(cfg, k)), "corpus")
    corpus = cp.parse_corpus(_require(cfg, key))
    _snapshot(cfg, "stats")
    stats = cp.corpus_stats(corpus)
    total = stats.total
    print(f"{'category':12s} {'count':>7s} {'share':>7s}")
    for tag, n in stats.by_category.most_common():
        print(f"{tag:12s} {n:7d} {100 * n / total:6.1f}%")
    print(f"{'total':12s} {total:7d}")
    ev.write_json({"total": total, "by_category": dict(stats.by_category.most_common()),
                   "by_entity": dict(stats.by_entity.most_common())},
                  cfg.output or _outdir(cfg) / "stats.json")
    return 0


HANDLERS = {"train": cmd_train, "crossval": cmd_crossval, "predict": cmd_predict,
            "score": cmd_score, "sigtest": cmd_sigtest, "gradcheck": cmd_gradcheck,
            "synth": cmd_synth, "stats": cmd_stats}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="entlib", description=__doc__.split("\n\n")[0],
                                     allow_abbrev=False)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, help="JSON run configuration")
    parser.add_argument("-v", "--verbose", action="store_true")
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args.config, rest)
        return HANDLERS[args.command](cfg)
    except (UsageError, ConfigError, OSError, ValueError, KeyError, tr.CheckpointError) as exc:
        print(f"entlib {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except tr.TrainingDiverged as exc:
        print(f"entlib {args.command}: training diverged: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
