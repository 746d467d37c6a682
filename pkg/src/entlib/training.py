"""Training loop, cross-validation, checkpoints and output-averaging ensembles."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, ConfigError, Tensor
from .corpus import UNSEEN, Corpus, Vocabulary, chunk_and_batch
from .evaluation import (EvalReport, Prediction, PredictionSet, build_all_entities_mapping,
                         gold_labels, score)
from .model import ModelConfig, ModelParams, forward_batch, guard_entity_rows, init_params

log = logging.getLogger(__name__)

MAGIC = b"ENTLIB1\0"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_scenes: int = 24
    chunk_len: int = 757
    max_epochs: int = 50
    patience: int = 5
    folds: int = 5
    seed: int = 0
    min_class_count: int = 3
    track_train_loss: bool = False

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0")
        if self.batch_scenes < 1 or self.chunk_len < 1:
            raise ConfigError("batch_scenes and chunk_len must be >= 1")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.max_epochs < 1 or not 1 <= self.patience <= self.max_epochs:
            raise ConfigError("need max_epochs >= 1 and 1 <= patience <= max_epochs")

    def to_dict(self) -> dict:
        return asdict(self)


def threads() -> int:
    env = os.environ.get("ENTLIB_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# loss


def chunk_loss(probs: Tensor, golds) -> Tensor:
    """Mean negative log-likelihood over mentions with an in-vocabulary gold.

    Mentions whose gold is ``UNSEEN`` are skipped. With nothing left the
    result is a constant zero and a warning is logged.
    """
    golds = np.asarray(golds, dtype=np.intp)
    keep = np.flatnonzero(golds != UNSEEN)
    if len(keep) == 0:
        log.warning("batch has no trainable mentions; loss is zero")
        return Tensor(0.0)
    sel = probs if len(keep) == len(golds) else ad.getitem(probs, keep)
    return ad.tmean(ad.nll_loss(sel, golds[keep]))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    vocab: Vocabulary
    arrays: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)

    @property
    def vocab_digest(self) -> str:
        return self.vocab.digest()

    def params(self) -> ModelParams:
        return ModelParams.from_arrays(self.config, self.arrays)

    def to_bytes(self) -> bytes:
        manifest, offset = [], 0
        payloads = []
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset,
                             "nbytes": arr.nbytes})
            payloads.append(arr.tobytes())
            offset += arr.nbytes
        header = {
            "version": CHECKPOINT_VERSION,
            "model_config": self.config.to_dict(),
            "vocab_digest": self.vocab_digest,
            "vocabulary": self.vocab.to_dict(),
            "arrays": manifest,
            "metadata": self.metadata,
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        body = MAGIC + struct.pack("<Q", len(hbytes)) + hbytes + b"".join(payloads)
        return body + hashlib.sha256(body).digest()

    @classmethod
    def from_bytes(cls, blob: bytes, expected_vocab_digest: str | None = None) -> "Checkpoint":
        if len(blob) < len(MAGIC) + 8 + 32 or not blob.startswith(MAGIC):
            raise CheckpointError("not a checkpoint file (bad magic or truncated)")
        body, digest = blob[:-32], blob[-32:]
        if hashlib.sha256(body).digest() != digest:
            raise CheckpointError("content digest mismatch: file is corrupt or truncated")
        (hlen,) = struct.unpack_from("<Q", body, len(MAGIC))
        start = len(MAGIC) + 8
        try:
            header = json.loads(body[start:start + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable header: {exc}") from None
        if header.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {header.get('version')!r}")
        vocab = Vocabulary.from_dict(header["vocabulary"])
        if vocab.digest() != header["vocab_digest"]:
            raise CheckpointError("stored vocabulary does not match its digest")
        if expected_vocab_digest is not None and header["vocab_digest"] != expected_vocab_digest:
            raise CheckpointError(f"vocabulary digest mismatch: checkpoint {header['vocab_digest']}, "
                                  f"expected {expected_vocab_digest}")
        payload = body[start + hlen:]
        arrays = {}
        for entry in header["arrays"]:
            lo, n = entry["offset"], entry["nbytes"]
            if lo + n > len(payload):
                raise CheckpointError(f"array {entry['name']} extends past the payload")
            arrays[entry["name"]] = np.frombuffer(payload, dtype="<f8", count=n // 8,
                                                  offset=lo).reshape(entry["shape"]).astype(np.float64)
        return cls(ModelConfig(**header["model_config"]), vocab, arrays, header["metadata"])


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path, expected_vocab_digest: str | None = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), expected_vocab_digest)


# ---------------------------------------------------------------------------
# prediction helpers


def mention_distributions(params: ModelParams, corpus: Corpus, vocab: Vocabulary,
                          batch_scenes: int = 24, chunk_len: int = 757):
    """Eval-mode class distributions for every mention, in corpus order.

    Returns ``(mention_ids, probs, golds)``.
    """
    ids, probs, golds = [], [], []
    for batch in chunk_and_batch(corpus, vocab, batch_scenes, chunk_len):
        out = forward_batch(batch, params)
        ids.extend(out.mention_ids)
        probs.append(out.probs.data)
        golds.append(batch.golds)
    N = vocab.n_entities
    P = np.concatenate(probs) if probs else np.zeros((0, N))
    G = np.concatenate(golds) if golds else np.zeros(0, dtype=np.intp)
    return ids, P, G


def _prediction_set(ids, probs, vocab: Vocabulary) -> PredictionSet:
    idx = np.argmax(probs, axis=-1) if len(ids) else []
    return PredictionSet([Prediction(m, vocab.entities[int(i)], probs[j])
                          for j, (m, i) in enumerate(zip(ids, idx))], vocab.digest())


def predict_corpus(params: ModelParams, corpus: Corpus, vocab: Vocabulary,
                   batch_scenes: int = 24, chunk_len: int = 757) -> PredictionSet:
    ids, probs, _ = mention_distributions(params, corpus, vocab, batch_scenes, chunk_len)
    return _prediction_set(ids, probs, vocab)


def evaluate_params(params: ModelParams, corpus: Corpus, vocab: Vocabulary,
                    train_config: TrainConfig) -> EvalReport:
    """All-entities report with the mapping built from ``corpus``'s golds."""
    preds = predict_corpus(params, corpus, vocab, train_config.batch_scenes, train_config.chunk_len)
    golds = gold_labels(corpus)
    mapping = build_all_entities_mapping(golds.values(), train_config.min_class_count)
    return score(preds, golds, mapping)


def eval_loss(params: ModelParams, corpus: Corpus, vocab: Vocabulary,
              train_config: TrainConfig) -> float:
    """Mention-weighted mean loss in inference mode."""
    _, probs, golds = mention_distributions(params, corpus, vocab, train_config.batch_scenes,
                                            train_config.chunk_len)
    keep = golds != UNSEEN
    if not keep.any():
        return 0.0
    return float(ad.nll_loss(probs[keep], golds[keep]).data.mean())


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    params: ModelParams


def train(corpus: Corpus, vocab: Vocabulary, model_config: ModelConfig,
          train_config: TrainConfig, validation: Corpus | None = None,
          pretrained: np.ndarray | None = None, on_epoch=None) -> TrainResult:
    """Fit a model with Adam on the mean mention NLL.

    With a ``validation`` corpus, training stops after ``patience`` epochs
    without a macro-F1 improvement and the best epoch's parameters are
    returned; otherwise the parameters after ``max_epochs`` are returned.
    """
    rng = np.random.default_rng(train_config.seed)
    params = init_params(model_config, vocab, pretrained)
    state = AdamState()
    arrays = params.arrays()
    history: list[dict] = []
    best_arrays, best_metric, best_epoch, stale = None, -math.inf, 0, 0

    for epoch in range(1, train_config.max_epochs + 1):
        total, count = 0.0, 0
        for batch in chunk_and_batch(corpus, vocab, train_config.batch_scenes,
                                     train_config.chunk_len, rng):
            n = int(np.sum(batch.golds != UNSEEN))
            if n == 0:
                continue
            with ad.Tape() as tape:
                out = forward_batch(batch, params, model_config, training=True, rng=rng)
                loss = chunk_loss(out.probs, out.golds)
                value = loss.item()
                if not math.isfinite(value):
                    raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
                tape.backward(loss)
            prev_E = arrays["E"].copy() if "E" in arrays else None
            ad.adam_step(arrays, params.grads(), state, train_config.learning_rate)
            if prev_E is not None:
                restored = guard_entity_rows(params, prev_E)
                if restored:
                    log.warning("restored %d zero-norm entity rows", restored)
            params.zero_grad()
            total += value * n
            count += n
        record = {"epoch": epoch, "train_loss": total / count if count else 0.0}
        if train_config.track_train_loss:
            record["train_eval_loss"] = eval_loss(params, corpus, vocab, train_config)
        if validation is not None:
            report = evaluate_params(params, validation, vocab, train_config)
            record["valid_macro_f1"] = report.macro_f1
            record["valid_accuracy"] = report.accuracy
            if report.macro_f1 > best_metric:
                best_metric, best_epoch, stale = report.macro_f1, epoch, 0
                best_arrays = {k: v.copy() for k, v in arrays.items()}
            else:
                stale += 1
        history.append(record)
        log.info("epoch %s", record)
        if on_epoch is not None:
            on_epoch(record)
        if validation is not None and stale >= train_config.patience:
            break

    if best_arrays is None:
        best_arrays = {k: v.copy() for k, v in arrays.items()}
        best_epoch = history[-1]["epoch"] if history else 0
    meta = {"epoch": best_epoch, "history": history, "seed": train_config.seed,
            "train_config": train_config.to_dict()}
    ckpt = Checkpoint(model_config, vocab, best_arrays, meta)
    return TrainResult(ckpt, history, ModelParams.from_arrays(model_config, best_arrays))


# ---------------------------------------------------------------------------
# cross-validation


def fold_assignment(scene_ids: list[str], folds: int, seed: int) -> dict[str, int]:
    """Seeded partition of scenes into ``folds`` near-equal parts."""
    if folds > len(scene_ids):
        raise ConfigError(f"cannot make {folds} folds from {len(scene_ids)} scenes")
    if folds < 2:
        raise ConfigError("folds must be >= 2")
    perm = np.random.default_rng(seed).permutation(len(scene_ids))
    out = {}
    for f, part in enumerate(np.array_split(perm, folds)):
        for i in part:
            out[scene_ids[int(i)]] = f
    return {s: out[s] for s in scene_ids}


@dataclass
class FoldResult:
    fold: int
    checkpoint: Checkpoint
    report: EvalReport
    history: list[dict]


def crossval(corpus: Corpus, vocab: Vocabulary, model_config: ModelConfig,
             train_config: TrainConfig, pretrained: np.ndarray | None = None,
             max_workers: int | None = None):
    """Train one model per fold, validating on the held-out fold.

    All folds share ``vocab`` (built from the whole corpus) so that their
    checkpoints can form an ensemble.

    Returns:
        ``(fold_results, assignment)`` where ``assignment`` maps scene id to fold.
    """
    ids = [s.id for s in corpus.scenes]
    assignment = fold_assignment(ids, train_config.folds, train_config.seed)

    def run(f: int) -> FoldResult:
        held = [s for s in ids if assignment[s] == f]
        rest = [s for s in ids if assignment[s] != f]
        cfg = TrainConfig(**{**train_config.to_dict(), "seed": train_config.seed + 1000 * (f + 1)})
        res = train(corpus.subset(rest), vocab, model_config, cfg, corpus.subset(held), pretrained)
        res.checkpoint.metadata["fold"] = f
        report = evaluate_params(res.params, corpus.subset(held), vocab, cfg)
        return FoldResult(f, res.checkpoint, report, res.history)

    workers = max_workers or threads()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, range(train_config.folds)))
    else:
        results = [run(f) for f in range(train_config.folds)]
    return results, assignment


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleModel:
    members: list[Checkpoint]

    def __post_init__(self):
        if not self.members:
            raise ConfigError("an ensemble needs at least one member")
        digests = {m.vocab_digest for m in self.members}
        if len(digests) != 1:
            raise ConfigError(f"ensemble members have different vocabularies: {sorted(digests)}")
        configs = {json.dumps(m.config.to_dict(), sort_keys=True) for m in self.members}
        if len(configs) != 1:
            raise ConfigError("ensemble members have different model configurations")

    @property
    def vocab_digest(self) -> str:
        return self.members[0].vocab_digest


def ensemble_predict(ensemble: EnsembleModel, corpus: Corpus, vocab: Vocabulary,
                     batch_scenes: int = 24, chunk_len: int = 757,
                     max_workers: int | None = None) -> PredictionSet:
    """Average the members' class distributions per mention, then take the argmax.

    Member outputs are sorted per entry and summed in extended precision, so
    the result does not depend on member order and an ensemble of identical
    members reproduces the single model exactly.
    """
    if vocab.digest() != ensemble.vocab_digest:
        raise ConfigError(f"vocabulary digest mismatch: run {vocab.digest()}, "
                          f"ensemble {ensemble.vocab_digest}")

    def run(member: Checkpoint):
        return mention_distributions(member.params(), corpus, vocab, batch_scenes, chunk_len)

    workers = min(max_workers or threads(), len(ensemble.members))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, ensemble.members))
    else:
        outs = [run(m) for m in ensemble.members]
    ids = outs[0][0]
    stacked = np.sort(np.stack([o[1] for o in outs]).astype(np.longdouble), axis=0)
    mean = (stacked.sum(axis=0) / len(outs)).astype(np.float64)
    return _prediction_set(ids, mean, vocab)
