"""Scoring under class mappings, per-category breakdowns, significance tests.

Predictions and golds are compared on raw entity ids after both sides are
mapped through a :class:`ClassMapping`, so gold entities the model never
saw in training simply count as errors.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autodiff import ConfigError
from .corpus import Corpus, DataError

CATCH_ALL = "<other>"


@dataclass
class Prediction:
    mention_id: str
    entity_id: str
    distribution: np.ndarray | None = None


@dataclass
class PredictionSet:
    predictions: list[Prediction] = field(default_factory=list)
    vocab_digest: str | None = None

    def __post_init__(self):
        ids = [p.mention_id for p in self.predictions]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise DataError(f"duplicate mention id {dup!r} in predictions")

    def __len__(self) -> int:
        return len(self.predictions)

    def as_dict(self) -> dict[str, str]:
        return {p.mention_id: p.entity_id for p in self.predictions}

    def to_tsv(self, with_distributions: bool = False) -> str:
        lines = []
        for p in self.predictions:
            cols = [p.mention_id, p.entity_id]
            if with_distributions:
                if p.distribution is None:
                    raise DataError(f"no distribution stored for {p.mention_id}")
                cols.append(",".join(repr(float(x)) for x in p.distribution))
            lines.append("\t".join(cols) + "\n")
        return "".join(lines)

    def write(self, path, with_distributions: bool = False) -> None:
        Path(path).write_text(self.to_tsv(with_distributions), encoding="utf-8")


def read_predictions(path) -> PredictionSet:
    preds = []
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (2, 3):
            raise DataError(f"{path}:{line_no}: expected 2 or 3 columns")
        dist = np.array([float(x) for x in cols[2].split(",")]) if len(cols) == 3 else None
        preds.append(Prediction(cols[0], cols[1], dist))
    return PredictionSet(preds)


def gold_labels(corpus: Corpus) -> dict[str, str]:
    return {m.mention_id: m.entity_id for m in corpus.mentions()}


def gold_categories(corpus: Corpus) -> dict[str, str]:
    return {m.mention_id: m.category for m in corpus.mentions()}


# ---------------------------------------------------------------------------
# class mappings


@dataclass
class ClassMapping:
    """Maps entity ids onto contiguous class indices.

    With a catch-all class, every id not explicitly listed maps to it;
    without one, unlisted ids are a :class:`DataError`.
    """

    condition: str
    classes: list[str]
    catch_all: int | None = None

    def __post_init__(self):
        self._index = {c: i for i, c in enumerate(self.classes) if i != self.catch_all}

    def __len__(self) -> int:
        return len(self.classes)

    def __call__(self, entity_id: str) -> int:
        i = self._index.get(entity_id)
        if i is None:
            if self.catch_all is None:
                raise DataError(f"entity {entity_id!r} is not covered by mapping {self.condition!r}")
            return self.catch_all
        return i

    def map_all(self, ids) -> np.ndarray:
        return np.array([self(e) for e in ids], dtype=np.intp)


def build_all_entities_mapping(gold_ids, min_count: int = 3) -> ClassMapping:
    """One class per entity with at least ``min_count`` gold mentions, plus a catch-all.

    Named classes follow first occurrence in ``gold_ids``.
    """
    gold_ids = list(gold_ids)
    counts = Counter(gold_ids)
    kept = [e for e in dict.fromkeys(gold_ids) if counts[e] >= min_count]
    return ClassMapping("all", kept + [CATCH_ALL], catch_all=len(kept))


def build_main_entities_mapping(main_ids, expected: int = 6) -> ClassMapping:
    main_ids = [str(x) for x in main_ids]
    if len(main_ids) != expected or len(set(main_ids)) != expected:
        raise ConfigError(f"main-entities condition needs exactly {expected} distinct ids, got {main_ids}")
    return ClassMapping("main", main_ids + [CATCH_ALL], catch_all=expected)


def identity_mapping(entity_ids) -> ClassMapping:
    return ClassMapping("identity", list(dict.fromkeys(entity_ids)))


# ---------------------------------------------------------------------------
# scoring


@dataclass
class ClassScore:
    label: str
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class EvalReport:
    condition: str
    macro_f1: float
    accuracy: float
    per_class: list[ClassScore]
    n: int

    def to_json(self) -> dict:
        return {
            "condition": self.condition,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "per_class": [{"class": c.label, "precision": c.precision, "recall": c.recall,
                           "f1": c.f1, "support": c.support} for c in self.per_class],
        }


def _as_dict(preds) -> dict[str, str]:
    return preds.as_dict() if isinstance(preds, PredictionSet) else dict(preds)


def _aligned(preds, golds) -> tuple[list[str], list[str], list[str]]:
    p, g = _as_dict(preds), _as_dict(golds)
    if p.keys() != g.keys():
        missing = sorted(g.keys() - p.keys())
        extra = sorted(p.keys() - g.keys())
        first = missing[0] if missing else extra[0]
        raise DataError(f"predictions and golds disagree on mention ids (first offending id: {first!r}; "
                        f"{len(missing)} missing, {len(extra)} extra)")
    ids = sorted(g)
    return ids, [p[i] for i in ids], [g[i] for i in ids]


def _class_counts(gold: np.ndarray, pred: np.ndarray, C: int):
    """True-positive, predicted and gold counts per class.

    ``pred`` may be ``P x M`` (one row per system variant); counts then
    have shape ``P x C``.
    """
    pred2 = np.atleast_2d(pred)
    P = pred2.shape[0]
    offs = (np.arange(P) * C)[:, None]
    hit = pred2 == gold[None, :]
    tp = np.bincount((offs + pred2)[hit], minlength=P * C).reshape(P, C)
    pc = np.bincount((offs + pred2).ravel(), minlength=P * C).reshape(P, C)
    gc = np.bincount(gold, minlength=C)
    return tp, pc, gc, hit


def _f1(tp, pc, gc) -> np.ndarray:
    denom = pc + gc
    return np.divide(2.0 * tp, denom, out=np.zeros(np.broadcast(tp, denom).shape), where=denom > 0)


def _statistic(gold, pred, C, included, statistic) -> np.ndarray:
    tp, pc, gc, hit = _class_counts(gold, pred, C)
    if statistic == "accuracy":
        return hit.mean(axis=1)
    return _f1(tp, pc, gc)[:, included].mean(axis=1)


def score(preds, golds, mapping: ClassMapping, include_catch_all: bool = True) -> EvalReport:
    """Macro-F1 and accuracy over the mapping's classes.

    Per-class F1 is ``2 tp / (predicted + gold)``, taken as 0 when both
    counts are zero; such classes still enter the macro average. Set
    ``include_catch_all=False`` to leave the catch-all class out of it.
    """
    ids, p, g = _aligned(preds, golds)
    C = len(mapping)
    gold = mapping.map_all(g)
    pred = mapping.map_all(p)
    tp, pc, gc, hit = _class_counts(gold, pred, C)
    tp, pc = tp[0], pc[0]
    f1 = _f1(tp, pc, gc)
    prec = np.divide(tp, pc, out=np.zeros(C), where=pc > 0)
    rec = np.divide(tp, gc, out=np.zeros(C), where=gc > 0)
    included = [c for c in range(C) if include_catch_all or c != mapping.catch_all]
    per_class = [ClassScore(mapping.classes[c], float(prec[c]), float(rec[c]), float(f1[c]), int(gc[c]))
                 for c in range(C)]
    macro = float(np.mean(f1[included])) if included else 0.0
    acc = float(hit.mean()) if len(ids) else 0.0
    return EvalReport(mapping.condition, macro, acc, per_class, len(ids))


def breakdown_by_category(preds, golds, categories: Mapping[str, str],
                          mapping: ClassMapping, include_catch_all: bool = True) -> dict[str, EvalReport]:
    """Score each category's mentions separately under the shared mapping."""
    p, g = _as_dict(preds), _as_dict(golds)
    groups: dict[str, list[str]] = {}
    for mid in g:
        groups.setdefault(categories.get(mid) or "other", []).append(mid)
    out = {}
    for tag in sorted(groups):
        mids = groups[tag]
        try:
            sub_p = {m: p[m] for m in mids}
        except KeyError as exc:
            raise DataError(f"no prediction for mention {exc.args[0]!r}") from None
        out[tag] = score(sub_p, {m: g[m] for m in mids}, mapping, include_catch_all)
    return out


# ---------------------------------------------------------------------------
# approximate randomization


@dataclass
class SigTestResult:
    statistic: str
    observed_diff: float
    permutations: int
    count: int
    p_value: float
    seed: int

    def to_json(self) -> dict:
        return {"statistic": self.statistic, "observed_diff": self.observed_diff,
                "R": self.permutations, "count": self.count, "p_value": self.p_value,
                "seed": self.seed}


def approx_randomization(preds_a, preds_b, golds, mapping: ClassMapping, R: int = 10000,
                         seed: int = 0, statistic: str = "macro_f1",
                         include_catch_all: bool = True, block: int = 1000) -> SigTestResult:
    """Paired approximate randomization test on the difference of a metric.

    Each of the ``R`` shuffles swaps the two systems' predictions for every
    mention independently with probability 1/2. The p-value is
    ``(count + 1) / (R + 1)`` where ``count`` is the number of shuffles whose
    absolute difference reaches the observed one.
    """
    if R < 1:
        raise ConfigError(f"R must be >= 1, got {R}")
    if statistic not in ("macro_f1", "accuracy"):
        raise ConfigError(f"unknown statistic {statistic!r}")
    ids, pa, g = _aligned(preds_a, golds)
    _, pb, _ = _aligned(preds_b, golds)
    C = len(mapping)
    gold = mapping.map_all(g)
    a = mapping.map_all(pa)
    b = mapping.map_all(pb)
    included = [c for c in range(C) if include_catch_all or c != mapping.catch_all]
    sa, sb = _statistic(gold, np.stack([a, b]), C, included, statistic)
    observed = abs(sa - sb)
    rng = np.random.default_rng(seed)
    count = 0
    done = 0
    while done < R:
        n = min(block, R - done)
        swap = rng.random((n, len(ids))) < 0.5
        xa = np.where(swap, b[None, :], a[None, :])
        xb = np.where(swap, a[None, :], b[None, :])
        diff = np.abs(_statistic(gold, xa, C, included, statistic)
                      - _statistic(gold, xb, C, included, statistic))
        # tolerance absorbs summation-order rounding between equal statistics
        count += int(np.sum(diff >= observed - 1e-12))
        done += n
    return SigTestResult(statistic, float(observed), R, count, (count + 1) / (R + 1), seed)


def write_json(obj, path=None) -> str:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
