"""Dialogue corpus: data model, TSV ingestion, vocabularies, chunking.

Corpus TSV layout (UTF-8, one token per line)::

    #scene s01
    #speakers Joey Tribbiani
    see<TAB>-
    Ross<TAB>E:335<TAB>NNP
    ...
    <blank line ends the utterance>

The mention field is ``-`` or ``B:<id>`` / ``I:<id>`` / ``E:<id>`` for the
begin, inside and end token of a span; a single-token mention uses ``E:``.
The third column (a category tag such as a part-of-speech) is optional.
Only the last token of a span is resolved by the model.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "entlib-tsv-1"
UNSEEN = -1
UNK = "<unk>"
UNTAGGED = "other"

_MENTION_RE = re.compile(r"^([BIE]):(\S+)$")


class ParseError(ValueError):
    """A corpus line does not follow the TSV layout."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}" if line_no is not None else message)


class DataError(ValueError):
    """Well-formed lines that describe inconsistent mentions or speakers."""


class FormatError(ValueError):
    """A binary embedding file is malformed or truncated."""


@dataclass(frozen=True)
class Mention:
    entity_id: str
    marker: str  # B, I or E
    span_final: bool


@dataclass
class TokenRecord:
    surface: str
    mention: Mention | None = None
    category: str | None = None
    # (scene index, utterance index, token index within the scene)
    position: tuple[int, int, int] = (0, 0, 0)


@dataclass
class Utterance:
    speakers: tuple[str, ...]
    tokens: list[TokenRecord] = field(default_factory=list)


@dataclass
class Scene:
    id: str
    utterances: list[Utterance] = field(default_factory=list)

    def tokens(self) -> list[TokenRecord]:
        return [tok for utt in self.utterances for tok in utt.tokens]

    def token_speakers(self) -> list[tuple[str, ...]]:
        return [utt.speakers for utt in self.utterances for _ in utt.tokens]

    def __len__(self) -> int:
        return sum(len(utt.tokens) for utt in self.utterances)


@dataclass(frozen=True)
class MentionRef:
    """A resolvable mention: the span-final token of a gold span."""

    mention_id: str
    scene_id: str
    token_index: int
    entity_id: str
    category: str


@dataclass
class Corpus:
    scenes: list[Scene] = field(default_factory=list)
    source: str | None = None
    format_version: str = FORMAT_VERSION

    def __post_init__(self):
        ids = [s.id for s in self.scenes]
        if len(set(ids)) != len(ids):
            dup = next(i for i, c in Counter(ids).items() if c > 1)
            raise DataError(f"duplicate scene id {dup!r}")

    def __len__(self) -> int:
        return len(self.scenes)

    def subset(self, scene_ids) -> "Corpus":
        wanted = set(scene_ids)
        return Corpus([s for s in self.scenes if s.id in wanted], self.source)

    def mentions(self) -> list[MentionRef]:
        out = []
        for scene in self.scenes:
            toks = scene.tokens()
            for i, tok in enumerate(toks):
                if tok.mention is not None and tok.mention.span_final:
                    out.append(MentionRef(mention_id(scene.id, i), scene.id, i,
                                          tok.mention.entity_id, _mention_category(toks, i)))
        return out


def mention_id(scene_id: str, token_index: int) -> str:
    return f"{scene_id}:{token_index}"


def _mention_category(toks: list[TokenRecord], index: int) -> str:
    if toks[index].category:
        return toks[index].category
    # fall back to any tag inside the span
    j = index - 1
    while j >= 0 and toks[j].mention is not None and not toks[j].mention.span_final:
        if toks[j].category:
            return toks[j].category
        j -= 1
    return UNTAGGED


# ---------------------------------------------------------------------------
# TSV ingestion


def parse_corpus(path) -> Corpus:
    path = Path(path)
    with open(path, encoding="utf-8", newline="") as f:
        text = f.read()
    corpus = parse_corpus_text(text)
    corpus.source = str(path)
    return corpus


def parse_corpus_text(text: str) -> Corpus:
    scenes: list[Scene] = []
    scene: Scene | None = None
    utt: Utterance | None = None
    open_span: tuple[str, int] | None = None  # (entity id, line of B)
    utt_line = 0

    def close_utterance(line_no):
        nonlocal utt
        if open_span is not None:
            raise DataError(f"line {open_span[1]}: mention span is not closed within its utterance")
        if utt is not None and not utt.tokens:
            raise ParseError("utterance without tokens", utt_line)
        utt = None

    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r")
        if "\t" in line:
            if utt is None:
                raise ParseError("token line outside an utterance", line_no)
            cols = line.split("\t")
            if len(cols) not in (2, 3):
                raise ParseError(f"expected 2 or 3 columns, got {len(cols)}", line_no)
            surface, field_, *rest = cols
            if not surface or any(c.isspace() for c in surface):
                raise ParseError(f"bad token text {surface!r}", line_no)
            category = rest[0] if rest else None
            mention = None
            if field_ != "-":
                m = _MENTION_RE.match(field_)
                if m is None:
                    raise DataError(f"line {line_no}: malformed mention field {field_!r}")
                marker, ent = m.groups()
                if marker == "B":
                    if open_span is not None:
                        raise DataError(f"line {line_no}: overlapping mention spans")
                    open_span = (ent, line_no)
                elif marker == "I":
                    if open_span is None:
                        raise DataError(f"line {line_no}: span continuation without a span start")
                    if open_span[0] != ent:
                        raise DataError(f"line {line_no}: entity {ent} inside a span of {open_span[0]}")
                else:
                    if open_span is not None and open_span[0] != ent:
                        raise DataError(f"line {line_no}: entity {ent} closes a span of {open_span[0]}")
                    open_span = None
                mention = Mention(ent, marker, marker == "E")
            elif open_span is not None:
                raise DataError(f"line {line_no}: token without mention field inside an open span")
            utt.tokens.append(TokenRecord(surface, mention, category))
        elif line.startswith("#scene "):
            close_utterance(line_no)
            scene = Scene(line[len("#scene "):].strip())
            if not scene.id:
                raise ParseError("empty scene id", line_no)
            scenes.append(scene)
        elif line.startswith("#speakers "):
            if scene is None:
                raise ParseError("utterance before the first #scene line", line_no)
            close_utterance(line_no)
            names = tuple(n.strip() for n in line[len("#speakers "):].split(","))
            if not names or any(not n for n in names):
                raise ParseError("empty speaker name", line_no)
            utt = Utterance(names)
            utt_line = line_no
            scene.utterances.append(utt)
        elif line.strip() == "":
            close_utterance(line_no)
        else:
            raise ParseError(f"unrecognized line {line!r}", line_no)
    close_utterance(len(lines))

    for si, sc in enumerate(scenes):
        k = 0
        for ui, u in enumerate(sc.utterances):
            for tok in u.tokens:
                tok.position = (si, ui, k)
                k += 1
    return Corpus(scenes)


def serialize_corpus(corpus: Corpus) -> str:
    out = []
    for scene in corpus.scenes:
        out.append(f"#scene {scene.id}\n")
        for utt in scene.utterances:
            out.append(f"#speakers {','.join(utt.speakers)}\n")
            for tok in utt.tokens:
                field_ = "-" if tok.mention is None else f"{tok.mention.marker}:{tok.mention.entity_id}"
                cols = [tok.surface, field_] + ([tok.category] if tok.category is not None else [])
                out.append("\t".join(cols) + "\n")
            out.append("\n")
    return "".join(out)


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(serialize_corpus(corpus))


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    """Index spaces for tokens, speakers and entities.

    Tokens and speakers reserve index 0 for unknowns; entity lookups of an
    unknown id return ``UNSEEN``. Indices follow first occurrence, scene by
    scene in corpus order.
    """

    def __init__(self, tokens, speakers, entities):
        self.tokens = list(tokens)
        self.speakers = list(speakers)
        self.entities = list(entities)
        if self.tokens[:1] != [UNK] or self.speakers[:1] != [UNK]:
            raise DataError("token and speaker inventories must start with the UNK entry")
        for name, items in (("token", self.tokens), ("speaker", self.speakers), ("entity", self.entities)):
            if len(set(items)) != len(items):
                raise DataError(f"{name} inventory has duplicates")
        self._tok = {t: i for i, t in enumerate(self.tokens)}
        self._spk = {s: i for i, s in enumerate(self.speakers)}
        self._ent = {e: i for i, e in enumerate(self.entities)}

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def token_index(self, surface: str) -> int:
        return self._tok.get(surface, 0)

    def speaker_index(self, name: str) -> int:
        return self._spk.get(name, 0)

    def entity_index(self, entity_id: str) -> int:
        return self._ent.get(entity_id, UNSEEN)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "speakers": self.speakers, "entities": self.entities}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["speakers"], d["entities"])

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return (f"Vocabulary(tokens={len(self.tokens)}, speakers={len(self.speakers)}, "
                f"entities={len(self.entities)})")


def build_vocab(corpus: Corpus, min_token_count: int = 1) -> Vocabulary:
    counts: Counter = Counter()
    order: list[str] = []
    speakers = [UNK]
    seen_spk = {UNK}
    entities: list[str] = []
    seen_ent: set[str] = set()
    for scene in corpus.scenes:
        for utt in scene.utterances:
            for name in utt.speakers:
                if name not in seen_spk:
                    seen_spk.add(name)
                    speakers.append(name)
            for tok in utt.tokens:
                if tok.surface not in counts:
                    order.append(tok.surface)
                counts[tok.surface] += 1
                if tok.mention is not None and tok.mention.entity_id not in seen_ent:
                    seen_ent.add(tok.mention.entity_id)
                    entities.append(tok.mention.entity_id)
    tokens = [UNK] + [t for t in order if counts[t] >= min_token_count and t != UNK]
    return Vocabulary(tokens, speakers, entities)


# ---------------------------------------------------------------------------
# chunking and batching


@dataclass
class Chunk:
    """A contiguous run of at most ``chunk_len`` tokens from one scene."""

    scene_id: str
    offset: int
    token_ids: np.ndarray
    speaker_sets: list[tuple[int, ...]]
    mention_positions: np.ndarray
    golds: np.ndarray
    mention_ids: list[str]

    def __len__(self) -> int:
        return len(self.token_ids)


@dataclass
class Batch:
    """Chunks padded to a common length, with flattened lookup structures."""

    chunks: list[Chunk]
    tokens: np.ndarray            # B x T token indices (0 on padding)
    mask: np.ndarray              # B x T, True on real tokens
    speaker_rows: np.ndarray      # flat position b*T+t for each (position, speaker) pair
    speaker_ids: np.ndarray       # speaker index for each pair
    mention_batch: np.ndarray     # chunk index per mention
    mention_pos: np.ndarray       # position within chunk per mention
    golds: np.ndarray             # entity index per mention (UNSEEN allowed)
    mention_ids: list[str]

    @property
    def scene_ids(self) -> list[str]:
        return [c.scene_id for c in self.chunks]

    @property
    def n_mentions(self) -> int:
        return len(self.golds)

    @classmethod
    def from_chunks(cls, chunks: list[Chunk]) -> "Batch":
        B = len(chunks)
        T = max((len(c) for c in chunks), default=0)
        tokens = np.zeros((B, T), dtype=np.intp)
        mask = np.zeros((B, T), dtype=bool)
        rows, spk, mb, mp, golds, mids = [], [], [], [], [], []
        for b, c in enumerate(chunks):
            L = len(c)
            tokens[b, :L] = c.token_ids
            mask[b, :L] = True
            for t, sset in enumerate(c.speaker_sets):
                for s in sset:
                    rows.append(b * T + t)
                    spk.append(s)
            mb.extend([b] * len(c.mention_positions))
            mp.extend(c.mention_positions.tolist())
            golds.extend(c.golds.tolist())
            mids.extend(c.mention_ids)
        return cls(chunks, tokens, mask,
                   np.asarray(rows, dtype=np.intp), np.asarray(spk, dtype=np.intp),
                   np.asarray(mb, dtype=np.intp), np.asarray(mp, dtype=np.intp),
                   np.asarray(golds, dtype=np.intp), mids)


def chunk_boundaries(n_tokens: int, spans: list[tuple[int, int]], chunk_len: int) -> list[int]:
    """Start offsets of consecutive chunks covering ``n_tokens`` tokens.

    ``spans`` are inclusive ``(start, end)`` token ranges that must not be
    cut; a boundary that would fall inside one moves back to its start.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    inside = np.full(n_tokens + 1, -1, dtype=np.intp)
    for start, end in spans:
        inside[start + 1:end + 1] = start
    starts = [0] if n_tokens else []
    pos = 0
    while pos + chunk_len < n_tokens:
        cut = pos + chunk_len
        if inside[cut] >= 0:
            cut = int(inside[cut])
            if cut <= pos:
                raise DataError(f"mention span at token {cut} is longer than chunk_len {chunk_len}")
        starts.append(cut)
        pos = cut
    return starts


def scene_chunks(scene: Scene, vocab: Vocabulary, chunk_len: int) -> list[Chunk]:
    toks = scene.tokens()
    speakers = scene.token_speakers()
    spans, start = [], None
    for i, tok in enumerate(toks):
        if tok.mention is not None:
            if start is None:
                start = i
            if tok.mention.span_final:
                spans.append((start, i))
                start = None
    ids = np.array([vocab.token_index(t.surface) for t in toks], dtype=np.intp)
    spk = [tuple(vocab.speaker_index(n) for n in names) for names in speakers]
    finals = [i for i, t in enumerate(toks) if t.mention is not None and t.mention.span_final]
    starts = chunk_boundaries(len(toks), spans, chunk_len)
    out = []
    for lo, hi in zip(starts, starts[1:] + [len(toks)]):
        mpos = [i for i in finals if lo <= i < hi]
        out.append(Chunk(
            scene_id=scene.id,
            offset=lo,
            token_ids=ids[lo:hi],
            speaker_sets=spk[lo:hi],
            mention_positions=np.array([i - lo for i in mpos], dtype=np.intp),
            golds=np.array([vocab.entity_index(toks[i].mention.entity_id) for i in mpos], dtype=np.intp),
            mention_ids=[mention_id(scene.id, i) for i in mpos],
        ))
    return out


def chunk_and_batch(corpus: Corpus, vocab: Vocabulary, batch_scenes: int = 24,
                    chunk_len: int = 757, rng: np.random.Generator | None = None) -> list[Batch]:
    """Group scenes into batches of chunks.

    With an ``rng`` the scene order is shuffled first (once per call, i.e.
    per epoch); without one, corpus order is kept.
    """
    if batch_scenes < 1 or chunk_len < 1:
        raise ValueError("batch_scenes and chunk_len must be >= 1")
    order = np.arange(len(corpus.scenes))
    if rng is not None:
        order = rng.permutation(order)
    batches = []
    for lo in range(0, len(order), batch_scenes):
        chunks = []
        for si in order[lo:lo + batch_scenes]:
            chunks.extend(scene_chunks(corpus.scenes[si], vocab, chunk_len))
        batches.append(Batch.from_chunks(chunks))
    return batches


# ---------------------------------------------------------------------------
# pretrained vectors


@dataclass
class CoverageReport:
    hits: int
    misses: int
    missing: list[str]

    @property
    def coverage(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


def glorot_uniform(shape, rng: np.random.Generator) -> np.ndarray:
    """Uniform on [-a, a], a = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def _read_word2vec_binary(path):
    with open(path, "rb") as f:
        header = f.readline()
        try:
            count, dim = (int(x) for x in header.decode("ascii").split())
        except (UnicodeDecodeError, ValueError):
            raise FormatError(f"bad header {header[:40]!r}") from None
        buf = f.read()
    nbytes = 4 * dim
    pos = 0
    for n in range(count):
        while pos < len(buf) and buf[pos:pos + 1] in (b"\n", b" "):
            pos += 1
        end = buf.find(b" ", pos)
        if end < 0:
            raise FormatError(f"truncated file: entry {n} of {count} has no word terminator")
        word = buf[pos:end].decode("utf-8", errors="replace")
        pos = end + 1
        if pos + nbytes > len(buf):
            raise FormatError(f"truncated file: entry {n} of {count} is missing vector bytes")
        yield dim, word, np.frombuffer(buf, dtype="<f4", count=dim, offset=pos)
        pos += nbytes
    if count == 0:
        yield dim, None, None


def load_pretrained_embeddings(path, vocab: Vocabulary, dim: int = 300,
                               rng: np.random.Generator | None = None):
    """Token matrix initialized from a word2vec binary file.

    Rows of in-file tokens are copied; the rest (including UNK) are drawn by
    :func:`glorot_uniform` over the full matrix shape.

    Returns:
        ``(matrix, CoverageReport)``; the report counts vocabulary entries.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(vocab.tokens) if vocab is not None else 0
    matrix = glorot_uniform((n, dim), rng) if n else np.zeros((0, dim))
    found = np.zeros(n, dtype=bool)
    for file_dim, word, vec in _read_word2vec_binary(path):
        if file_dim != dim:
            raise FormatError(f"file dimension {file_dim} does not match expected {dim}")
        if word is None or not n:
            continue
        i = vocab.token_index(word)
        if (i != 0 or word == UNK) and not found[i]:
            matrix[i] = vec.astype(np.float64)
            found[i] = True
    missing = [t for t, f in zip(vocab.tokens, found) if not f] if n else []
    return matrix, CoverageReport(int(found.sum()), len(missing), missing)


def save_word2vec_binary(path, words, vectors) -> None:
    vectors = np.asarray(vectors, dtype="<f4")
    with open(path, "wb") as f:
        f.write(f"{len(words)} {vectors.shape[1]}\n".encode("ascii"))
        for w, v in zip(words, vectors):
            f.write(w.encode("utf-8") + b" " + v.tobytes() + b"\n")


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CorpusStats:
    by_category: Counter
    by_entity: Counter

    @property
    def total(self) -> int:
        return sum(self.by_entity.values())


def corpus_stats(corpus: Corpus) -> CorpusStats:
    cats: Counter = Counter()
    ents: Counter = Counter()
    for m in corpus.mentions():
        cats[m.category] += 1
        ents[m.entity_id] += 1
    return CorpusStats(cats, ents)


# ---------------------------------------------------------------------------
# synthetic dialogue


@dataclass
class SynthConfig:
    """Settings for :func:`synth_corpus`.

    Entity ``i`` has id ``str(100 + i)``, speaks as ``Person<i>`` and is
    named by the token ``Name<i>``. With ``head_entities > 0`` the first
    ``head_entities`` entities share ``head_mass`` of the speaking and
    naming probability; otherwise all entities are equally likely.
    """

    n_entities: int = 6
    n_scenes: int = 200
    min_participants: int = 2
    max_participants: int = 3
    min_utterances: int = 4
    max_utterances: int = 8
    min_fillers: int = 2
    max_fillers: int = 5
    filler_vocab: int = 20
    p_first_person: float = 0.5
    p_second_person: float = 0.3
    p_name: float = 0.4
    p_two_token_name: float = 0.0
    head_entities: int = 0
    head_mass: float = 0.8
    scene_prefix: str = "s"

    def validate(self) -> None:
        if self.n_entities < 2:
            raise ValueError("n_entities must be >= 2")
        if self.n_scenes < 0:
            raise ValueError("n_scenes must be >= 0")
        if not 2 <= self.min_participants <= self.max_participants <= self.n_entities:
            raise ValueError("need 2 <= min_participants <= max_participants <= n_entities")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ValueError("need 1 <= min_utterances <= max_utterances")
        if not 0 <= self.min_fillers <= self.max_fillers or self.filler_vocab < 1:
            raise ValueError("bad filler settings")
        for p in (self.p_first_person, self.p_second_person, self.p_name, self.p_two_token_name):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        if not 0 <= self.head_entities < self.n_entities or not 0.0 < self.head_mass < 1.0:
            raise ValueError("bad long-tail settings")

    def weights(self) -> np.ndarray:
        if self.head_entities == 0:
            return np.full(self.n_entities, 1.0 / self.n_entities)
        tail = self.n_entities - self.head_entities
        return np.array([self.head_mass / self.head_entities] * self.head_entities
                        + [(1.0 - self.head_mass) / tail] * tail)


def read_synth_config(path) -> SynthConfig:
    """Parse a flat ``key = value`` file into a :class:`SynthConfig`."""
    defaults = SynthConfig()
    values = {}
    for line_no, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError("expected key = value", line_no)
        key, value = (x.strip() for x in line.split("=", 1))
        if not hasattr(defaults, key):
            raise ParseError(f"unknown key {key!r}", line_no)
        kind = type(getattr(defaults, key))
        try:
            values[key] = kind(value)
        except ValueError:
            raise ParseError(f"bad value for {key}: {value!r}", line_no) from None
    cfg = SynthConfig(**values)
    cfg.validate()
    return cfg


def synth_corpus(config: SynthConfig, seed: int) -> Corpus:
    """Generate dialogue whose gold links follow fixed rules.

    "I" refers to the utterance's speaker, "you" to the previous
    utterance's speaker (consecutive speakers always differ) and each
    ``Name<i>`` token to entity ``i``; two-token names are ``Mr Name<i>``.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    w = config.weights()
    ent_ids = [str(100 + i) for i in range(config.n_entities)]
    scenes = []
    for s in range(config.n_scenes):
        n_part = int(rng.integers(config.min_participants, config.max_participants + 1))
        part = rng.choice(config.n_entities, size=n_part, replace=False, p=w)
        pw = w[part] / w[part].sum()
        scene = Scene(f"{config.scene_prefix}{s:04d}")
        prev = None
        for _ in range(int(rng.integers(config.min_utterances, config.max_utterances + 1))):
            if prev is None:
                spk = int(rng.choice(part, p=pw))
            else:
                others = part[part != prev]
                spk = int(rng.choice(others, p=pw[part != prev] / pw[part != prev].sum()))
            items = []
            if rng.random() < config.p_first_person:
                items.append([("I", ent_ids[spk], "PRP")])
            if prev is not None and rng.random() < config.p_second_person:
                items.append([("you", ent_ids[prev], "PRP")])
            if rng.random() < config.p_name:
                target = int(rng.choice(config.n_entities, p=w))
                name = [(f"Name{target}", ent_ids[target], "NNP")]
                if rng.random() < config.p_two_token_name:
                    name.insert(0, ("Mr", ent_ids[target], "NNP"))
                items.append(name)
            n_fill = int(rng.integers(config.min_fillers, config.max_fillers + 1))
            items.extend([[(f"w{int(rng.integers(config.filler_vocab))}", None, None)]
                          for _ in range(n_fill)])
            order = rng.permutation(len(items))
            tokens = []
            for k in order:
                group = items[k]
                for j, (surface, ent, tag) in enumerate(group):
                    mention = None
                    if ent is not None:
                        last = j == len(group) - 1
                        marker = "E" if last else ("B" if j == 0 else "I")
                        mention = Mention(ent, marker, last)
                    tokens.append(TokenRecord(surface, mention, tag))
            tokens.append(TokenRecord(".", None, None))
            scene.utterances.append(Utterance((f"Person{spk}",), tokens))
            prev = spk
        scenes.append(scene)
    # reparse so positions are filled in exactly as for files
    return parse_corpus_text(serialize_corpus(Corpus(scenes)))
