"""Corpus pipeline: tokenization, capped vocabularies, id streams, batching.

File conventions:
  corpus   - UTF-8 text, one sentence per line, whitespace-tokenized; a line
             that is exactly `<doc>` marks an article boundary and is never
             emitted as a token.
  vocab    - one token per line in id order; line 0 is `<unk>`, line 1 `<num>`.
  encoded  - binary: magic `MLMC`, u32 version, u64 token count, u32 LE ids,
             u64 boundary count, u64 LE boundary offsets.
"""

from __future__ import annotations

import re
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

UNK_TOKEN = "<unk>"
NUM_TOKEN = "<num>"
DOC_SEPARATOR = "<doc>"
BLANK_MARKER = "_____"
CLOZE_CATEGORIES = ("named-entity", "common-noun", "verb", "preposition")

CORPUS_MAGIC = b"MLMC"
CORPUS_VERSION = 1

# A token is numeric iff it is entirely digits with optional sign, optional
# comma grouping, and at most one decimal point (covers 1984, 12,500, -3.5, .75).
_NUMBER_RE = re.compile(r"^[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d*)?$|^[+-]?\.\d+$")


def tokenize(text: str) -> list[str]:
    """Whitespace-split tokens with numeric literals mapped to the number symbol."""
    return [NUM_TOKEN if _NUMBER_RE.match(tok) else tok for tok in text.split()]


def read_corpus_text(text: str) -> tuple[list[str], list[int]]:
    """Token stream plus article-start positions from raw corpus text."""
    tokens: list[str] = []
    boundaries = [0]
    for line in text.splitlines():
        if line.strip() == DOC_SEPARATOR:
            if boundaries[-1] != len(tokens):
                boundaries.append(len(tokens))
            continue
        tokens.extend(tokenize(line))
    if boundaries[-1] == len(tokens) and len(boundaries) > 1:
        boundaries.pop()  # trailing separator starts no article
    return tokens, boundaries


def read_corpus_file(path) -> tuple[list[str], list[int]]:
    try:
        with open(path, encoding="utf-8") as fh:
            return read_corpus_text(fh.read())
    except OSError as exc:
        raise DataError(f"cannot read corpus file {path}: {exc}") from exc


class Vocabulary:
    """Bidirectional token/id map with a frequency cap.

    Ids 0 and 1 are reserved for the UNK and number symbols; the cap applies
    to the remaining tokens, kept by descending training frequency with ties
    broken by first occurrence.
    """

    def __init__(self, id_to_token: list[str], frequencies: dict[str, int] | None = None,
                 cap: int | None = None):
        if id_to_token[:2] != [UNK_TOKEN, NUM_TOKEN]:
            raise DataError("vocabulary must start with the UNK and number symbols")
        self.id_to_token = list(id_to_token)
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary contains duplicate tokens")
        self.frequencies = dict(frequencies or {})
        self.cap = cap if cap is not None else len(self.id_to_token) - 2
        self.unk_id = 0
        self.num_id = 1

    def __len__(self):
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def coverage(self, tokens) -> float:
        """Fraction of tokens that encode to something other than UNK."""
        total = 0
        kept = 0
        for tok in tokens:
            total += 1
            if tok in self.token_to_id:
                kept += 1
        return kept / total if total else 1.0

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                tokens = [line.rstrip("\n") for line in fh if line.rstrip("\n")]
        except OSError as exc:
            raise DataError(f"cannot read vocabulary file {path}: {exc}") from exc
        return cls(tokens)


def build_vocabulary(tokens, cap: int) -> Vocabulary:
    if cap < 1:
        raise DataError(f"vocabulary cap must be >= 1, got {cap}")
    counts = Counter()
    first_seen: dict[str, int] = {}
    for pos, tok in enumerate(tokens):
        counts[tok] += 1
        if tok not in first_seen:
            first_seen[tok] = pos
    candidates = [t for t in counts if t not in (UNK_TOKEN, NUM_TOKEN)]
    candidates.sort(key=lambda t: (-counts[t], first_seen[t]))
    retained = candidates[:cap]
    id_to_token = [UNK_TOKEN, NUM_TOKEN] + retained
    freqs = {t: counts[t] for t in id_to_token if t in counts}
    return Vocabulary(id_to_token, freqs, cap)


@dataclass
class EncodedCorpus:
    """Immutable id stream with article-start offsets."""
    ids: np.ndarray
    boundaries: np.ndarray
    split: str = ""

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.int32)
        self.boundaries = np.ascontiguousarray(self.boundaries, dtype=np.int64)
        if len(self.boundaries) == 0 or self.boundaries[0] != 0:
            raise DataError("first article boundary must be position 0")
        if np.any(np.diff(self.boundaries) <= 0):
            raise DataError("article boundaries must be strictly increasing")
        if len(self.ids) and self.boundaries[-1] >= len(self.ids):
            raise DataError("article boundary beyond end of corpus")

    def __len__(self):
        return len(self.ids)

    def articles(self):
        """Yield the id array of each article, in corpus order."""
        starts = list(self.boundaries) + [len(self.ids)]
        for a, b in zip(starts, starts[1:]):
            yield self.ids[a:b]


def encode(tokens, vocab: Vocabulary, boundaries=None, split: str = "") -> EncodedCorpus:
    ids = np.fromiter((vocab.id_of(t) for t in tokens), dtype=np.int32, count=len(tokens))
    if boundaries is None:
        boundaries = [0]
    return EncodedCorpus(ids, np.asarray(boundaries, dtype=np.int64), split)


def decode(ids, vocab: Vocabulary) -> list[str]:
    return [vocab.id_to_token[int(i)] for i in ids]


@dataclass
class Batch:
    """One truncated-BPTT window over `batch` parallel streams."""
    inputs: np.ndarray    # (batch, width) input ids
    targets: np.ndarray   # (batch, width) next-token ids
    resets: np.ndarray    # (batch, width) article-start flags for the input position


def batchify(corpus: EncodedCorpus, batch_size: int, unroll: int) -> list[Batch]:
    """Split the corpus into contiguous streams and cut unroll windows.

    Stream b owns ids[b*S:(b+1)*S] with S = len//batch_size; window t covers
    input positions [t*unroll, ...) of every stream with next-token targets.
    The final window may be narrower; the inter-stream tail is dropped.
    A reset flag marks input positions where an article starts, so hidden
    state and sliding memory are cleared before consuming them.
    """
    if batch_size < 1 or unroll < 1:
        raise DataError("batch_size and unroll must be >= 1")
    n = len(corpus.ids)
    if n < batch_size * (unroll + 1):
        raise DataError(
            f"corpus of {n} tokens is too short for batch_size={batch_size}, "
            f"unroll={unroll} (needs at least {batch_size * (unroll + 1)})")
    stream_len = n // batch_size
    streams = corpus.ids[:batch_size * stream_len].reshape(batch_size, stream_len)

    # Reset positions map one-to-one onto boundaries inside a stream; streams
    # additionally start from zero state, which the trainer provides itself.
    reset_grid = np.zeros((batch_size, stream_len), dtype=bool)
    for g in corpus.boundaries:
        b, q = divmod(int(g), stream_len)
        if b < batch_size:
            reset_grid[b, q] = True

    batches = []
    steps = stream_len - 1
    for start in range(0, steps, unroll):
        stop = min(start + unroll, steps)
        batches.append(Batch(
            inputs=np.ascontiguousarray(streams[:, start:stop]),
            targets=np.ascontiguousarray(streams[:, start + 1:stop + 1]),
            resets=np.ascontiguousarray(reset_grid[:, start:stop]),
        ))
    return batches


# ---------------------------------------------------------------------------
# binary encoded-corpus files


def save_encoded(corpus: EncodedCorpus, path):
    with open(path, "wb") as fh:
        fh.write(CORPUS_MAGIC)
        fh.write(struct.pack("<I", CORPUS_VERSION))
        fh.write(struct.pack("<Q", len(corpus.ids)))
        fh.write(corpus.ids.astype("<i4").tobytes())
        fh.write(struct.pack("<Q", len(corpus.boundaries)))
        fh.write(corpus.boundaries.astype("<u8").tobytes())


def load_encoded(path, split: str = "") -> EncodedCorpus:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read encoded corpus {path}: {exc}") from exc
    if blob[:4] != CORPUS_MAGIC:
        raise DataError(f"{path} is not an encoded corpus file")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CORPUS_VERSION:
        raise DataError(f"unsupported corpus format version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    ids = np.frombuffer(blob, dtype="<i4", count=count, offset=off).astype(np.int32)
    off += 4 * count
    (bcount,) = struct.unpack_from("<Q", blob, off)
    off += 8
    bounds = np.frombuffer(blob, dtype="<u8", count=bcount, offset=off).astype(np.int64)
    return EncodedCorpus(ids, bounds, split)


# ---------------------------------------------------------------------------
# cloze instances


@dataclass
class ClozeInstance:
    context_ids: np.ndarray
    query_ids: np.ndarray
    blank_pos: int
    candidates: list[int]
    candidate_tokens: list[str]
    answer: int
    category: str
    line: int = field(default=0)


def load_cloze(path, vocab: Vocabulary) -> list[ClozeInstance]:
    """Parse blocks of 20 context lines plus one tab-separated query line."""
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read cloze file {path}: {exc}") from exc

    instances = []
    block: list[tuple[int, str]] = []
    for lineno, raw in enumerate(lines + [""], start=1):
        if raw.strip():
            block.append((lineno, raw))
            continue
        if block:
            instances.append(_parse_cloze_block(block, vocab))
            block = []
    return instances


def _parse_cloze_block(block, vocab) -> ClozeInstance:
    first_line = block[0][0]
    if len(block) != 21:
        raise DataError(
            f"cloze block at line {first_line}: expected 21 non-empty lines, got {len(block)}")
    context_tokens: list[str] = []
    for _, text in block[:20]:
        context_tokens.extend(tokenize(text))

    qline_no, qraw = block[20]
    fields = qraw.split("\t")
    if len(fields) != 4:
        raise DataError(
            f"cloze query at line {qline_no}: expected query, category, answer, "
            f"candidates separated by tabs, got {len(fields)} fields")
    query_text, category, answer_token, cand_field = fields
    query_tokens = tokenize(query_text)
    blanks = [i for i, t in enumerate(query_tokens) if t == BLANK_MARKER]
    if len(blanks) != 1:
        raise DataError(f"cloze query at line {qline_no}: expected exactly one "
                        f"{BLANK_MARKER} blank, found {len(blanks)}")
    if category not in CLOZE_CATEGORIES:
        raise DataError(f"cloze query at line {qline_no}: unknown category {category!r}")
    cand_tokens = cand_field.split("|")
    if len(cand_tokens) != 10:
        raise DataError(f"cloze query at line {qline_no}: expected 10 candidates, "
                        f"got {len(cand_tokens)}")
    if len(set(cand_tokens)) != 10:
        raise DataError(f"cloze query at line {qline_no}: candidates must be distinct")
    if answer_token not in cand_tokens:
        raise DataError(f"cloze query at line {qline_no}: answer {answer_token!r} "
                        f"not among candidates")

    return ClozeInstance(
        context_ids=np.asarray([vocab.id_of(t) for t in context_tokens], dtype=np.int32),
        query_ids=np.asarray([vocab.id_of(t) if t != BLANK_MARKER else -1
                              for t in query_tokens], dtype=np.int32),
        blank_pos=blanks[0],
        candidates=[vocab.id_of(t) for t in cand_tokens],
        candidate_tokens=cand_tokens,
        answer=cand_tokens.index(answer_token),
        category=category,
        line=first_line,
    )
