"""Tokenization, vocabulary management, dataset ingestion and synthetic data.

Tokenization is lowercase whitespace splitting. Every encoded sentence is
wrapped as [CLS] tokens... [SEP]; the special-token mask marks exactly the
CLS/SEP positions, which are never eligible for mixing.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2
SEP_ID = 3

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
CLS_TOKEN = "[CLS]"
SEP_TOKEN = "[SEP]"

RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN)


class DataError(Exception):
    """Malformed or inconsistent input data (files, rows, labels)."""


def tokenize(text: str) -> list[str]:
    """Lowercase whitespace tokenization."""
    return text.lower().split()


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token/id mapping with fixed reserved ids 0..3.

    Ids 0..3 are PAD, UNK, CLS, SEP; all other tokens occupy 4..size-1.
    """

    token_to_id: dict[str, int]
    id_to_token: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def save(self, path: str | Path) -> None:
        lines = [f"{tok}\t{i}" for i, tok in enumerate(self.id_to_token)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        token_to_id: dict[str, int] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            try:
                tok, idx = line.split("\t")
            except ValueError:
                raise DataError(f"vocab file {path}, line {lineno}: expected token<TAB>id")
            token_to_id[tok] = int(idx)
        id_to_token = tuple(tok for tok, _ in sorted(token_to_id.items(), key=lambda kv: kv[1]))
        if id_to_token[:4] != RESERVED_TOKENS:
            raise DataError(f"vocab file {path}: reserved tokens missing or misplaced")
        return cls(token_to_id=token_to_id, id_to_token=id_to_token)


def build_vocab(texts: list[str], min_count: int = 1) -> Vocabulary:
    """Build a vocabulary from raw texts.

    Tokens occurring at least `min_count` times get ids in first-appearance
    order; everything else maps to UNK at encode time.
    """
    if not texts:
        raise DataError("cannot build a vocabulary from an empty corpus")
    counts: Counter[str] = Counter()
    order: list[str] = []
    seen: set[str] = set()
    for text in texts:
        for tok in tokenize(text):
            counts[tok] += 1
            if tok not in seen:
                seen.add(tok)
                order.append(tok)
    kept = [tok for tok in order if counts[tok] >= min_count]
    id_to_token = RESERVED_TOKENS + tuple(kept)
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token)


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus a same-length special-token mask (True = CLS/SEP)."""

    ids: tuple[int, ...]
    special_mask: tuple[bool, ...]

    def __post_init__(self) -> None:
        if len(self.ids) != len(self.special_mask):
            raise ValueError("ids and special_mask must have equal length")

    @property
    def content_length(self) -> int:
        return sum(1 for m in self.special_mask if not m)

    def content_positions(self) -> list[int]:
        return [i for i, m in enumerate(self.special_mask) if not m]

    def ids_array(self) -> np.ndarray:
        arr = self.__dict__.get("_ids_array")
        if arr is None:
            arr = np.asarray(self.ids, dtype=np.int64)
            self.__dict__["_ids_array"] = arr
        return arr


def encode(vocab: Vocabulary, text: str, max_len: int = 128) -> TokenSequence:
    """Encode raw text as [CLS] w1 ... wn [SEP], truncating the suffix.

    Content is truncated so the total length (specials included) does not
    exceed `max_len`. Out-of-vocabulary words map to UNK. Text that is empty
    after tokenization is rejected: every sequence must carry at least one
    content token.
    """
    if max_len < 3:
        raise ValueError("max_len must be at least 3 (CLS + one token + SEP)")
    words = tokenize(text)
    if not words:
        raise DataError(f"text encodes to zero content tokens: {text!r}")
    words = words[: max_len - 2]
    ids = (CLS_ID,) + tuple(vocab.lookup(w) for w in words) + (SEP_ID,)
    mask = (True,) + (False,) * len(words) + (True,)
    return TokenSequence(ids=ids, special_mask=mask)


def decode(vocab: Vocabulary, seq: TokenSequence) -> str:
    """Inverse of encode up to whitespace normalization; drops PAD/CLS/SEP."""
    words = [
        vocab.token(i)
        for i in seq.ids
        if i not in (PAD_ID, CLS_ID, SEP_ID)
    ]
    return " ".join(words)


@dataclass(frozen=True)
class LabeledExample:
    """One sentence (or a sentence pair) with a class index."""

    first: TokenSequence
    second: TokenSequence | None
    label: int

    @property
    def is_paired(self) -> bool:
        return self.second is not None

    def sentences(self) -> tuple[TokenSequence, ...]:
        if self.second is None:
            return (self.first,)
        return (self.first, self.second)


@dataclass
class Dataset:
    """A list of uniformly single or paired examples plus label metadata."""

    examples: list[LabeledExample]
    num_classes: int
    is_paired: bool
    split: str
    label_names: tuple[str, ...]
    vocab: Vocabulary | None = None

    def __post_init__(self) -> None:
        if not self.examples:
            raise DataError(f"dataset split {self.split!r} is empty")
        for ex in self.examples:
            if ex.label >= self.num_classes:
                raise DataError(
                    f"label index {ex.label} out of range for {self.num_classes} classes"
                )
            if ex.is_paired != self.is_paired:
                raise DataError("mixed single and paired examples in one dataset")

    def __len__(self) -> int:
        return len(self.examples)


# ---------------------------------------------------------------------------
# File ingestion
# ---------------------------------------------------------------------------

Row = tuple[tuple[str, ...], str]  # (texts, raw label)


def read_rows(path: str | Path, fmt: str, schema: str) -> list[Row]:
    """Read raw (texts, label) rows from a TSV or JSONL file.

    TSV rows are `text<TAB>label` or `text1<TAB>text2<TAB>label` with no
    header; JSONL objects carry `text` (or `text1`/`text2`) and `label`.
    Errors name the offending row.
    """
    if fmt not in ("tsv", "jsonl"):
        raise ValueError(f"unknown format {fmt!r}; expected tsv or jsonl")
    if schema not in ("single", "paired"):
        raise ValueError(f"unknown schema {schema!r}; expected single or paired")
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    want = 2 if schema == "single" else 3
    rows: list[Row] = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if fmt == "tsv":
            parts = line.split("\t")
            if len(parts) != want:
                raise DataError(
                    f"{path}, row {lineno}: expected {want} tab-separated fields, got {len(parts)}"
                )
            texts, label = tuple(parts[:-1]), parts[-1]
        else:
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}, row {lineno}: invalid JSON ({exc})")
            try:
                if schema == "single":
                    texts = (obj["text"],)
                else:
                    texts = (obj["text1"], obj["text2"])
                label = obj["label"]
            except KeyError as exc:
                raise DataError(f"{path}, row {lineno}: missing field {exc}")
        rows.append((texts, str(label)))
    if not rows:
        raise DataError(f"{path}: no data rows")
    return rows


def rows_to_dataset(
    rows: list[Row],
    vocab: Vocabulary,
    schema: str,
    split: str,
    label_map: dict[str, int] | None = None,
    max_len: int = 128,
) -> tuple[Dataset, dict[str, int]]:
    """Encode raw rows into a Dataset, assigning or applying a label map.

    Without a label map, labels get contiguous indices in first-seen order
    (the train-split convention); with one, an unseen label is an error that
    names the row.
    """
    assign = label_map is None
    mapping: dict[str, int] = {} if assign else dict(label_map)
    examples: list[LabeledExample] = []
    for rowno, (texts, label) in enumerate(rows, 1):
        if label not in mapping:
            if not assign:
                raise DataError(f"row {rowno}: label {label!r} not in the label map")
            mapping[label] = len(mapping)
        seqs = [encode(vocab, t, max_len) for t in texts]
        second = seqs[1] if schema == "paired" else None
        examples.append(LabeledExample(first=seqs[0], second=second, label=mapping[label]))
    names = tuple(lbl for lbl, _ in sorted(mapping.items(), key=lambda kv: kv[1]))
    ds = Dataset(
        examples=examples,
        num_classes=len(mapping),
        is_paired=(schema == "paired"),
        split=split,
        label_names=names,
        vocab=vocab,
    )
    return ds, mapping


def load_dataset(
    path: str | Path,
    fmt: str,
    schema: str,
    vocab: Vocabulary | None = None,
    label_map: dict[str, int] | None = None,
    max_len: int = 128,
    split: str = "train",
) -> tuple[Dataset, dict[str, int]]:
    """Load a TSV/JSONL file into a Dataset.

    When no vocabulary is given one is built from this file's texts
    (min_count 1), which is the train-split convention; evaluation splits
    should pass the training vocabulary and label map.
    """
    rows = read_rows(path, fmt, schema)
    if vocab is None:
        vocab = build_vocab([t for texts, _ in rows for t in texts], min_count=1)
    return rows_to_dataset(rows, vocab, schema, split, label_map=label_map, max_len=max_len)


def save_label_map(label_map: dict[str, int], path: str | Path) -> None:
    lines = [f"{lbl}\t{idx}" for lbl, idx in sorted(label_map.items(), key=lambda kv: kv[1])]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_label_map(path: str | Path) -> dict[str, int]:
    mapping: dict[str, int] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            lbl, idx = line.rsplit("\t", 1)
            mapping[lbl] = int(idx)
        except ValueError:
            raise DataError(f"label map {path}, line {lineno}: expected label<TAB>index")
    return mapping


# ---------------------------------------------------------------------------
# Synthetic datasets
# ---------------------------------------------------------------------------

KEYWORDS_PER_CLASS = 6
NOISE_WORDS = 20
MIN_SENTENCE_LEN = 6
MAX_SENTENCE_LEN = 12


def class_keywords(num_classes: int) -> list[list[str]]:
    """Disjoint per-class keyword sets used by the synthetic generator."""
    return [
        [f"key{c}{chr(ord('a') + j)}" for j in range(KEYWORDS_PER_CLASS)]
        for c in range(num_classes)
    ]


def noise_words() -> list[str]:
    return [f"filler{i:02d}" for i in range(NOISE_WORDS)]


def _sentence(rng: np.random.Generator, keywords: list[str], noise: list[str]) -> str:
    n = int(rng.integers(MIN_SENTENCE_LEN, MAX_SENTENCE_LEN + 1))
    k = int(rng.integers(2, 5))  # 2..4 class keywords per sentence
    picks = rng.choice(len(keywords), size=k, replace=False)
    words = [keywords[i] for i in picks]
    words += [noise[int(rng.integers(len(noise)))] for _ in range(n - k)]
    rng.shuffle(words)
    return " ".join(words)


def synthetic_rows(
    task: str, num_classes: int, n_train: int, n_valid: int, seed: int
) -> tuple[list[Row], list[Row]]:
    """Generate raw (texts, label) rows for the synthetic tasks.

    Single task: sentences of 6..12 tokens mixing at least two keywords of
    the owning class with shared noise words; classes assigned round-robin so
    counts stay balanced. Paired task: the label is "match" exactly when the
    two sentences draw keywords from the same class, alternating match and
    mismatch rows. Fully determined by the seed.
    """
    if task not in ("single", "paired"):
        raise ValueError(f"unknown task {task!r}; expected single or paired")
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if n_train < num_classes or n_valid < num_classes:
        raise ValueError("split sizes must be at least num_classes")
    rng = np.random.default_rng(seed)
    keywords = class_keywords(num_classes)
    noise = noise_words()

    def make(n: int, offset: int) -> list[Row]:
        rows: list[Row] = []
        for i in range(n):
            if task == "single":
                c = (offset + i) % num_classes
                rows.append(((_sentence(rng, keywords[c], noise),), f"class{c}"))
            else:
                match = (offset + i) % 2 == 0
                c1 = int(rng.integers(num_classes))
                if match:
                    c2 = c1
                else:
                    c2 = (c1 + 1 + int(rng.integers(num_classes - 1))) % num_classes
                texts = (
                    _sentence(rng, keywords[c1], noise),
                    _sentence(rng, keywords[c2], noise),
                )
                rows.append((texts, "match" if match else "mismatch"))
        return rows
    return make(n_train, 0), make(n_valid, 0)


def generate_synthetic(
    task: str,
    num_classes: int,
    n_train: int,
    n_valid: int,
    seed: int,
    max_len: int = 128,
) -> tuple[Dataset, Dataset]:
    """Generate encoded train/valid splits for a synthetic task.

    The vocabulary is built from the train split (min_count 1) and attached
    to both datasets.
    """
    train_rows, valid_rows = synthetic_rows(task, num_classes, n_train, n_valid, seed)
    vocab = build_vocab([t for texts, _ in train_rows for t in texts], min_count=1)
    schema = "single" if task == "single" else "paired"
    train, label_map = rows_to_dataset(train_rows, vocab, schema, "train", max_len=max_len)
    valid, _ = rows_to_dataset(
        valid_rows, vocab, schema, "valid", label_map=label_map, max_len=max_len
    )
    return train, valid
