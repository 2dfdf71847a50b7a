"""Tokenization, vocabularies, fixed-length encoding and n-gram features."""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
GRANULARITIES = ("word", "char")
DEFAULT_FIXED_LENGTH = 64

_JOINERS = frozenset("'’-")


def _is_punct(ch: str) -> bool:
    cat = unicodedata.category(ch)
    # connector punctuation (underscore) counts as part of a word
    return cat.startswith("P") and cat != "Pc"


def _is_wordish(ch: str) -> bool:
    return not ch.isspace() and not _is_punct(ch)


def _clean_word(piece: str) -> str:
    out = []
    for i, ch in enumerate(piece):
        if not _is_punct(ch):
            out.append(ch)
        elif ch in _JOINERS and 0 < i < len(piece) - 1:
            if _is_wordish(piece[i - 1]) and _is_wordish(piece[i + 1]):
                out.append(ch)
    return "".join(out)


def tokenize(s: str, granularity: str = "word") -> list[str]:
    """Lowercased word or character tokens.

    Word mode splits on whitespace and drops punctuation, keeping apostrophes
    and hyphens between word characters. Char mode keeps every character of
    the lowercased string, spaces included.
    """
    s = s.lower()
    if granularity == "char":
        return list(s)
    if granularity != "word":
        raise ValueError(f"unknown granularity {granularity!r}")
    return [t for t in (_clean_word(p) for p in s.split()) if t]


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    granularity: str = "word"
    min_count: int = 1
    max_size: int | None = None
    index: Mapping[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD_TOKEN, UNK_TOKEN):
            raise ValueError("vocabulary must start with the PAD and UNK entries")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate vocabulary entries")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)


def build_vocab(
    corpus: Iterable[Sequence[str]],
    min_count: int = 1,
    max_size: int | None = None,
    granularity: str = "word",
) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if max_size is not None and max_size < 2:
        raise ValueError("max_size must leave room for PAD and UNK")
    counts = Counter(t for doc in corpus for t in doc)
    counts.pop(PAD_TOKEN, None)
    counts.pop(UNK_TOKEN, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max_size - 2]
    return Vocabulary((PAD_TOKEN, UNK_TOKEN, *kept), granularity, min_count, max_size)


def _escape(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n").replace("\r", "\\r")


def _unescape(text: str) -> str:
    out, i = [], 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(text[i + 1], text[i + 1]))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def format_vocab(vocab: Vocabulary) -> str:
    header = (
        f"# granularity={vocab.granularity} min_count={vocab.min_count} "
        f"max_size={vocab.max_size if vocab.max_size is not None else 'none'}"
    )
    return "\n".join([header] + [f"{_escape(t)}\t{i}" for i, t in enumerate(vocab.tokens)]) + "\n"


def parse_vocab(text: str) -> Vocabulary:
    lines = text.split("\n")
    if not lines or not lines[0].startswith("# "):
        raise ValueError("vocabulary file is missing its header comment")
    meta = dict(kv.split("=", 1) for kv in lines[0][2:].split() if "=" in kv)
    tokens: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line:
            continue
        tok, _, idx = line.rpartition("\t")
        if not _ or int(idx) != len(tokens):
            raise ValueError(f"line {lineno}: expected '<token>\\t{len(tokens)}'")
        tokens.append(_unescape(tok))
    max_size = meta.get("max_size", "none")
    return Vocabulary(
        tuple(tokens),
        meta.get("granularity", "word"),
        int(meta.get("min_count", 1)),
        None if max_size == "none" else int(max_size),
    )


def save_vocab(vocab: Vocabulary, path: str | Path) -> None:
    Path(path).write_text(format_vocab(vocab), encoding="utf-8")


def load_vocab(path: str | Path) -> Vocabulary:
    return parse_vocab(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class EncodedText:
    ids: np.ndarray
    true_length: int


def encode_fixed(tokens: Sequence[str], vocab: Vocabulary, length: int = DEFAULT_FIXED_LENGTH) -> EncodedText:
    """Keep the first ``length`` token ids and right-pad with PAD."""
    if length < 1:
        raise ValueError("length must be >= 1")
    ids = np.full(length, PAD, dtype=np.int64)
    kept = [vocab.id(t) for t in tokens[:length]]
    ids[: len(kept)] = kept
    return EncodedText(ids, len(kept))


# ---------------------------------------------------------------------------
# sparse n-grams


def ngrams(tokens: Sequence[str], n_range: tuple[int, int], granularity: str = "word") -> list[str]:
    lo, hi = n_range
    if not 1 <= lo <= hi:
        raise ValueError("need 1 <= lo <= hi")
    if not tokens:
        return []
    seq = ["^", *tokens, "$"] if granularity == "char" else list(tokens)
    sep = "" if granularity == "char" else " "
    return [sep.join(seq[i : i + n]) for n in range(lo, hi + 1) for i in range(len(seq) - n + 1)]


def ngram_features(
    tokens: Sequence[str],
    n_range: tuple[int, int] = (1, 1),
    vocab_ngram: Mapping[str, int] | None = None,
    idf: Mapping | None = None,
    granularity: str = "word",
) -> dict:
    """n-gram counts (times idf when given).

    Keys are n-gram strings, or feature ids when ``vocab_ngram`` is given;
    n-grams missing from ``vocab_ngram`` are dropped.
    """
    counts = Counter(ngrams(tokens, n_range, granularity))
    feats: dict = {}
    for gram, c in counts.items():
        key = gram if vocab_ngram is None else vocab_ngram.get(gram)
        if key is None:
            continue
        weight = float(c)
        if idf is not None:
            weight *= idf.get(key, 1.0)
        feats[key] = feats.get(key, 0.0) + weight
    return feats


def compute_idf(documents: Sequence[Sequence[str]], n_range=(1, 1), granularity: str = "word") -> dict[str, float]:
    """Smoothed idf: ln((1 + N) / (1 + df)) + 1."""
    df: Counter = Counter()
    for doc in documents:
        df.update(set(ngrams(doc, n_range, granularity)))
    n = len(documents)
    return {g: math.log((1 + n) / (1 + d)) + 1.0 for g, d in df.items()}
