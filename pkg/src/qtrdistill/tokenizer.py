"""Vocabulary, greedy longest-match WordPiece, and query-title input assembly."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
RESERVED = (PAD, UNK, CLS, SEP, MASK)

MAX_LEN = 23


class EmptyInputError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class VocabMismatchError(ValueError):
    pass


class Vocab:
    """Dense token <-> id map with the reserved tokens at ids 0..4."""

    def __init__(self, tokens: Iterable[str], prefix: str = "##"):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            tokens = list(RESERVED) + [t for t in tokens if t not in RESERVED]
        self.tokens: list[str] = []
        self.ids: dict[str, int] = {}
        for t in tokens:
            if t in self.ids:
                raise ValueError(f"duplicate vocabulary entry {t!r}")
            self.ids[t] = len(self.tokens)
            self.tokens.append(t)
        self.prefix = prefix

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token: str):
        return token in self.ids

    def id(self, token: str) -> int:
        return self.ids.get(token, self.ids[UNK])

    @property
    def pad_id(self):
        return self.ids[PAD]

    @property
    def cls_id(self):
        return self.ids[CLS]

    @property
    def sep_id(self):
        return self.ids[SEP]

    def fingerprint(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()

    def save(self, path):
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise VocabMismatchError(f"{path}: reserved tokens must come first in order {RESERVED}")
        return cls(lines)


def wordpiece_tokenize(text: str, vocab: Vocab, max_chars_per_word: int = 100) -> list[str]:
    """Lowercase, split on whitespace, then greedy longest-match per word.

    A word that cannot be fully segmented becomes ``[UNK]``. Reserved tokens
    written literally (e.g. ``[MASK]``) pass through unchanged.
    """
    words = text.split()
    if not words:
        raise EmptyInputError("empty text after normalization")
    out: list[str] = []
    for word in words:
        if word in RESERVED:
            out.append(word)
            continue
        word = word.lower()
        if len(word) > max_chars_per_word:
            out.append(UNK)
            continue
        pieces = []
        start = 0
        while start < len(word):
            end = len(word)
            piece = None
            while start < end:
                cand = word[start:end] if start == 0 else vocab.prefix + word[start:end]
                if cand in vocab.ids:
                    piece = cand
                    break
                end -= 1
            if piece is None:
                pieces = None
                break
            pieces.append(piece)
            start = end
        out.extend(pieces if pieces is not None else [UNK])
    return out


def detokenize(tokens: Sequence[str], prefix: str = "##") -> str:
    words: list[str] = []
    for tok in tokens:
        if tok.startswith(prefix) and words:
            words[-1] += tok[len(prefix):]
        else:
            words.append(tok)
    return " ".join(words)


@dataclass
class TokenSequence:
    ids: list[int]
    segments: list[int]
    query_len: int = 0
    title_len: int = 0

    @property
    def length(self) -> int:
        return len(self.ids)


def prune_lengths(n_query: int, n_title: int, max_len: int = MAX_LEN) -> tuple[int, int]:
    """Token counts kept after trailing-token pruning of the longer side (ties prune the title)."""
    while n_query + n_title + 3 > max_len:
        if n_query > n_title:
            n_query -= 1
        else:
            n_title -= 1
    return n_query, n_title


def assemble_input(query_tokens: Sequence[str], title_tokens: Sequence[str], vocab: Vocab,
                   max_len: int = MAX_LEN) -> TokenSequence:
    if not query_tokens or not title_tokens:
        raise DegenerateInputError("query and title must each have at least one token")
    nq, nt = prune_lengths(len(query_tokens), len(title_tokens), max_len)
    q = [vocab.id(t) for t in query_tokens[:nq]]
    t = [vocab.id(x) for x in title_tokens[:nt]]
    ids = [vocab.cls_id] + q + [vocab.sep_id] + t + [vocab.sep_id]
    segments = [0] * (nq + 2) + [1] * (nt + 1)
    return TokenSequence(ids, segments, nq, nt)


def encode_pair(query: str, title: str, vocab: Vocab) -> TokenSequence:
    return assemble_input(wordpiece_tokenize(query, vocab), wordpiece_tokenize(title, vocab), vocab)


@dataclass
class Batch:
    """Padded id/segment matrices plus true lengths, ready for a forward pass."""

    ids: np.ndarray
    segments: np.ndarray
    lengths: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.lengths)


def pad_batch(seqs: Sequence[TokenSequence], pad_id: int = 0, pad_to: int | None = None) -> Batch:
    T = max(s.length for s in seqs)
    if pad_to is not None:
        T = max(T, pad_to)
    ids = np.full((len(seqs), T), pad_id, dtype=np.int64)
    segs = np.zeros((len(seqs), T), dtype=np.int64)
    lengths = np.empty(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : s.length] = s.ids
        segs[i, : s.length] = s.segments
        lengths[i] = s.length
    return Batch(ids, segs, lengths)
