"""Tokenization and vocabulary construction.

Tokens are lowercase whitespace pieces with punctuation detached into
standalone tokens. Indices 0..3 are reserved (pad, unknown, start, end);
everything else is assigned by descending corpus frequency with ties broken
lexicographically, so rebuilding from the same corpus is reproducible.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, VocabularyError

PAD, UNK, SOS, EOS = 0, 1, 2, 3

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
SOS_TOKEN = "<sos>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "<sep>"  # joins dialogue turns inside one history sequence

RESERVED = (PAD_TOKEN, UNK_TOKEN, SOS_TOKEN, EOS_TOKEN)

_SPECIALS = frozenset(RESERVED) | {SEP_TOKEN}

# a word run, or any single non-space non-word character (punctuation)
_PIECE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, detach punctuation marks."""
    out: list[str] = []
    for chunk in text.lower().split():
        if chunk in _SPECIALS:
            out.append(chunk)
        else:
            out.extend(_PIECE.findall(chunk))
    return out


class Vocabulary:
    """Bidirectional token<->index map with fixed reserved slots."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:4]) != RESERVED:
            raise VocabularyError(f"first four entries must be {RESERVED}")
        self._tokens = list(tokens)
        self._index = {tok: i for i, tok in enumerate(self._tokens)}
        if len(self._index) != len(self._tokens):
            raise VocabularyError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        return self._index.get(token, UNK)

    def token(self, index: int) -> str:
        if not 0 <= index < len(self._tokens):
            raise VocabularyError(f"index {index} outside vocabulary of size {len(self)}")
        return self._tokens[index]

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.index(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> list[str]:
        toks = [self.token(int(i)) for i in ids]
        if strip_special:
            toks = [t for t in toks if t not in (PAD_TOKEN, SOS_TOKEN, EOS_TOKEN)]
        return toks

    @property
    def tokens(self) -> list[str]:
        return list(self._tokens)


def build_vocab(corpus: Iterable[Sequence[str]], min_count: int = 1) -> Vocabulary:
    """Assemble a vocabulary from tokenized sentences.

    Tokens seen fewer than ``min_count`` times are dropped (they will map to
    the unknown index). Order: reserved slots, then frequency descending,
    ties lexicographic.
    """
    counts: Counter[str] = Counter()
    sentences = 0
    for sent in corpus:
        sentences += 1
        counts.update(t for t in sent if t not in _SPECIALS or t == SEP_TOKEN)
    if sentences == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(RESERVED) + kept)
