"""Symbol/id vocabularies for the synthetic tasks."""

from __future__ import annotations

import string

import numpy as np

from .errors import VocabularyError

PAD = "[PAD]"
EOS = "[EOS]"
COMMA = ","
ROOT = "[ROOT]"
TARGET = "[TARGET]"
ROUTE = "[ROUTE]"


class Vocabulary:
    """Bijective symbol <-> id map with named reserved tokens."""

    def __init__(self, symbols, specials: dict):
        self.symbols = list(symbols)
        if len(set(self.symbols)) != len(self.symbols):
            raise VocabularyError("duplicate symbols in vocabulary")
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        self.specials = dict(specials)
        for role, sym in self.specials.items():
            if self.symbols.count(sym) != 1:
                raise VocabularyError(
                    f"reserved token {sym!r} ({role}) must appear exactly once"
                )

    def __len__(self):
        return len(self.symbols)

    def id(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise VocabularyError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.symbols):
            raise VocabularyError(f"token id {token_id} outside vocabulary")
        return self.symbols[token_id]

    def special_id(self, role: str) -> int:
        return self.id(self.specials[role])

    def encode(self, symbols) -> np.ndarray:
        return np.array([self.id(s) for s in symbols], dtype=np.int64)

    def decode(self, ids) -> list:
        return [self.symbol(int(i)) for i in ids]


# single-character node names; uppercase first so shallow trees match the
# classic surface form, lowercase extends the pool for 31-node trees
NAME_POOL = tuple(string.ascii_uppercase + string.ascii_lowercase)


def tree_vocabulary() -> Vocabulary:
    symbols = [PAD, EOS, COMMA, ROOT, TARGET, ROUTE] + list(NAME_POOL)
    specials = {
        "pad": PAD,
        "eos": EOS,
        "comma": COMMA,
        "root": ROOT,
        "target": TARGET,
        "route": ROUTE,
    }
    return Vocabulary(symbols, specials)


def cfg_vocabulary(terminals) -> Vocabulary:
    """Terminals are rendered as their decimal symbol ids."""
    symbols = [PAD, EOS] + [str(int(t)) for t in terminals]
    return Vocabulary(symbols, {"pad": PAD, "eos": EOS})
