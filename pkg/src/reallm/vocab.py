"""Label ids and the word vocabulary."""

from __future__ import annotations

from pathlib import Path

BLANK = 0
BOS = 1
EOS = 2
FIRST_WORD = 3
IGNORE = -1

SPECIAL_NAMES = {BLANK: "␣", BOS: "BOS", EOS: "EOS"}


class Vocabulary:
    """Maps word surface forms to label ids (words start at FIRST_WORD)."""

    def __init__(self, words):
        self.words = list(words)
        if len(set(self.words)) != len(self.words):
            raise ValueError("duplicate surface forms in vocabulary")
        self._ids = {w: FIRST_WORD + i for i, w in enumerate(self.words)}

    @classmethod
    def synthetic(cls, n_words: int) -> "Vocabulary":
        return cls(f"w{i:02d}" for i in range(n_words))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text().splitlines()
        return cls(line.strip() for line in lines if line.strip())

    def save(self, path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.words))

    def __len__(self) -> int:
        return len(self.words)

    @property
    def min_model_vocab(self) -> int:
        return FIRST_WORD + len(self.words)

    def id(self, token: str) -> int:
        if token in self._ids:
            return self._ids[token]
        if token.isdigit():
            tid = int(token)
            if FIRST_WORD <= tid < self.min_model_vocab:
                return tid
        raise KeyError(f"unknown word {token!r}")

    def name(self, tid: int) -> str:
        if tid in SPECIAL_NAMES:
            return SPECIAL_NAMES[tid]
        idx = tid - FIRST_WORD
        if 0 <= idx < len(self.words):
            return self.words[idx]
        return f"<{tid}>"
