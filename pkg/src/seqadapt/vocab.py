from __future__ import annotations

import hashlib
from typing import Iterable, Sequence

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>")


class Vocab:
    """Token <-> id bijection. Ids 0..3 are always PAD, BOS, EOS, UNK."""

    def __init__(self, words: Iterable[str] = ()):
        self.tokens: list[str] = list(RESERVED)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word in self.index:
            return self.index[word]
        if not word or any(c.isspace() for c in word):
            raise ValueError(f"invalid token {word!r}")
        self.index[word] = len(self.tokens)
        self.tokens.append(word)
        return self.index[word]

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def encode(self, words: Sequence[str]) -> list[int]:
        """Words (no markers) -> BOS ... EOS id sequence."""
        return [BOS] + [self.id(w) for w in words] + [EOS]

    def decode(self, ids: Sequence[int]) -> list[str]:
        """Ids -> words with BOS/EOS/PAD stripped; stops at the first EOS."""
        out = []
        for i in ids:
            if i == EOS:
                break
            if i in (BOS, PAD):
                continue
            out.append(self.tokens[i])
        return out

    def words(self) -> list[str]:
        return self.tokens[len(RESERVED):]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]
