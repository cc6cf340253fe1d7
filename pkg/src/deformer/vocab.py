"""Closed whitespace vocabulary with four reserved ids."""
from __future__ import annotations

from typing import Iterable, Sequence

PAD, CLS, SEP, UNK = 0, 1, 2, 3
RESERVED = ("[PAD]", "[CLS]", "[SEP]", "[UNK]")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = list(RESERVED) + list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def as_dict(self) -> dict[str, int]:
        return dict(self.stoi)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos[len(RESERVED):]) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.strip()])


def build_vocab(corpus: Iterable[str]) -> Vocab:
    """Sorted unique tokens after the reserved ids 0=PAD, 1=CLS, 2=SEP, 3=UNK."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    return Vocab(sorted(set(corpus) - set(RESERVED)))
