"""Word-level vocabulary and tokenization with the segment-marker inventory."""
from __future__ import annotations

import re
from collections import Counter
from pathlib import Path
from typing import Iterable

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
VIDEO_SEG, CAP_SEG, USER1_SEG, USER2_SEG = "[video]", "[cap]", "[user1]", "[user2]"
SPECIALS = (PAD, BOS, EOS, UNK, VIDEO_SEG, CAP_SEG, USER1_SEG, USER2_SEG)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
VIDEO_ID, CAP_ID, USER1_ID, USER2_ID = 4, 5, 6, 7
N_SPECIALS = len(SPECIALS)

_PUNCT = re.compile(r"([,.?!])")


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, and detach ``,.?!`` as their own tokens."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocab:
    """Bijective token/id map. Specials occupy ids 0..7."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(tokens)
        if tuple(self.itos[:N_SPECIALS]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens in canonical order")
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK_ID)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1])


def build_vocab(corpus: Iterable[str], min_freq: int = 1) -> Vocab:
    """Word types with count >= ``min_freq``, ordered by frequency then spelling."""
    counts: Counter[str] = Counter()
    seen = False
    for sentence in corpus:
        seen = True
        counts.update(tokenize(sentence))
    if not seen:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    words = sorted((w for w, c in counts.items() if c >= min_freq and w not in SPECIALS),
                   key=lambda w: (-counts[w], w))
    return Vocab(SPECIALS + tuple(words))


def encode(text: str | list[str], vocab: Vocab) -> list[int]:
    tokens = tokenize(text) if isinstance(text, str) else text
    return [vocab.id(t) for t in tokens]


def decode(ids: Iterable[int], vocab: Vocab) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(vocab):
            raise IndexError(f"token id {i} outside vocabulary of size {len(vocab)}")
        if i >= N_SPECIALS:
            out.append(vocab.itos[i])
    return " ".join(out)
