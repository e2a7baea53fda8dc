"""Closed vocabulary for the synthetic referring expressions.

The generator's language is small enough to enumerate: articles, shape
and color words, and the spatial-relation words.  Ids 0/1/2 are reserved
for PAD/MASK/CLS; word ids follow contiguously, so the token-to-id map is
a bijection over the whole table.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PAD, MASK, CLS = 0, 1, 2
_SPECIALS = ("<pad>", "<mask>", "<cls>")

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
_WORDS = (
    "the", "a", "that", "is", "to", "of",
    *COLORS, *SHAPES,
    "left", "right", "above", "below",
)

MAX_LEN = 12  # CLS + longest expression (11 tokens total) fits


@dataclass(frozen=True)
class Vocabulary:
    """Bijective word <-> id table with reserved PAD/MASK/CLS slots."""

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})
        if len(self.index) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise KeyError(f"word not in vocabulary: {word!r}") from None

    def word(self, token_id: int) -> str:
        return self.tokens[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id in (PAD, MASK, CLS)


def build_vocabulary() -> Vocabulary:
    return Vocabulary(tokens=_SPECIALS + _WORDS)


def tokenize(words: list[str], vocab: Vocabulary, max_len: int = MAX_LEN) -> list[int]:
    """Encode `words` as [CLS, ids..., PAD...] of length exactly `max_len`."""
    if len(words) + 1 > max_len:
        raise ValueError(f"expression of {len(words)} words exceeds max_len={max_len}")
    ids = [CLS] + [vocab.id(w) for w in words]
    return ids + [PAD] * (max_len - len(ids))


def detokenize(token_ids, vocab: Vocabulary) -> list[str]:
    """Inverse of tokenize: drop CLS, stop at the first PAD."""
    words = []
    for t in token_ids:
        t = int(t)
        if t == PAD:
            break
        if t == CLS:
            continue
        words.append(vocab.word(t))
    return words
