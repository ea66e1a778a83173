from __future__ import annotations

from dataclasses import dataclass, field

PAD, BOS, EOS, SEP, TAG0, TAG1, GO, UNK = (
    "<|pad|>", "<|bos|>", "<|eos|>", "<|sep|>", "<|tag0|>", "<|tag1|>", "<|go|>", "<|unk|>",
)
SPECIALS = (PAD, BOS, EOS, SEP, TAG0, TAG1, GO, UNK)


@dataclass(frozen=True)
class Vocab:
    """Dense token <-> id mapping. Specials occupy ids 0..7 in a fixed order."""

    tokens: tuple[str, ...]
    lookup: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocab must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocab")
        object.__setattr__(self, "lookup", {t: i for i, t in enumerate(self.tokens)})

    @classmethod
    def build(cls, words) -> "Vocab":
        extra = sorted(set(words) - set(SPECIALS))
        return cls(SPECIALS + tuple(extra))

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.lookup.get(token, self.lookup[UNK])

    def encode(self, tokens) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.tokens[i] for i in ids]

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    sep = property(lambda self: 3)
    tag0 = property(lambda self: 4)
    tag1 = property(lambda self: 5)
    go = property(lambda self: 6)
    unk = property(lambda self: 7)

    @property
    def word_ids(self) -> range:
        return range(len(SPECIALS), len(self.tokens))
