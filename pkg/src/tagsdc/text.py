"""Vocabulary and tokenized captions."""
from __future__ import annotations

from dataclasses import dataclass, field

PAD, MASK, UNK, BOS, EOS = "[PAD]", "[MASK]", "[UNK]", "[BOS]", "[EOS]"
RESERVED = (PAD, MASK, UNK, BOS, EOS)
MAX_LEN = 24


@dataclass(frozen=True)
class Vocabulary:
    """Dense id <-> surface mapping; the reserved tokens occupy ids 0-4."""

    tokens: tuple
    lookup: dict = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens):
        tokens = tuple(tokens)
        lookup = {t: i for i, t in enumerate(tokens)}
        if len(lookup) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        missing = [r for r in RESERVED if r not in lookup]
        if missing:
            raise ValueError(f"vocabulary lacks reserved tokens {missing}")
        return cls(tokens, lookup)

    def __len__(self):
        return len(self.tokens)

    @property
    def size(self):
        return len(self.tokens)

    def id_of(self, token):
        return self.lookup.get(token, self.lookup[UNK])

    @property
    def pad_id(self):
        return self.lookup[PAD]

    @property
    def mask_id(self):
        return self.lookup[MASK]

    @property
    def unk_id(self):
        return self.lookup[UNK]

    @property
    def reserved_ids(self):
        return tuple(self.lookup[r] for r in RESERVED)


@dataclass(frozen=True)
class TokenSeq:
    ids: tuple
    surfaces: tuple

    def __post_init__(self):
        if len(self.ids) != len(self.surfaces):
            raise ValueError("ids and surfaces differ in length")

    def __len__(self):
        return len(self.ids)

    @property
    def length(self):
        return len(self.ids)

    @property
    def text(self):
        return " ".join(self.surfaces)

    def replace(self, positions, new_ids, vocab):
        """Copy with ``positions`` overwritten by ``new_ids``."""
        ids, surf = list(self.ids), list(self.surfaces)
        for p, i in zip(positions, new_ids):
            ids[p] = int(i)
            surf[p] = vocab.tokens[int(i)]
        return TokenSeq(tuple(ids), tuple(surf))


def _split(raw):
    return raw.lower().split()


def build_vocabulary(corpus):
    """Reserved tokens followed by every corpus token in first-seen order."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    tokens = list(RESERVED)
    seen = set(tokens)
    for line in corpus:
        for tok in _split(line):
            if tok not in seen:
                seen.add(tok)
                tokens.append(tok)
    return Vocabulary.from_tokens(tokens)


def tokenize(vocab, raw):
    """Lowercase, split on whitespace, map unknown words to ``[UNK]``.

    Surfaces keep the raw lowercased words, so out-of-vocabulary words stay
    distinguishable even though they share the ``[UNK]`` id.
    """
    words = _split(raw)
    return TokenSeq(tuple(vocab.id_of(w) for w in words), tuple(words))


def detokenize(seq):
    return seq.text
