"""Frequency-ranked vocabularies, indicator tokens, UNK handling and rank mappings.

Sentences are plain lists of token strings. An indicator token such as
``<en2it>`` may occupy position 0.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, BOS, EOS = "PAD", "UNK", "BOS", "EOS"
RESERVED = (PAD, UNK, BOS, EOS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID = 0, 1, 2, 3

_INDICATOR_RE = re.compile(r"^<([A-Za-z0-9_\-]+)2([A-Za-z0-9_\-]+)>$")


class VocabError(ValueError):
    pass


def indicator_token(src_lang: str, tgt_lang: str) -> str:
    return f"<{src_lang}2{tgt_lang}>"


def is_indicator(token: str) -> bool:
    return _INDICATOR_RE.match(token) is not None


def parse_indicator(token: str) -> tuple[str, str]:
    m = _INDICATOR_RE.match(token)
    if m is None:
        raise VocabError(f"not an indicator token: {token!r}")
    return m.group(1), m.group(2)


def is_reserved(token: str) -> bool:
    return token in RESERVED or is_indicator(token)


def check_token(token: str) -> str:
    if not token or any(ch.isspace() for ch in token):
        raise VocabError(f"invalid token {token!r}: must be non-empty without whitespace")
    return token


@dataclass
class Vocabulary:
    """Token inventory with stable indices.

    Index layout: PAD, UNK, BOS, EOS at 0-3, then entries in insertion order.
    Indicator tokens are reserved entries and do not take part in ranks. A
    freshly built vocabulary lists its content tokens by (count desc, token asc),
    so ``rank(t)`` is its 0-based frequency rank.
    """

    lang: str
    tokens: list[str] = field(default_factory=lambda: list(RESERVED))
    counts: list[int] = field(default_factory=lambda: [0] * len(RESERVED))

    def __post_init__(self) -> None:
        if tuple(self.tokens[:4]) != RESERVED:
            raise VocabError("reserved tokens must occupy indices 0-3")
        if len(self.tokens) != len(self.counts):
            raise VocabError("tokens and counts differ in length")
        self._index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self._index:
                raise VocabError(f"duplicate token {tok!r}")
            self._index[tok] = i
        self._ranked = [t for t in self.tokens if not is_reserved(t)]
        self._rank = {t: r for r, t in enumerate(self._ranked)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return (self.lang, self.tokens, self.counts) == (other.lang, other.tokens, other.counts)

    def index(self, token: str) -> int:
        return self._index.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        if not 0 <= idx < len(self.tokens):
            raise VocabError(f"index {idx} out of range for vocabulary of size {len(self.tokens)}")
        return self.tokens[idx]

    def count(self, token: str) -> int:
        return self.counts[self._index[token]]

    @property
    def ranked_tokens(self) -> list[str]:
        """Non-reserved tokens in rank order."""
        return list(self._ranked)

    def rank(self, token: str) -> int:
        return self._rank[token]

    @property
    def content_size(self) -> int:
        return len(self._ranked)

    @property
    def indicators(self) -> list[str]:
        return [t for t in self.tokens if is_indicator(t)]

    def add_reserved(self, token: str) -> int:
        """Register an indicator token (append-only) and return its index."""
        if not is_indicator(token):
            raise VocabError(f"only indicator tokens may be registered as reserved: {token!r}")
        if token not in self._index:
            self.tokens.append(token)
            self.counts.append(0)
            self._index[token] = len(self.tokens) - 1
        return self._index[token]

    def copy(self) -> Vocabulary:
        return Vocabulary(self.lang, list(self.tokens), list(self.counts))

    def save(self, path: str | Path) -> None:
        lines = [f"{t}\t{c}\n" for t, c in zip(self.tokens, self.counts)]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, lang: str | None = None) -> Vocabulary:
        path = Path(path)
        tokens, counts = [], []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise VocabError(f"{path}:{lineno}: expected 'token<TAB>count'")
            tokens.append(parts[0])
            counts.append(int(parts[1]))
        return cls(lang if lang is not None else path.stem, tokens, counts)


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int, lang: str = "") -> Vocabulary:
    """Count tokens and keep the ``max_size`` most frequent (ties by token text)."""
    if max_size < 0:
        raise VocabError("max_size must be >= 0")
    counter: Counter[str] = Counter()
    for sent in corpus:
        counter.update(t for t in sent if not is_reserved(t))
    ranked = sorted(counter.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    return Vocabulary(
        lang,
        list(RESERVED) + [t for t, _ in ranked],
        [0] * len(RESERVED) + [c for _, c in ranked],
    )


def union_vocab(v_old: Vocabulary, v_task: Vocabulary, lang: str | None = None) -> Vocabulary:
    """Append-only union: old indices are kept, new tokens follow in ``v_task`` order.

    Counts of shared tokens are merged by max.
    """
    tokens, counts = list(v_old.tokens), list(v_old.counts)
    position = {t: i for i, t in enumerate(tokens)}
    for tok, cnt in zip(v_task.tokens, v_task.counts):
        if tok in position:
            counts[position[tok]] = max(counts[position[tok]], cnt)
        else:
            position[tok] = len(tokens)
            tokens.append(tok)
            counts.append(cnt)
    if lang is None:
        parts = [p for p in v_old.lang.split("+") + v_task.lang.split("+") if p]
        lang = "+".join(dict.fromkeys(parts))
    return Vocabulary(lang, tokens, counts)


def encode(sentence: Sequence[str], vocab: Vocabulary) -> list[int]:
    """Map tokens to indices; unknown tokens become UNK."""
    return [vocab.index(t) for t in sentence]


def decode(indices: Iterable[int], vocab: Vocabulary) -> list[str]:
    return [vocab.token(int(i)) for i in indices]


def unk_rate(sentences: Iterable[Sequence[str]], vocab: Vocabulary) -> float:
    """Fraction of tokens that encode to UNK."""
    total = unk = 0
    for sent in sentences:
        for idx in encode(sent, vocab):
            total += 1
            unk += idx == UNK_ID
    return unk / total if total else 0.0


def add_indicator(
    sentence: Sequence[str], src_lang: str, tgt_lang: str, vocab: Vocabulary | None = None
) -> list[str]:
    """Prepend ``<src2tgt>``; registers it in ``vocab`` when given."""
    if sentence and is_indicator(sentence[0]):
        raise VocabError(f"sentence already carries indicator {sentence[0]}")
    tok = indicator_token(src_lang, tgt_lang)
    if vocab is not None:
        vocab.add_reserved(tok)
    return [tok, *sentence]


def strip_indicator(sentence: Sequence[str]) -> list[str]:
    if sentence and is_indicator(sentence[0]):
        return list(sentence[1:])
    return list(sentence)


@dataclass(frozen=True)
class RankMapping:
    """Token substitution from ``from_lang`` to ``to_lang`` by equal frequency rank."""

    from_lang: str
    to_lang: str
    pairs: dict[str, str]

    def __call__(self, token: str) -> str:
        return self.pairs.get(token, UNK)

    def save(self, path: str | Path) -> None:
        lines = [f"{a}\t{b}\n" for a, b in self.pairs.items()]
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, from_lang: str, to_lang: str) -> RankMapping:
        pairs = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            a, b = line.split("\t")
            pairs[a] = b
        return cls(from_lang, to_lang, pairs)


def build_rank_mapping(v_new: Vocabulary, v_old: Vocabulary) -> RankMapping:
    """Rank-j token of ``v_new`` maps to rank-j token of ``v_old``; overflow ranks map to UNK."""
    old = v_old.ranked_tokens
    pairs = {tok: (old[j] if j < len(old) else UNK) for j, tok in enumerate(v_new.ranked_tokens)}
    return RankMapping(v_new.lang, v_old.lang, pairs)


def apply_mapping(
    sentence: Sequence[str], mapping: RankMapping, indicator: str | None = None
) -> list[str]:
    """Build a pseudo input by token-wise substitution, order preserved.

    An existing leading indicator is dropped; ``indicator`` (if given) is
    prepended to the result.
    """
    out = [mapping(t) for t in strip_indicator(sentence)]
    return [indicator, *out] if indicator else out
