"""Greedy byte-pair-encoding over word-internal symbols with an end-of-word marker."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

EOW = "</w>"


def _word_symbols(word: str) -> tuple[str, ...]:
    chars = list(word)
    chars[-1] = chars[-1] + EOW
    return tuple(chars)


def _merge_word(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


@dataclass
class BpeModel:
    merges: list[tuple[str, str]] = field(default_factory=list)

    @property
    def num_merges(self) -> int:
        return len(self.merges)

    def segment_word(self, word: str) -> tuple[str, ...]:
        symbols = _word_symbols(word)
        for pair in self.merges:
            if len(symbols) == 1:
                break
            symbols = _merge_word(symbols, pair)
        return symbols

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> BpeModel:
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            a, b = line.split(" ")
            merges.append((a, b))
        return cls(merges)


def learn_bpe(corpus: Iterable[Sequence[str]], num_merges: int) -> BpeModel:
    """Learn merges; ties between equally frequent pairs go to the lexicographically smaller pair."""
    if num_merges < 0:
        raise ValueError("num_merges must be >= 0")
    word_freq = Counter(w for sent in corpus for w in sent)
    vocab = {_word_symbols(w): c for w, c in word_freq.items()}
    merges: list[tuple[str, str]] = []
    for _ in range(num_merges):
        pairs: Counter[tuple[str, str]] = Counter()
        for symbols, c in vocab.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merges.append(best)
        vocab = {_merge_word(s, best): c for s, c in vocab.items()}
    return BpeModel(merges)


def apply_bpe(sentence: Sequence[str], model: BpeModel) -> list[str]:
    cache: dict[str, tuple[str, ...]] = {}
    out: list[str] = []
    for word in sentence:
        if word not in cache:
            cache[word] = model.segment_word(word)
        out.extend(cache[word])
    return out


def detokenize_bpe(symbols: Sequence[str]) -> list[str]:
    """Join subword symbols back into words on the end-of-word marker."""
    words, buf = [], ""
    for sym in symbols:
        if sym.endswith(EOW):
            words.append(buf + sym[: -len(EOW)])
            buf = ""
        else:
            buf += sym
    if buf:
        words.append(buf)
    return words
