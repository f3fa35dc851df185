"""Deterministic synthetic languages with exact oracle translations.

A language realizes a base sentence (tokens ``t0..t{V-1}``) by relabeling
each base rank through a permutation and then swapping adjacent positions
``(i, i+1)`` for every ``i`` that is a multiple of the reorder period. Both
steps are invertible, so the oracle translation between two languages is
``realize(L2, unrealize(L1, s))``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import ParallelCorpus, TaskSpec, write_lines

BASE_PREFIX = "t"
MANIFEST = "task.manifest"


class SyntheticError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticLanguage:
    lang_id: str
    perm: tuple[int, ...]
    reorder_period: int = 0
    token_prefix: str = ""

    def __post_init__(self) -> None:
        if sorted(self.perm) != list(range(len(self.perm))):
            raise SyntheticError(f"language {self.lang_id}: perm is not a bijection")
        if self.reorder_period == 1 or self.reorder_period < 0:
            raise SyntheticError("reorder_period must be 0 (none) or >= 2")
        if not self.token_prefix:
            object.__setattr__(self, "token_prefix", f"{self.lang_id}_")

    @property
    def rank_preserving(self) -> bool:
        return all(p == r for r, p in enumerate(self.perm))

    @property
    def vocab_size(self) -> int:
        return len(self.perm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["perm"] = list(self.perm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticLanguage:
        return cls(d["lang_id"], tuple(d["perm"]), d.get("reorder_period", 0), d.get("token_prefix", ""))


def make_language(
    lang_id: str,
    vocab_size: int,
    seed: int = 0,
    rank_preserving: bool = True,
    reorder_period: int = 0,
    token_prefix: str = "",
) -> SyntheticLanguage:
    if rank_preserving:
        perm = tuple(range(vocab_size))
    else:
        perm = tuple(int(x) for x in np.random.default_rng(seed).permutation(vocab_size))
    return SyntheticLanguage(lang_id, perm, reorder_period, token_prefix)


def _swap_positions(tokens: list, period: int) -> list:
    # self-inverse: swapped pairs never overlap when period >= 2
    if period:
        for i in range(0, len(tokens) - 1, period):
            tokens[i], tokens[i + 1] = tokens[i + 1], tokens[i]
    return tokens


def _parse_rank(token: str, prefix: str) -> int:
    if not token.startswith(prefix) or not token[len(prefix):].isdigit():
        raise SyntheticError(f"token {token!r} does not belong to prefix {prefix!r}")
    return int(token[len(prefix):])


def realize(lang: SyntheticLanguage, base_sentence: Sequence[str]) -> list[str]:
    ranks = [_parse_rank(t, BASE_PREFIX) for t in base_sentence]
    for r in ranks:
        if r >= lang.vocab_size:
            raise SyntheticError(f"base rank {r} outside vocabulary of {lang.lang_id}")
    out = [f"{lang.token_prefix}{lang.perm[r]}" for r in ranks]
    return _swap_positions(out, lang.reorder_period)


def unrealize(lang: SyntheticLanguage, sentence: Sequence[str]) -> list[str]:
    inverse = np.argsort(lang.perm)
    tokens = _swap_positions(list(sentence), lang.reorder_period)
    return [f"{BASE_PREFIX}{inverse[_parse_rank(t, lang.token_prefix)]}" for t in tokens]


def translate(src: SyntheticLanguage, tgt: SyntheticLanguage, sentence: Sequence[str]) -> list[str]:
    """Oracle translation."""
    return realize(tgt, unrealize(src, sentence))


def zipf_probs(vocab_size: int, zipf_s: float) -> np.ndarray:
    w = 1.0 / np.arange(1, vocab_size + 1, dtype=np.float64) ** zipf_s
    return w / w.sum()


def gen_base_corpus(
    seed: int | np.random.SeedSequence,
    size: int,
    vocab_size: int,
    zipf_s: float = 1.0,
    len_range: tuple[int, int] = (4, 10),
) -> list[list[str]]:
    """Sentences of i.i.d. base tokens where rank r has probability proportional to 1/(r+1)**s."""
    lo, hi = len_range
    if vocab_size < 10:
        raise SyntheticError("vocab_size must be >= 10")
    if not 1 <= lo <= hi:
        raise SyntheticError(f"invalid len_range {len_range}")
    if size < 0 or zipf_s < 0:
        raise SyntheticError("size and zipf_s must be non-negative")
    rng = np.random.default_rng(seed)
    probs = zipf_probs(vocab_size, zipf_s)
    lengths = rng.integers(lo, hi + 1, size=size)
    tokens = rng.choice(vocab_size, size=int(lengths.sum()), p=probs)
    out, pos = [], 0
    for n in lengths:
        out.append([f"{BASE_PREFIX}{r}" for r in tokens[pos : pos + n]])
        pos += n
    return out


@dataclass
class SyntheticTask:
    task_id: str
    src: SyntheticLanguage
    tgt: SyntheticLanguage
    seed: int
    train_size: int = 2000
    dev_size: int = 200
    test_size: int = 200
    vocab_size: int = 50
    zipf_s: float = 1.0
    len_range: tuple[int, int] = (4, 10)
    split_seeds: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.len_range = tuple(self.len_range)
        if self.src.vocab_size < self.vocab_size or self.tgt.vocab_size < self.vocab_size:
            raise SyntheticError(f"task {self.task_id}: languages cover fewer ranks than vocab_size")
        if not self.split_seeds:
            # disjoint child streams of the task seed
            children = np.random.SeedSequence(self.seed).spawn(3)
            self.split_seeds = {
                name: int(child.generate_state(2, np.uint64)[0] >> np.uint64(1))
                for name, child in zip(("train", "dev", "test"), children)
            }

    @property
    def sizes(self) -> dict[str, int]:
        return {"train": self.train_size, "dev": self.dev_size, "test": self.test_size}

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "src": self.src.to_dict(),
            "tgt": self.tgt.to_dict(),
            "seed": self.seed,
            "train_size": self.train_size,
            "dev_size": self.dev_size,
            "test_size": self.test_size,
            "vocab_size": self.vocab_size,
            "zipf_s": self.zipf_s,
            "len_range": list(self.len_range),
            "split_seeds": dict(self.split_seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticTask:
        d = dict(d)
        d["src"] = SyntheticLanguage.from_dict(d["src"])
        d["tgt"] = SyntheticLanguage.from_dict(d["tgt"])
        return cls(**d)

    def corpus(self, split: str) -> ParallelCorpus:
        base = gen_base_corpus(
            self.split_seeds[split], self.sizes[split], self.vocab_size, self.zipf_s, self.len_range
        )
        pairs = [(realize(self.src, s), realize(self.tgt, s)) for s in base]
        return ParallelCorpus(self.src.lang_id, self.tgt.lang_id, pairs)


def gen_task(spec: SyntheticTask, directory: str | Path) -> TaskSpec:
    """Write train/dev/test corpus files plus ``task.manifest``; a no-op if an identical manifest exists."""
    directory = Path(directory)
    manifest_text = json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n"
    task = TaskSpec(spec.task_id, spec.src.lang_id, spec.tgt.lang_id, directory)
    manifest = directory / MANIFEST
    if manifest.exists() and manifest.read_text(encoding="utf-8") == manifest_text:
        if all((directory / f"{n}.{lang}").exists() for n in spec.sizes for lang in (task.src_lang, task.tgt_lang)):
            return task
    directory.mkdir(parents=True, exist_ok=True)
    for split in spec.sizes:
        corpus = spec.corpus(split)
        write_lines(directory / f"{split}.{task.src_lang}", corpus.sources)
        write_lines(directory / f"{split}.{task.tgt_lang}", corpus.targets)
    manifest.write_text(manifest_text, encoding="utf-8")
    return task


def load_manifest(directory: str | Path) -> SyntheticTask:
    return SyntheticTask.from_dict(json.loads((Path(directory) / MANIFEST).read_text(encoding="utf-8")))


def standard_languages(
    scenario: str,
    n_tasks: int = 3,
    vocab_size: int = 50,
    seed: int = 0,
    rank_preserving: bool = True,
) -> tuple[list[SyntheticLanguage], SyntheticLanguage]:
    """Languages for an incremental scenario: (varying side, shared side).

    Languages on the varying side use distinct token prefixes, so their
    vocabularies are disjoint.
    """
    names = [f"l{i + 1}" for i in range(n_tasks)]
    varying = [
        make_language(n, vocab_size, seed=seed * 1000 + i + 1, rank_preserving=rank_preserving, reorder_period=2 + i % 2)
        for i, n in enumerate(names)
    ]
    shared = make_language("en" if scenario == "many2one" else "src", vocab_size, seed=seed * 1000, rank_preserving=True)
    return varying, shared
