"""Parallel corpora and task descriptions, stored as one-sentence-per-line files."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .vocab import VocabError, strip_indicator


def read_lines(path: str | Path) -> list[list[str]]:
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def write_lines(path: str | Path, sentences: Iterable[Sequence[str]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sent in sentences:
            fh.write(" ".join(sent) + "\n")


@dataclass
class ParallelCorpus:
    """Aligned sentence pairs of one translation direction.

    ``weight`` scales every pair's loss; ``method`` and ``decode_mode`` record
    how distilled corpora were generated (empty for authentic data).
    """

    src_lang: str
    tgt_lang: str
    pairs: list[tuple[list[str], list[str]]]
    weight: float = 1.0
    method: str = ""
    decode_mode: str = ""

    def __post_init__(self) -> None:
        if self.weight <= 0:
            raise VocabError("corpus weight must be positive")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[list[str]]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[list[str]]:
        return [t for _, t in self.pairs]

    def validate(self) -> None:
        if not self.pairs:
            raise VocabError(f"corpus {self.src_lang}->{self.tgt_lang} is empty")
        for i, (s, t) in enumerate(self.pairs):
            if not strip_indicator(s) or not t:
                raise VocabError(f"pair {i} of {self.src_lang}->{self.tgt_lang} has an empty side")

    def save(self, directory: str | Path, name: str) -> tuple[Path, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        src = directory / f"{name}.{self.src_lang}"
        tgt = directory / f"{name}.{self.tgt_lang}"
        write_lines(src, self.sources)
        write_lines(tgt, self.targets)
        return src, tgt

    @classmethod
    def load(cls, directory: str | Path, name: str, src_lang: str, tgt_lang: str, weight: float = 1.0) -> ParallelCorpus:
        directory = Path(directory)
        src = read_lines(directory / f"{name}.{src_lang}")
        tgt = read_lines(directory / f"{name}.{tgt_lang}")
        if len(src) != len(tgt):
            raise VocabError(f"{directory}/{name}: line counts differ ({len(src)} vs {len(tgt)})")
        return cls(src_lang, tgt_lang, list(zip(src, tgt)), weight)


@dataclass
class TaskSpec:
    """One translation direction with its train/dev/test files in ``directory``."""

    task_id: str
    src_lang: str
    tgt_lang: str
    directory: Path

    def __post_init__(self) -> None:
        self.directory = Path(self.directory)
        if self.src_lang == self.tgt_lang:
            raise VocabError(f"task {self.task_id}: source and target language coincide")

    def split(self, name: str) -> ParallelCorpus:
        for lang in (self.src_lang, self.tgt_lang):
            if not (self.directory / f"{name}.{lang}").exists():
                raise FileNotFoundError(f"task {self.task_id}: missing {name} split ({self.directory}/{name}.{lang})")
        return ParallelCorpus.load(self.directory, name, self.src_lang, self.tgt_lang)

    @property
    def train(self) -> ParallelCorpus:
        return self.split("train")

    @property
    def dev(self) -> ParallelCorpus:
        return self.split("dev")

    @property
    def test(self) -> ParallelCorpus:
        return self.split("test")

    def to_dict(self) -> dict:
        return {"task_id": self.task_id, "src_lang": self.src_lang, "tgt_lang": self.tgt_lang, "directory": str(self.directory)}
