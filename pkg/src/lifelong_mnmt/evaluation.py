"""Corpus BLEU, forgetting reports and per-epoch dev curves."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuScore:
    bleu: float
    precisions: tuple[float, ...]
    brevity_penalty: float
    candidate_len: int
    reference_len: int


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    allow_empty: bool = False,
) -> BleuScore:
    """Case-sensitive single-reference corpus BLEU-4 on whitespace tokens.

    A zero match count at order n >= 2 is smoothed to 1 / (2 * denominator).
    When the candidates contain no n-grams of some order, the precision is 1
    if the references have none either and 1/2 otherwise.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        if allow_empty:
            return BleuScore(0.0, (0.0,) * MAX_ORDER, 0.0, 0, 0)
        raise ValueError("empty candidate corpus")
    matches = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    ref_totals = [0] * MAX_ORDER
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            c_ng, r_ng = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum((c_ng & r_ng).values())
            totals[n - 1] += max(len(cand) - n + 1, 0)
            ref_totals[n - 1] += max(len(ref) - n + 1, 0)
    precisions = []
    for n in range(MAX_ORDER):
        if totals[n] == 0:
            p = 1.0 if ref_totals[n] == 0 else 0.5
            if n == 0:
                p = 0.0
        elif matches[n] == 0:
            p = 0.0 if n == 0 else 1.0 / (2 * totals[n])
        else:
            p = matches[n] / totals[n]
        precisions.append(p)
    if c_len == 0:
        bp = 0.0
    else:
        bp = math.exp(1 - r_len / c_len) if c_len < r_len else 1.0
    if min(precisions) <= 0:
        bleu = 0.0
    else:
        bleu = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER)
    return BleuScore(bleu, tuple(precisions), bp, c_len, r_len)


def exact_match(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Percentage of sentences reproduced exactly (auxiliary metric for synthetic tasks)."""
    if not candidates:
        return 0.0
    return 100.0 * sum(list(c) == list(r) for c, r in zip(candidates, references)) / len(candidates)


@dataclass
class CFRow:
    """One learning stage of one method: BLEU per learned task in arrival order."""

    method: str
    stage: int
    bleu: dict[str, float]
    exact: dict[str, float] = field(default_factory=dict)
    single_avg: float | None = None
    checkpoint: str = ""

    def __post_init__(self) -> None:
        # stored at report precision so a JSON round trip is a fixed point
        self.bleu = _rounded({k: float(v) for k, v in self.bleu.items()})
        self.exact = _rounded({k: float(v) for k, v in self.exact.items()})
        if self.single_avg is not None:
            self.single_avg = _rounded(float(self.single_avg))

    @property
    def bleu_avg(self) -> float:
        return sum(self.bleu.values()) / len(self.bleu) if self.bleu else 0.0

    @property
    def delta(self) -> float | None:
        return None if self.single_avg is None else self.bleu_avg - self.single_avg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bleu_avg"] = self.bleu_avg
        d["delta"] = self.delta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> CFRow:
        return cls(d["method"], d["stage"], dict(d["bleu"]), dict(d.get("exact", {})), d.get("single_avg"), d.get("checkpoint", ""))


@dataclass
class CFReport:
    task_ids: list[str]
    rows: list[CFRow] = field(default_factory=list)

    def add(self, row: CFRow) -> None:
        self.rows.append(row)

    def final_rows(self) -> list[CFRow]:
        """Last stage per method, methods in first-seen order."""
        last: dict[str, CFRow] = {}
        for r in self.rows:
            if r.method not in last or r.stage >= last[r.method].stage:
                last[r.method] = r
        return list(last.values())

    def row(self, method: str, stage: int | None = None) -> CFRow:
        rows = [r for r in self.rows if r.method == method and (stage is None or r.stage == stage)]
        if not rows:
            raise KeyError(f"no row for method={method} stage={stage}")
        return max(rows, key=lambda r: r.stage)

    def to_json(self) -> str:
        payload = {"task_ids": self.task_ids, "rows": [_rounded(r.to_dict()) for r in self.rows]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> CFReport:
        payload = json.loads(text)
        return cls(payload["task_ids"], [CFRow.from_dict(r) for r in payload["rows"]])

    def to_table(self, final_only: bool = True) -> str:
        rows = self.final_rows() if final_only else self.rows
        header = ["#", "Model", "Stage"] + [f"BLEU-{t}" for t in self.task_ids] + ["BLEU-avg", "Delta"]
        lines = [header]
        for i, r in enumerate(rows, 1):
            cells = [str(i), r.method, str(r.stage)]
            cells += [f"{r.bleu[t]:.2f}" if t in r.bleu else "~" for t in self.task_ids]
            cells.append(f"{r.bleu_avg:.2f}")
            cells.append("~" if r.delta is None else f"{r.delta:+.2f}")
            lines.append(cells)
        widths = [max(len(row[c]) for row in lines) for c in range(len(header))]
        out = []
        for j, cells in enumerate(lines):
            out.append("  ".join(c.rjust(w) if k != 1 else c.ljust(w) for k, (c, w) in enumerate(zip(cells, widths))))
            if j == 0:
                out.append("-" * len(out[0]))
        return "\n".join(out) + "\n"


def _rounded(obj):
    # fixed precision keeps the JSON and text renderings in agreement
    if isinstance(obj, float):
        return round(obj, 6)
    if isinstance(obj, dict):
        return {k: _rounded(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_rounded(v) for v in obj]
    return obj


@dataclass(frozen=True)
class CurveRecord:
    method: str
    stage: int
    epoch: int
    dev_bleu: dict[str, float]

    def to_json(self) -> str:
        return json.dumps(_rounded(asdict(self)), sort_keys=True)


class CurveLog:
    """Append-only JSON-lines log of per-epoch dev BLEU."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.records: list[CurveRecord] = []
        if self.path is not None and self.path.exists():
            self.records = read_curves(self.path)

    def log_curve(self, method: str, stage: int, epoch: int, dev_bleu: dict[str, float]) -> CurveRecord:
        rec = CurveRecord(method, stage, epoch, dict(dev_bleu))
        last = [r for r in self.records if r.method == method]
        if last and (stage, epoch) <= (last[-1].stage, last[-1].epoch):
            raise ValueError(f"curve records for {method} must advance in (stage, epoch)")
        self.records.append(rec)
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
        return rec

    def drop_after(self, method: str, stage: int) -> None:
        """Forget records of ``method`` beyond ``stage`` (used when resuming)."""
        self.records = [r for r in self.records if r.method != method or r.stage <= stage]
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")


def read_curves(path: str | Path) -> list[CurveRecord]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            d = json.loads(line)
            out.append(CurveRecord(d["method"], d["stage"], d["epoch"], d["dev_bleu"]))
    return out


def mean(values: Iterable[float]) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0
