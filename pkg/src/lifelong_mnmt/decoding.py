"""Greedy, beam and k-best generation over batches of source sentences.

Any model exposing ``encode(src) -> (memory, mask)`` and
``next_logprobs(memory, mask, prefixes) -> (N, V)`` works, which lets tests
plug in hand-built scorers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .model import ModelError, pad_batch
from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary, decode, encode

MODES = ("greedy", "beam", "kbest")


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "beam"
    beam_size: int = 4
    k_best: int = 1
    length_penalty: float = 0.6
    max_len: int = 64

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown decode mode {self.mode!r}; expected one of {MODES}")
        if self.beam_size < 1 or self.k_best < 1 or self.max_len < 1:
            raise ValueError("beam_size, k_best and max_len must be positive")
        if self.k_best > self.beam_size:
            raise ValueError(f"k_best={self.k_best} exceeds beam_size={self.beam_size}")
        if self.length_penalty < 0:
            raise ValueError("length_penalty must be non-negative")

    @property
    def effective_beam(self) -> int:
        return 1 if self.mode == "greedy" else self.beam_size

    @property
    def n_best(self) -> int:
        return self.k_best if self.mode == "kbest" else 1


class Hypothesis(NamedTuple):
    tokens: tuple[int, ...]
    score: float
    logprob: float


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


def _model_limits(model) -> tuple[int | None, int | None]:
    cfg = getattr(model, "config", None)
    return getattr(cfg, "src_vocab_size", None), getattr(cfg, "max_len", None)


def _source_tensor(model, sources: Sequence[Sequence[int]]) -> torch.Tensor:
    vocab_size, max_len = _model_limits(model)
    for s in sources:
        for i in s:
            if i < 0 or (vocab_size is not None and i >= vocab_size):
                raise ModelError(f"source index {i} out of range for vocabulary of size {vocab_size}")
        if max_len is not None and len(s) > max_len:
            raise ModelError(f"source of length {len(s)} exceeds max_len={max_len}")
    return pad_batch([list(s) + [EOS_ID] for s in sources])


def _masked_logprobs(model, memory, mask, prefixes) -> np.ndarray:
    lp = model.next_logprobs(memory, mask, prefixes).to(torch.float64)
    lp[:, PAD_ID] = float("-inf")
    lp[:, BOS_ID] = float("-inf")
    return lp.numpy()


@torch.no_grad()
def greedy_decode_batch(model, sources: Sequence[Sequence[int]], max_len: int = 64, chunk: int = 512) -> list[list[int]]:
    """Argmax decoding; each output ends with EOS or has ``max_len`` tokens."""
    if hasattr(model, "eval"):
        model.eval()
    out: list[list[int]] = []
    for start in range(0, len(sources), chunk):
        part = sources[start : start + chunk]
        memory, mask = model.encode(_source_tensor(model, part))
        prefixes = torch.full((len(part), 1), BOS_ID, dtype=torch.long)
        done = np.zeros(len(part), dtype=bool)
        seqs: list[list[int]] = [[] for _ in part]
        for _ in range(max_len):
            lp = _masked_logprobs(model, memory, mask, prefixes)
            nxt = lp.argmax(axis=1)
            for i, tok in enumerate(nxt):
                if not done[i]:
                    seqs[i].append(int(tok))
                    done[i] = tok == EOS_ID
            if done.all():
                break
            step = torch.as_tensor(np.where(done, PAD_ID, nxt), dtype=torch.long)[:, None]
            prefixes = torch.cat([prefixes, step], dim=1)
        out.extend(seqs)
    return out


def greedy_decode(model, src: Sequence[int], config: DecodeConfig | None = None) -> list[int]:
    config = config or DecodeConfig(mode="greedy")
    return greedy_decode_batch(model, [src], config.max_len)[0]


@torch.no_grad()
def beam_search_batch(
    model,
    sources: Sequence[Sequence[int]],
    beam_size: int = 4,
    alpha: float = 0.6,
    max_len: int = 64,
    n_best: int = 1,
    chunk: int = 128,
) -> list[list[Hypothesis]]:
    """Length-normalized beam search returning up to ``n_best`` finished hypotheses per source.

    At each step the expanded candidates are ranked by summed log-probability;
    EOS candidates ranked above the ``beam_size``-th surviving candidate finish.
    Finished hypotheses are scored by logprob / ((5+len)/6)**alpha and ordered by
    (score desc, length asc, token indices asc). A source stops early once its
    ``beam_size``-th best finished score cannot be beaten by any live prefix.
    """
    if hasattr(model, "eval"):
        model.eval()
    results: list[list[Hypothesis]] = []
    lp_max = length_penalty(max_len, alpha)
    for start in range(0, len(sources), chunk):
        part = sources[start : start + chunk]
        memory, mask = model.encode(_source_tensor(model, part))
        alive: list[list[tuple[tuple[int, ...], float]]] = [[((), 0.0)] for _ in part]
        finished: list[list[Hypothesis]] = [[] for _ in part]
        for t in range(max_len):
            rows = [i for i, hyps in enumerate(alive) for _ in hyps]
            if not rows:
                break
            prefixes = torch.tensor(
                [[BOS_ID, *toks] for hyps in alive for toks, _ in hyps], dtype=torch.long
            ).reshape(len(rows), t + 1)
            index = torch.as_tensor(rows, dtype=torch.long)
            lp = _masked_logprobs(model, memory[index], mask[index], prefixes)
            offset = 0
            for i, hyps in enumerate(alive):
                n = len(hyps)
                if n == 0:
                    continue
                parent = np.array([s for _, s in hyps])
                cand = (parent[:, None] + lp[offset : offset + n]).ravel()
                offset += n
                order = np.argsort(-cand, kind="stable")
                vocab = lp.shape[1]
                new_alive = []
                for flat in order:
                    score = cand[flat]
                    if score == float("-inf"):
                        break
                    p, tok = divmod(int(flat), vocab)
                    toks = hyps[p][0] + (tok,)
                    if tok == EOS_ID:
                        finished[i].append(Hypothesis(toks, score / length_penalty(len(toks), alpha), float(score)))
                    else:
                        new_alive.append((toks, float(score)))
                        if len(new_alive) == beam_size:
                            break
                if t + 1 == max_len:
                    finished[i].extend(
                        Hypothesis(toks, s / length_penalty(len(toks), alpha), s) for toks, s in new_alive
                    )
                    new_alive = []
                elif new_alive and len(finished[i]) >= beam_size:
                    kth = sorted(h.score for h in finished[i])[-beam_size]
                    bound = max(s for _, s in new_alive) / (lp_max if alpha > 0 else 1.0)
                    if kth >= bound:
                        new_alive = []
                alive[i] = new_alive
        for hyps in finished:
            hyps.sort(key=lambda h: (-h.score, len(h.tokens), h.tokens))
            results.append(hyps[:n_best])
    return results


def beam_decode(model, src: Sequence[int], config: DecodeConfig | None = None) -> Hypothesis:
    config = config or DecodeConfig()
    return beam_search_batch(model, [src], config.effective_beam, config.length_penalty, config.max_len)[0][0]


def kbest_decode(model, src: Sequence[int], config: DecodeConfig) -> tuple[list[Hypothesis], bool]:
    """Top-k distinct finished hypotheses, score-descending; the flag is True when fewer than k exist."""
    hyps = beam_search_batch(
        model, [src], config.beam_size, config.length_penalty, config.max_len, n_best=config.k_best
    )[0]
    return hyps, len(hyps) < config.k_best


def decode_batch(model, sources: Sequence[Sequence[int]], config: DecodeConfig) -> list[list[Hypothesis]]:
    """Decode per ``config.mode``; greedy hypotheses carry NaN scores."""
    if config.mode == "greedy":
        return [[Hypothesis(tuple(s), float("nan"), float("nan"))] for s in greedy_decode_batch(model, sources, config.max_len)]
    return beam_search_batch(
        model, sources, config.beam_size, config.length_penalty, config.max_len, n_best=config.n_best
    )


def strip_eos(tokens: Sequence[int]) -> list[int]:
    return [t for t in tokens if t != EOS_ID]


def translate(
    model,
    sentences: Sequence[Sequence[str]],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: DecodeConfig,
) -> list[list[tuple[list[str], float]]]:
    """Decode token sentences; returns per sentence a list of (tokens without EOS, score)."""
    sources = [encode(s, src_vocab) for s in sentences]
    return [
        [(decode(strip_eos(h.tokens), tgt_vocab), h.score) for h in hyps]
        for hyps in decode_batch(model, sources, config)
    ]
