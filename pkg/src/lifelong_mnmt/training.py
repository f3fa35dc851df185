"""Mixture maximum-likelihood training over weighted parallel corpora."""

from __future__ import annotations

import copy
import hashlib
import logging
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .corpus import ParallelCorpus
from .model import Seq2SeqTransformer, batch_loss
from .optim import apply_update, init_optimizer
from .vocab import UNK, UNK_ID, Vocabulary, encode

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 15
    batch_tokens: int = 1500
    peak_lr: float = 2e-3
    warmup_steps: int = 100
    label_smoothing: float = 0.1
    select_best: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary labels."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


class CoverageError(ValueError):
    pass


def encode_corpora(
    corpora: Sequence[ParallelCorpus], src_vocab: Vocabulary, tgt_vocab: Vocabulary, strict: bool = True
) -> tuple[list[tuple[list[int], list[int]]], list[float]]:
    """Index every pair; with ``strict`` a token missing from the vocabularies is an error."""
    pairs, weights = [], []
    for corpus in corpora:
        for src, tgt in corpus.pairs:
            s, t = encode(src, src_vocab), encode(tgt, tgt_vocab)
            if strict:
                for tok, idx in zip(src, s):
                    if idx == UNK_ID and tok != UNK:
                        raise CoverageError(f"source token {tok!r} of {corpus.src_lang}->{corpus.tgt_lang} not in model vocabulary")
                for tok, idx in zip(tgt, t):
                    if idx == UNK_ID and tok != UNK:
                        raise CoverageError(f"target token {tok!r} of {corpus.src_lang}->{corpus.tgt_lang} not in model vocabulary")
            pairs.append((s, t))
            weights.append(corpus.weight)
    return pairs, weights


def make_batches(
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]], batch_tokens: int, rng: np.random.Generator
) -> list[list[int]]:
    """Seeded shuffle, length-sorted pools, then batches under a padded-token budget."""
    order = rng.permutation(len(pairs))
    pool = max(1, 50 * max(1, batch_tokens // 10))
    batches: list[list[int]] = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start : start + pool], key=lambda i: (max(len(pairs[i][0]), len(pairs[i][1])), i))
        batch: list[int] = []
        width = 0
        for i in chunk:
            w = max(len(pairs[i][0]), len(pairs[i][1])) + 1
            if batch and max(width, w) * (len(batch) + 1) > batch_tokens:
                batches.append(batch)
                batch, width = [], 0
            batch.append(int(i))
            width = max(width, w)
        if batch:
            batches.append(batch)
    return [batches[i] for i in rng.permutation(len(batches))]


EpochCallback = Callable[[int, Seq2SeqTransformer], float]


def train_mixture(
    model: Seq2SeqTransformer,
    corpora: Sequence[ParallelCorpus],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    config: TrainConfig,
    seed: int,
    on_epoch: EpochCallback | None = None,
    penalty: Callable[[Seq2SeqTransformer], torch.Tensor] | None = None,
) -> Seq2SeqTransformer:
    """Maximize the summed log-likelihood of all corpora, each pair scaled by its corpus weight.

    ``on_epoch(epoch, model)`` returns a selection score (higher is better);
    with ``config.select_best`` the best-scoring epoch's parameters are kept.
    Trains ``model`` in place and returns it.
    """
    if not corpora:
        raise ValueError("no corpora to train on")
    for c in corpora:
        c.validate()
    if len(src_vocab) != model.config.src_vocab_size or len(tgt_vocab) != model.config.tgt_vocab_size:
        raise CoverageError("model tables do not match the vocabularies")
    pairs, weights = encode_corpora(corpora, src_vocab, tgt_vocab)
    opt = init_optimizer(model, peak_lr=config.peak_lr, warmup_steps=config.warmup_steps)
    params = dict(model.named_parameters())
    best_score, best_state = float("-inf"), None
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng(derive_seed(seed, "epoch", epoch))
        torch.manual_seed(derive_seed(seed, "dropout", epoch))
        model.train()
        total = 0.0
        batches = make_batches(pairs, config.batch_tokens, rng)
        for batch in batches:
            model.zero_grad(set_to_none=True)
            loss = batch_loss(model, [pairs[i] for i in batch], [weights[i] for i in batch], config.label_smoothing)
            if penalty is not None:
                loss = loss + penalty(model)
            loss.backward()
            grads = {n: (p.grad if p.grad is not None else torch.zeros_like(p)) for n, p in params.items()}
            apply_update(model, grads, opt)
            total += float(loss.detach())
        model.eval()
        log.debug("epoch %d: mean batch loss %.4f", epoch, total / max(len(batches), 1))
        if on_epoch is not None:
            score = on_epoch(epoch, model)
            if config.select_best and score > best_score:
                best_score = score
                best_state = copy.deepcopy(model.state_dict())
    if best_state is not None:
        model.load_state_dict(best_state)
    model.zero_grad(set_to_none=True)
    return model.eval()
