import itertools

import numpy as np
import pytest
import torch

from lifelong_mnmt.model import ModelConfig, init_model
from lifelong_mnmt.vocab import BOS_ID, EOS_ID, PAD_ID, UNK_ID

torch.set_num_threads(1)


# criterion number -> (passed, detail), filled by tests/test_acceptance.py
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


class TableModel:
    """Decoder whose next-token distribution is a fixed random function of the prefix.

    Exposes the ``encode`` / ``next_logprobs`` protocol the decoders use, so
    beam search can be compared against brute-force enumeration. Content
    tokens are 4..vocab_size-1; PAD, UNK and BOS have zero probability.
    """

    def __init__(self, vocab_size: int = 7, seed: int = 0, sharpness: float = 3.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.sharpness = sharpness

    def encode(self, src):
        return src.to(torch.float64), src == PAD_ID

    def _logprobs(self, src_key, prefix):
        rng = np.random.default_rng([self.seed, hash((src_key, prefix)) & 0xFFFFFFFF])
        logits = rng.normal(size=self.vocab_size) * self.sharpness
        logits[[PAD_ID, UNK_ID, BOS_ID]] = -np.inf
        logits -= logits.max()
        return logits - np.log(np.exp(logits).sum())

    def next_logprobs(self, memory, mask, prefixes):
        rows = []
        for mem, pre in zip(memory.tolist(), prefixes.tolist()):
            src_key = tuple(int(x) for x in mem if x != PAD_ID)
            prefix = tuple(int(x) for x in pre[1:])
            rows.append(self._logprobs(src_key, prefix))
        return torch.tensor(np.array(rows), dtype=torch.float64)

    def sequence_logprob(self, src, tokens):
        key = tuple(src) + (EOS_ID,)
        total = 0.0
        for i, tok in enumerate(tokens):
            total += self._logprobs(key, tuple(tokens[:i]))[tok]
        return total

    def enumerate(self, src, max_len):
        """Every complete output: EOS-terminated up to max_len, or max_len tokens without EOS."""
        content = [t for t in range(self.vocab_size) if t not in (PAD_ID, UNK_ID, BOS_ID, EOS_ID)]
        out = []
        for n in range(0, max_len):
            for body in itertools.product(content, repeat=n):
                seq = body + (EOS_ID,)
                out.append((seq, self.sequence_logprob(src, seq)))
        for body in itertools.product(content, repeat=max_len):
            out.append((body, self.sequence_logprob(src, body)))
        return out


@pytest.fixture
def table_model():
    return TableModel()


def tiny_config(**kw) -> ModelConfig:
    base = dict(src_vocab_size=10, tgt_vocab_size=9, d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                d_ff=16, dropout=0.0, max_len=12, seed=7)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def tiny_model64():
    return init_model(tiny_config(), dtype=torch.float64)
