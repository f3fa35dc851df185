"""Small pre-norm Transformer encoder-decoder with explicit likelihood and gradients."""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .vocab import BOS_ID, EOS_ID, PAD_ID, Vocabulary


OUTPUT_BLOCK = 128


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    dropout: float = 0.1
    max_len: int = 64
    seed: int = 0
    shared_src_tgt_embeddings: bool = False

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.src_vocab_size < 4 or self.tgt_vocab_size < 4:
            raise ModelError("vocabulary sizes must be >= 4 (reserved tokens)")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError("dropout must be in [0, 1)")
        if self.shared_src_tgt_embeddings and self.src_vocab_size != self.tgt_vocab_size:
            raise ModelError("shared embeddings need equal source and target vocabulary sizes")

    def to_dict(self) -> dict:
        return asdict(self)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, query: Tensor, key: Tensor, mask: Tensor | None) -> Tensor:
        # mask: broadcastable to (B, 1, Tq, Tk), True where attention is blocked
        b, tq, d = query.shape
        tk = key.shape[1]
        h = self.n_heads
        q = self.q_proj(query).view(b, tq, h, d // h).transpose(1, 2)
        k = self.k_proj(key).view(b, tk, h, d // h).transpose(1, 2)
        v = self.v_proj(key).view(b, tk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if mask is not None:
            scores = scores.masked_fill(mask, float("-inf"))
        attn = self.dropout(torch.softmax(scores, dim=-1))
        return self.out_proj((attn @ v).transpose(1, 2).reshape(b, tq, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: Tensor, src_mask: Tensor) -> Tensor:
        h = self.norm1(x)
        x = x + self.dropout(self.self_attn(h, h, src_mask))
        return x + self.dropout(self.ff(self.norm2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.dropout)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y: Tensor, memory: Tensor, self_mask: Tensor, src_mask: Tensor) -> Tensor:
        h = self.norm1(y)
        y = y + self.dropout(self.self_attn(h, h, self_mask))
        y = y + self.dropout(self.cross_attn(self.norm2(y), memory, src_mask))
        return y + self.dropout(self.ff(self.norm3(y)))


def sinusoid_table(n_positions: int, d_model: int) -> Tensor:
    pos = torch.arange(n_positions, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float64) * (-math.log(10000.0) / d_model))
    table = torch.zeros(n_positions, d_model, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * div)
    table[:, 1::2] = torch.cos(pos * div)[:, : d_model // 2]
    return table


class Seq2SeqTransformer(nn.Module):
    """Encoder-decoder translation model; one instance is one parameter set theta."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config.validate()
        self.config = config
        d = config.d_model
        self.src_embed = nn.Embedding(config.src_vocab_size, d)
        self.tgt_embed = self.src_embed if config.shared_src_tgt_embeddings else nn.Embedding(config.tgt_vocab_size, d)
        self.encoder = nn.ModuleList(EncoderLayer(config) for _ in range(config.n_enc_layers))
        self.decoder = nn.ModuleList(DecoderLayer(config) for _ in range(config.n_dec_layers))
        self.enc_norm = nn.LayerNorm(d)
        self.dec_norm = nn.LayerNorm(d)
        self.output = nn.Linear(d, config.tgt_vocab_size)
        self.dropout = nn.Dropout(config.dropout)
        # framing adds one position (EOS on source, BOS on target)
        self.register_buffer("positions", sinusoid_table(config.max_len + 1, d).float(), persistent=False)

    @property
    def param_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def _embed(self, table: nn.Embedding, ids: Tensor) -> Tensor:
        x = table(ids) * math.sqrt(self.config.d_model)
        return self.dropout(x + self.positions[: ids.shape[1]].to(x.dtype))

    def encode(self, src: Tensor) -> tuple[Tensor, Tensor]:
        """Return encoder memory and the key-padding mask (B, 1, 1, S)."""
        src_mask = (src == PAD_ID)[:, None, None, :]
        x = self._embed(self.src_embed, src)
        for layer in self.encoder:
            x = layer(x, src_mask)
        return self.enc_norm(x), src_mask

    def decode(self, tgt_in: Tensor, memory: Tensor, src_mask: Tensor) -> Tensor:
        """Logits for every target position given the decoder input prefix."""
        t = tgt_in.shape[1]
        causal = torch.triu(torch.ones(t, t, dtype=torch.bool, device=tgt_in.device), 1)
        self_mask = causal[None, None] | (tgt_in == PAD_ID)[:, None, None, :]
        y = self._embed(self.tgt_embed, tgt_in)
        for layer in self.decoder:
            y = layer(y, memory, self_mask, src_mask)
        return self.project(self.dec_norm(y))

    def project(self, h: Tensor) -> Tensor:
        """Output logits, computed over fixed-size blocks of vocabulary rows.

        Every block is one matmul of the same shape, so a row's logit does not
        depend on how many rows the table has; this keeps old-token logits
        bit-identical after the vocabulary grows.
        """
        w, b = self.output.weight, self.output.bias
        v = w.shape[0]
        pad = (-v) % OUTPUT_BLOCK
        if pad:
            w = torch.cat([w, w.new_zeros(pad, w.shape[1])])
            b = torch.cat([b, b.new_zeros(pad)])
        blocks = [F.linear(h, w[i : i + OUTPUT_BLOCK], b[i : i + OUTPUT_BLOCK]) for i in range(0, v + pad, OUTPUT_BLOCK)]
        return torch.cat(blocks, dim=-1)[..., :v]

    def forward(self, src: Tensor, tgt_in: Tensor) -> Tensor:
        memory, src_mask = self.encode(src)
        return self.decode(tgt_in, memory, src_mask)

    def next_logprobs(self, memory: Tensor, src_mask: Tensor, prefixes: Tensor) -> Tensor:
        """Log-probabilities of the next token after each prefix (prefixes start with BOS)."""
        logits = self.decode(prefixes, memory, src_mask)[:, -1]
        return torch.log_softmax(logits.to(torch.float64), dim=-1)


def _row_init(rows: int, d_model: int, gen: torch.Generator) -> Tensor:
    return torch.randn(rows, d_model, generator=gen, dtype=torch.float64) * d_model**-0.5


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> Seq2SeqTransformer:
    """Seeded initialization; the same (config, seed) gives bit-identical parameters."""
    config.validate()
    model = Seq2SeqTransformer(config)
    gen = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("embed.weight") or name == "output.weight":
                p.copy_(_row_init(p.shape[0], p.shape[1], gen))
            elif "norm" in name:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif p.dim() == 2:
                bound = math.sqrt(6.0 / (p.shape[0] + p.shape[1]))
                p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
            else:
                p.zero_()
    return model.to(dtype).eval()


def expected_param_count(config: ModelConfig) -> int:
    d, f = config.d_model, config.d_ff
    attn = 4 * (d * d + d)
    ff = d * f + f + f * d + d
    enc = config.n_enc_layers * (attn + ff + 4 * d)
    dec = config.n_dec_layers * (2 * attn + ff + 6 * d)
    emb = config.src_vocab_size * d + (0 if config.shared_src_tgt_embeddings else config.tgt_vocab_size * d)
    return emb + enc + dec + 4 * d + config.tgt_vocab_size * (d + 1)


def param_checksum(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in model.state_dict().items():
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _check_ids(ids: Sequence[int], vocab_size: int, max_len: int, side: str) -> None:
    if len(ids) > max_len:
        raise ModelError(f"{side} sentence of length {len(ids)} exceeds max_len={max_len}")
    for i in ids:
        if not 0 <= i < vocab_size:
            raise ModelError(f"{side} index {i} out of range for vocabulary of size {vocab_size}")


def pad_batch(seqs: Sequence[Sequence[int]], device=None) -> Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), PAD_ID, dtype=torch.long, device=device)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


def make_batch(model: Seq2SeqTransformer, pairs: Sequence[tuple[Sequence[int], Sequence[int]]]):
    """Frame pairs as (source+EOS, BOS+target, target+EOS) padded tensors."""
    cfg = model.config
    for src, tgt in pairs:
        _check_ids(src, cfg.src_vocab_size, cfg.max_len, "source")
        _check_ids(tgt, cfg.tgt_vocab_size, cfg.max_len, "target")
        if len(tgt) == 0:
            raise ModelError("target sentence is empty")
    src = pad_batch([list(s) + [EOS_ID] for s, _ in pairs])
    tgt_in = pad_batch([[BOS_ID] + list(t) for _, t in pairs])
    tgt_out = pad_batch([list(t) + [EOS_ID] for _, t in pairs])
    return src, tgt_in, tgt_out


def encode_sources(model: Seq2SeqTransformer, sources: Sequence[Sequence[int]]) -> Tensor:
    cfg = model.config
    for s in sources:
        _check_ids(s, cfg.src_vocab_size, cfg.max_len, "source")
    return pad_batch([list(s) + [EOS_ID] for s in sources])


def token_losses(model, src, tgt_in, tgt_out, label_smoothing: float = 0.0) -> Tensor:
    logits = model(src, tgt_in)
    flat = F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        tgt_out.reshape(-1),
        ignore_index=PAD_ID,
        label_smoothing=label_smoothing,
        reduction="none",
    )
    return flat.view(tgt_out.shape)


def batch_loss(
    model: Seq2SeqTransformer,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    weights: Sequence[float] | None = None,
    label_smoothing: float = 0.0,
) -> Tensor:
    """Weighted mean token-level loss: sum_i w_i sum_t l_it / sum_i w_i n_i."""
    if not pairs:
        raise ModelError("empty batch")
    src, tgt_in, tgt_out = make_batch(model, pairs)
    losses = token_losses(model, src, tgt_in, tgt_out, label_smoothing)
    mask = (tgt_out != PAD_ID).to(losses.dtype)
    w = torch.ones(len(pairs), dtype=losses.dtype) if weights is None else torch.as_tensor(weights, dtype=losses.dtype)
    return (losses.sum(1) * w).sum() / ((mask.sum(1) * w).sum())


def loss_and_grads(
    model: Seq2SeqTransformer,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    weights: Sequence[float] | None = None,
    label_smoothing: float = 0.1,
    train: bool = True,
) -> tuple[float, dict[str, Tensor]]:
    model.train(train)
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, pairs, weights, label_smoothing)
    loss.backward()
    grads = {
        n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for n, p in model.named_parameters()
    }
    model.zero_grad(set_to_none=True)
    model.eval()
    return float(loss.detach()), grads


@torch.no_grad()
def sentence_logprob(model: Seq2SeqTransformer, src: Sequence[int], tgt: Sequence[int]) -> tuple[float, list[float]]:
    """Teacher-forced log p(tgt + EOS | src) and its per-token terms (eval mode)."""
    model.eval()
    s, ti, to = make_batch(model, [(src, tgt)])
    logp = torch.log_softmax(model(s, ti).to(torch.float64), dim=-1)[0]
    per_token = logp.gather(1, to[0][:, None])[:, 0].tolist()
    return float(sum(per_token)), per_token


def _grow_rows(old: Tensor, new_rows: int, d_model: int, gen: torch.Generator) -> Tensor:
    extra = _row_init(new_rows, d_model, gen).to(old.dtype)
    return torch.cat([old, extra], dim=0)


def expand_vocab(
    model: Seq2SeqTransformer,
    old_src: Vocabulary | None = None,
    new_src: Vocabulary | None = None,
    old_tgt: Vocabulary | None = None,
    new_tgt: Vocabulary | None = None,
) -> Seq2SeqTransformer:
    """Return a copy of ``model`` whose embedding/softmax tables follow the grown vocabularies.

    Old rows are copied bit-exactly; new rows come from a generator seeded by
    (config seed, old size, new size).
    """
    cfg = model.config
    src_size, tgt_size = cfg.src_vocab_size, cfg.tgt_vocab_size
    for old, new, size, side in ((old_src, new_src, src_size, "source"), (old_tgt, new_tgt, tgt_size, "target")):
        if new is None:
            continue
        if old is None or len(old) != size:
            raise ModelError(f"{side} vocabulary does not match the model's table size {size}")
        if new.tokens[: len(old)] != old.tokens:
            raise ModelError(f"new {side} vocabulary is not an append-only extension of the old one")
    new_src_size = len(new_src) if new_src is not None else src_size
    new_tgt_size = len(new_tgt) if new_tgt is not None else tgt_size
    if (new_src_size, new_tgt_size) == (src_size, tgt_size):
        return model
    new_cfg = ModelConfig(**{**cfg.to_dict(), "src_vocab_size": new_src_size, "tgt_vocab_size": new_tgt_size})
    dtype = next(model.parameters()).dtype
    grown = Seq2SeqTransformer(new_cfg).to(dtype)
    state = {k: v.clone() for k, v in model.state_dict().items()}
    d = cfg.d_model
    seed_src = int.from_bytes(hashlib.sha256(f"{cfg.seed}:src:{src_size}:{new_src_size}".encode()).digest()[:8], "little") >> 1
    seed_tgt = int.from_bytes(hashlib.sha256(f"{cfg.seed}:tgt:{tgt_size}:{new_tgt_size}".encode()).digest()[:8], "little") >> 1
    g_src = torch.Generator().manual_seed(seed_src)
    g_tgt = torch.Generator().manual_seed(seed_tgt)
    if new_src_size > src_size:
        state["src_embed.weight"] = _grow_rows(state["src_embed.weight"], new_src_size - src_size, d, g_src)
    if new_tgt_size > tgt_size:
        if not cfg.shared_src_tgt_embeddings:
            state["tgt_embed.weight"] = _grow_rows(state["tgt_embed.weight"], new_tgt_size - tgt_size, d, g_tgt)
        state["output.weight"] = _grow_rows(state["output.weight"], new_tgt_size - tgt_size, d, g_tgt)
        state["output.bias"] = torch.cat([state["output.bias"], torch.zeros(new_tgt_size - tgt_size, dtype=dtype)])
    if cfg.shared_src_tgt_embeddings:
        state["tgt_embed.weight"] = state["src_embed.weight"]
    grown.load_state_dict(state)
    return grown.eval()
