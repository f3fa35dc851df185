import json

import pytest
import torch

from conftest import tiny_config
from lifelong_mnmt.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, verify_checkpoint
from lifelong_mnmt.lifelong import FisherDiag
from lifelong_mnmt.model import init_model, param_checksum
from lifelong_mnmt.optim import init_optimizer
from lifelong_mnmt.vocab import build_vocab


def _vocabs():
    src = build_vocab([["a", "b", "c", "a"], ["d", "e", "f"]], 100, "x")
    tgt = build_vocab([["p", "q", "r", "p", "s"]], 100, "y")
    return src, tgt


def _save(tmp_path, **kw):
    src, tgt = _vocabs()
    model = init_model(tiny_config(src_vocab_size=len(src), tgt_vocab_size=len(tgt)))
    path = tmp_path / "ckpt"
    save_checkpoint(path, model, src, tgt, **kw)
    return path, model, src, tgt


def test_roundtrip_bit_exact(tmp_path):
    path, model, src, tgt = _save(tmp_path, extra={"stage": 1})
    ck = load_checkpoint(path)
    for (n, a), (m, b) in zip(model.named_parameters(), ck.model.named_parameters()):
        assert n == m and torch.equal(a, b)
    assert param_checksum(ck.model) == param_checksum(model)
    assert ck.src_vocab == src and ck.tgt_vocab == tgt
    assert ck.extra == {"stage": 1}
    assert ck.opt is None and ck.fisher is None


def test_roundtrip_optimizer_and_fisher(tmp_path):
    src, tgt = _vocabs()
    model = init_model(tiny_config(src_vocab_size=len(src), tgt_vocab_size=len(tgt)))
    opt = init_optimizer(model)
    g = torch.Generator().manual_seed(0)
    for n, p in model.named_parameters():
        opt.exp_avg[n] = torch.randn(p.shape, generator=g)
        opt.exp_avg_sq[n] = torch.rand(p.shape, generator=g)
    opt.step = 17
    fisher = FisherDiag(
        {n: torch.rand(p.shape, generator=g) for n, p in model.named_parameters()},
        {n: p.detach().clone() for n, p in model.named_parameters()},
        42,
    )
    save_checkpoint(tmp_path / "c", model, src, tgt, opt=opt, fisher=fisher)
    ck = load_checkpoint(tmp_path / "c")
    assert ck.opt.step == 17
    for n in opt.exp_avg:
        assert torch.equal(ck.opt.exp_avg[n], opt.exp_avg[n])
        assert torch.equal(ck.opt.exp_avg_sq[n], opt.exp_avg_sq[n])
        assert torch.equal(ck.fisher.fisher[n], fisher.fisher[n])
        assert torch.equal(ck.fisher.anchor[n], fisher.anchor[n])
    assert ck.fisher.sample_count == 42


def test_version_mismatch(tmp_path):
    path, *_ = _save(tmp_path)
    manifest = json.loads((path / "manifest").read_text())
    manifest["format_version"] = 99
    (path / "manifest").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(path)


def test_truncated_blob_names_file(tmp_path):
    path, *_ = _save(tmp_path)
    data = (path / "params.bin").read_bytes()
    (path / "params.bin").write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="params.bin"):
        verify_checkpoint(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path)


def test_little_endian_float32_layout(tmp_path):
    import numpy as np

    path, model, *_ = _save(tmp_path)
    raw = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f4")
    first = next(model.parameters()).detach().numpy().ravel()
    assert np.array_equal(raw[: first.size], first)
