"""Checkpoint directories: JSON manifest, little-endian float32 blobs, vocabulary files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .lifelong import FisherDiag
from .model import ModelConfig, Seq2SeqTransformer
from .optim import OptimizerState
from .vocab import Vocabulary

FORMAT_VERSION = 1
MANIFEST = "manifest"
_DTYPE = np.dtype("<f4")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    model: Seq2SeqTransformer
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    opt: OptimizerState | None = None
    fisher: FisherDiag | None = None
    extra: dict = field(default_factory=dict)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_blob(path: Path, arrays: list[torch.Tensor]) -> None:
    with open(path, "wb") as fh:
        for a in arrays:
            fh.write(a.detach().cpu().numpy().astype(_DTYPE, copy=False).tobytes(order="C"))


def _read_blob(path: Path, shapes: list[list[int]]) -> list[torch.Tensor]:
    data = np.frombuffer(path.read_bytes(), dtype=_DTYPE)
    expected = sum(int(np.prod(s)) for s in shapes)
    if data.size != expected:
        raise CheckpointError(f"{path.name}: holds {data.size} floats, manifest declares {expected}")
    out, pos = [], 0
    for s in shapes:
        n = int(np.prod(s))
        out.append(torch.from_numpy(data[pos : pos + n].reshape(s).copy()))
        pos += n
    return out


def save_checkpoint(
    path: str | Path,
    model: Seq2SeqTransformer,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    opt: OptimizerState | None = None,
    fisher: FisherDiag | None = None,
    extra: dict | None = None,
) -> str:
    """Write the checkpoint directory and return the params.bin checksum."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in model.named_parameters()]
    params = dict(model.named_parameters())
    shapes = [list(params[n].shape) for n in names]
    blobs: dict[str, str] = {}
    _write_blob(path / "params.bin", [params[n] for n in names])
    blobs["params.bin"] = _sha256(path / "params.bin")
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "param_names": names,
        "param_shapes": shapes,
        "vocabs": {"src": "src.vocab", "tgt": "tgt.vocab"},
        "vocab_langs": {"src": src_vocab.lang, "tgt": tgt_vocab.lang},
        "extra": extra or {},
    }
    src_vocab.save(path / "src.vocab")
    tgt_vocab.save(path / "tgt.vocab")
    blobs["src.vocab"] = _sha256(path / "src.vocab")
    blobs["tgt.vocab"] = _sha256(path / "tgt.vocab")
    if opt is not None:
        _write_blob(path / "opt.bin", [opt.exp_avg[n] for n in names] + [opt.exp_avg_sq[n] for n in names])
        blobs["opt.bin"] = _sha256(path / "opt.bin")
        manifest["optimizer"] = opt.hyper()
    if fisher is not None:
        _write_blob(path / "fisher.bin", [fisher.fisher[n] for n in names] + [fisher.anchor[n] for n in names])
        blobs["fisher.bin"] = _sha256(path / "fisher.bin")
        manifest["fisher_sample_count"] = fisher.sample_count
    manifest["checksums"] = blobs
    (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return blobs["params.bin"]


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    if not (path / MANIFEST).exists():
        raise CheckpointError(f"{path}: no manifest")
    manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    return manifest


def verify_checkpoint(path: str | Path) -> dict:
    """Check every blob against its manifest checksum; returns the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    for name, digest in manifest["checksums"].items():
        if not (path / name).exists():
            raise CheckpointError(f"{path / name}: missing")
        if _sha256(path / name) != digest:
            raise CheckpointError(f"{path / name}: checksum mismatch")
    return manifest


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    manifest = verify_checkpoint(path)
    config = ModelConfig(**manifest["config"])
    names, shapes = manifest["param_names"], manifest["param_shapes"]
    model = Seq2SeqTransformer(config)
    params = dict(model.named_parameters())
    if sorted(names) != sorted(params):
        raise CheckpointError(f"{path}: parameter names do not match the architecture")
    with torch.no_grad():
        for n, t in zip(names, _read_blob(path / "params.bin", shapes)):
            params[n].copy_(t)
    model.eval()
    langs = manifest.get("vocab_langs", {})
    src_vocab = Vocabulary.load(path / manifest["vocabs"]["src"], langs.get("src"))
    tgt_vocab = Vocabulary.load(path / manifest["vocabs"]["tgt"], langs.get("tgt"))
    opt = None
    if "opt.bin" in manifest["checksums"]:
        arrays = _read_blob(path / "opt.bin", shapes + shapes)
        hyper = manifest["optimizer"]
        opt = OptimizerState(**hyper)
        opt.exp_avg = dict(zip(names, arrays[: len(names)]))
        opt.exp_avg_sq = dict(zip(names, arrays[len(names) :]))
    fisher = None
    if "fisher.bin" in manifest["checksums"]:
        arrays = _read_blob(path / "fisher.bin", shapes + shapes)
        fisher = FisherDiag(
            dict(zip(names, arrays[: len(names)])), dict(zip(names, arrays[len(names) :])), manifest["fisher_sample_count"]
        )
    return Checkpoint(model, src_vocab, tgt_vocab, opt, fisher, manifest.get("extra", {}))
