"""Lifelong multilingual NMT: knowledge-distillation methods against catastrophic forgetting, on synthetic tasks."""

from .corpus import ParallelCorpus, TaskSpec
from .decoding import DecodeConfig, beam_decode, greedy_decode, kbest_decode
from .evaluation import CFReport, CFRow, corpus_bleu
from .lifelong import LifelongHyper, LifelongState, learn_task, new_system
from .model import ModelConfig, Seq2SeqTransformer, init_model
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "CFReport",
    "CFRow",
    "DecodeConfig",
    "LifelongHyper",
    "LifelongState",
    "ModelConfig",
    "ParallelCorpus",
    "Seq2SeqTransformer",
    "TaskSpec",
    "TrainConfig",
    "beam_decode",
    "corpus_bleu",
    "greedy_decode",
    "init_model",
    "kbest_decode",
    "learn_task",
    "new_system",
]
