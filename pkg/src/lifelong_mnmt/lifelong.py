"""Continual-learning strategies for incremental multilingual translation.

Distillation sets are always built from the frozen pre-update model and then
mixed with the new task's authentic pairs in a single maximum-likelihood run.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .corpus import ParallelCorpus, TaskSpec
from .decoding import DecodeConfig, translate
from .evaluation import corpus_bleu, mean
from .model import ModelConfig, Seq2SeqTransformer, batch_loss, expand_vocab, init_model, param_checksum
from .training import TrainConfig, derive_seed, encode_corpora, train_mixture
from .vocab import (
    RankMapping,
    Vocabulary,
    add_indicator,
    apply_mapping,
    build_rank_mapping,
    build_vocab,
    indicator_token,
    is_indicator,
    union_vocab,
)

log = logging.getLogger(__name__)

SCENARIOS = ("one2many", "many2one")
METHODS = ("finetune", "joint", "ewc", "multi_distill", "direct_distill", "pseudo_distill", "reverse_distill")
SCENARIO_METHODS = {
    "one2many": ("finetune", "joint", "ewc", "multi_distill"),
    "many2one": ("finetune", "joint", "ewc", "direct_distill", "pseudo_distill", "reverse_distill"),
}


class MethodError(ValueError):
    pass


def check_method(scenario: str, method: str) -> None:
    if scenario not in SCENARIOS:
        raise MethodError(f"unknown scenario {scenario!r}")
    if method not in METHODS:
        raise MethodError(f"unknown method {method!r}")
    if method not in SCENARIO_METHODS[scenario]:
        raise MethodError(f"method {method!r} is not applicable to the {scenario} scenario")


# ---------------------------------------------------------------- EWC


@dataclass
class FisherDiag:
    fisher: dict[str, torch.Tensor]
    anchor: dict[str, torch.Tensor]
    sample_count: int


def compute_fisher(
    model: Seq2SeqTransformer,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    sample_cap: int = 1000,
) -> FisherDiag:
    """Diagonal empirical Fisher: mean squared gradient of per-sentence NLL over the first ``sample_cap`` pairs."""
    if not pairs:
        raise ValueError("cannot compute Fisher information on an empty corpus")
    pairs = list(pairs)[:sample_cap]
    params = dict(model.named_parameters())
    fisher = {n: torch.zeros_like(p) for n, p in params.items()}
    model.eval()
    for src, tgt in pairs:
        model.zero_grad(set_to_none=True)
        nll = batch_loss(model, [(src, tgt)]) * (len(tgt) + 1)
        nll.backward()
        for n, p in params.items():
            if p.grad is not None:
                fisher[n] += p.grad.detach() ** 2
    model.zero_grad(set_to_none=True)
    for n in fisher:
        fisher[n] /= len(pairs)
    anchor = {n: p.detach().clone() for n, p in params.items()}
    return FisherDiag(fisher, anchor, len(pairs))


def _pad_rows(t: torch.Tensor, shape: torch.Size) -> torch.Tensor:
    if t.shape == shape:
        return t
    if t.shape[1:] != shape[1:] or t.shape[0] > shape[0]:
        raise ValueError(f"cannot grow {tuple(t.shape)} to {tuple(shape)}")
    return torch.cat([t, torch.zeros((shape[0] - t.shape[0], *shape[1:]), dtype=t.dtype)], dim=0)


def fit_fisher(fd: FisherDiag, model: Seq2SeqTransformer) -> FisherDiag:
    """Grow Fisher/anchor rows to a vocabulary-expanded model (new rows get zero importance)."""
    params = dict(model.named_parameters())
    fisher = {n: _pad_rows(fd.fisher[n], p.shape) for n, p in params.items()}
    anchor = {}
    for n, p in params.items():
        a = fd.anchor[n]
        anchor[n] = a if a.shape == p.shape else torch.cat([a, p.detach()[a.shape[0]:]], dim=0)
    return FisherDiag(fisher, anchor, fd.sample_count)


def accumulate_fisher(old: FisherDiag | None, new: FisherDiag) -> FisherDiag:
    """Sum importances across tasks; the anchor collapses to the latest parameters."""
    if old is None:
        return new
    fisher = {n: new.fisher[n] + _pad_rows(old.fisher[n], new.fisher[n].shape) for n in new.fisher}
    return FisherDiag(fisher, new.anchor, old.sample_count + new.sample_count)


def ewc_penalty(model: Seq2SeqTransformer, fd: FisherDiag, lam: float) -> torch.Tensor:
    total = None
    for n, p in model.named_parameters():
        f, a = fd.fisher[n], fd.anchor[n]
        if f.shape != p.shape or a.shape != p.shape:
            raise ValueError(f"Fisher shape {tuple(f.shape)} does not match parameter {n} {tuple(p.shape)}")
        term = (f.to(p.dtype) * (p - a.to(p.dtype)) ** 2).sum()
        total = term if total is None else total + term
    return 0.5 * lam * total


def ewc_loss(model: Seq2SeqTransformer, fd: FisherDiag, base_nll: torch.Tensor, lam: float = 100.0) -> torch.Tensor:
    """NLL + (lam/2) * sum_i F_i (theta_i - theta*_i)^2."""
    return base_nll + ewc_penalty(model, fd, lam)


# ------------------------------------------------------- system state


@dataclass
class Translator:
    """A model together with the vocabularies indexing its tables."""

    model: Seq2SeqTransformer
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary

    def translate(self, sentences, config: DecodeConfig):
        return translate(self.model, sentences, self.src_vocab, self.tgt_vocab, config)

    def checksum(self) -> str:
        return param_checksum(self.model)


@dataclass
class LifelongHyper:
    train: TrainConfig = field(default_factory=TrainConfig)
    distill_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="beam", beam_size=4, max_len=32))
    dev_decode: DecodeConfig = field(default_factory=lambda: DecodeConfig(mode="greedy", max_len=32))
    vocab_size: int = 30000
    ewc_lambda: float = 100.0
    fisher_samples: int = 1000
    many2one_indicators: bool = False


@dataclass
class LifelongState:
    scenario: str
    model_config: ModelConfig
    forward: Translator | None = None
    reverse: Translator | None = None
    tasks: list[TaskSpec] = field(default_factory=list)
    lang_vocabs: dict[str, Vocabulary] = field(default_factory=dict)
    fisher: FisherDiag | None = None
    use_reverse: bool = False

    @property
    def learned_langs(self) -> list[str]:
        """The languages that vary across tasks, in arrival order."""
        return [t.tgt_lang if self.scenario == "one2many" else t.src_lang for t in self.tasks]

    @property
    def shared_lang(self) -> str | None:
        if not self.tasks:
            return None
        t = self.tasks[0]
        return t.src_lang if self.scenario == "one2many" else t.tgt_lang


def source_form(state: LifelongState, task: TaskSpec, sentence: Sequence[str], hyper: LifelongHyper, vocab=None) -> list[str]:
    """Source side as the forward model sees it (with an indicator where the scenario uses one)."""
    if state.scenario == "one2many" or hyper.many2one_indicators:
        return add_indicator(sentence, task.src_lang, task.tgt_lang, vocab)
    return list(sentence)


def forward_corpus(state: LifelongState, task: TaskSpec, corpus: ParallelCorpus, hyper: LifelongHyper) -> ParallelCorpus:
    pairs = [(source_form(state, task, s, hyper), t) for s, t in corpus.pairs]
    return ParallelCorpus(corpus.src_lang, corpus.tgt_lang, pairs, corpus.weight, corpus.method, corpus.decode_mode)


def reverse_corpus(corpus: ParallelCorpus) -> ParallelCorpus:
    """Y => X direction with the ``<Y2X>`` indicator on the source."""
    pairs = [(add_indicator(t, corpus.tgt_lang, corpus.src_lang), s) for s, t in corpus.pairs]
    return ParallelCorpus(corpus.tgt_lang, corpus.src_lang, pairs, corpus.weight, corpus.method, corpus.decode_mode)


def _vocab_for(sentences, lang: str, size: int, indicators: Sequence[str] = ()) -> Vocabulary:
    """Frequency vocabulary plus every indicator given or found at sentence starts."""
    sentences = list(sentences)
    v = build_vocab(sentences, size, lang)
    for tok in [*indicators, *(s[0] for s in sentences if s and is_indicator(s[0]))]:
        v.add_reserved(tok)
    return v


def _grow(old: Translator | None, src_task: Vocabulary, tgt_task: Vocabulary, config: ModelConfig) -> Translator:
    """Union vocabularies and expand (a copy of) the old model, or initialize a fresh one."""
    if old is None:
        cfg = ModelConfig(**{**config.to_dict(), "src_vocab_size": len(src_task), "tgt_vocab_size": len(tgt_task)})
        return Translator(init_model(cfg), src_task.copy(), tgt_task.copy())
    src = union_vocab(old.src_vocab, src_task)
    tgt = union_vocab(old.tgt_vocab, tgt_task)
    model = expand_vocab(copy.deepcopy(old.model), old.src_vocab, src, old.tgt_vocab, tgt)
    return Translator(model, src, tgt)


# ------------------------------------------------- distillation sets


def _distill_pairs(teacher: Translator, sources: Sequence[Sequence[str]], decode: DecodeConfig, pair_sources=None):
    """Decode ``sources`` and pair each non-empty hypothesis with its (student-side) source."""
    pair_sources = sources if pair_sources is None else pair_sources
    outs = teacher.translate(sources, decode)
    pairs, dropped = [], 0
    for src, hyps in zip(pair_sources, outs):
        for toks, _ in hyps:
            if toks:
                pairs.append((list(src), toks))
            else:
                dropped += 1
    if dropped:
        log.warning("dropped %d empty distilled hypotheses", dropped)
    return pairs


def _kbest_weight(decode: DecodeConfig) -> float:
    return 1.0 / decode.k_best if decode.mode == "kbest" else 1.0


def build_one2many_distill_set(
    teacher: Translator,
    new_train: ParallelCorpus,
    learned_tgt_langs: Sequence[str],
    decode: DecodeConfig,
) -> list[ParallelCorpus]:
    """For each learned target language: tag the new sources with its indicator and decode them with the teacher."""
    src_lang = new_train.src_lang
    out = []
    for lang in learned_tgt_langs:
        ind = indicator_token(src_lang, lang)
        if ind not in teacher.src_vocab:
            raise MethodError(f"teacher has no indicator {ind}")
        tagged = [add_indicator(s, src_lang, lang) for s in new_train.sources]
        pairs = _distill_pairs(teacher, tagged, decode)
        out.append(ParallelCorpus(src_lang, lang, pairs, _kbest_weight(decode), "multilingual", decode.mode))
    return out


def build_many2one_distill_set(
    teacher: Translator,
    new_train: ParallelCorpus,
    learned_src_langs: Sequence[str],
    mode: str,
    decode: DecodeConfig,
    mappings: dict[str, RankMapping] | None = None,
    indicators: bool = False,
) -> list[ParallelCorpus]:
    """``direct``: feed the new sources as-is (they encode to mostly UNK against the old vocabulary).
    ``pseudo``: rewrite them into each learned language by frequency rank first."""
    tgt_lang = new_train.tgt_lang
    new_lang = new_train.src_lang
    sources = new_train.sources
    if mode == "direct":
        inputs = [add_indicator(s, new_lang, tgt_lang) if indicators else list(s) for s in sources]
        pairs = _distill_pairs(teacher, inputs, decode)
        return [ParallelCorpus(new_lang, tgt_lang, pairs, _kbest_weight(decode), "direct", decode.mode)]
    if mode != "pseudo":
        raise MethodError(f"unknown many-to-one distillation mode {mode!r}")
    out = []
    for lang in learned_src_langs:
        if not mappings or lang not in mappings:
            raise MethodError(f"pseudo distillation needs a rank mapping {new_lang}->{lang}")
        ind = indicator_token(lang, tgt_lang) if indicators else None
        pseudo = [apply_mapping(s, mappings[lang], ind) for s in sources]
        pairs = _distill_pairs(teacher, pseudo, decode)
        out.append(ParallelCorpus(lang, tgt_lang, pairs, _kbest_weight(decode), "pseudo", decode.mode))
    return out


def build_reverse_distill_set(
    reverse_teacher: Translator,
    new_train: ParallelCorpus,
    learned_src_langs: Sequence[str],
    decode: DecodeConfig,
    indicators: bool = False,
) -> tuple[list[ParallelCorpus], list[ParallelCorpus]]:
    """Back-translate the new targets into every learned source language.

    Returns (forward corpora X_i => Y with authentic Y, reverse corpora Y => X_i).
    """
    tgt_lang = new_train.tgt_lang
    targets = new_train.targets
    forward, reverse = [], []
    for lang in learned_src_langs:
        ind = indicator_token(tgt_lang, lang)
        if ind not in reverse_teacher.src_vocab:
            raise MethodError(f"reverse teacher has no indicator {ind}")
        tagged = [add_indicator(y, tgt_lang, lang) for y in targets]
        back = _distill_pairs(reverse_teacher, tagged, decode, pair_sources=targets)
        w = _kbest_weight(decode)
        fwd_pairs = [(add_indicator(x, lang, tgt_lang) if indicators else x, y) for y, x in back]
        forward.append(ParallelCorpus(lang, tgt_lang, fwd_pairs, w, "reverse", decode.mode))
        rev_pairs = [(add_indicator(y, tgt_lang, lang), x) for y, x in back]
        reverse.append(ParallelCorpus(tgt_lang, lang, rev_pairs, w, "reverse", decode.mode))
    return forward, reverse


# ------------------------------------------------------ learn a task

EpochHook = Callable[[str, int, int, dict[str, float]], None]


def dev_bleu(translator: Translator, state: LifelongState, tasks: Sequence[TaskSpec], hyper: LifelongHyper) -> dict[str, float]:
    out = {}
    for task in tasks:
        dev = task.dev
        sources = [source_form(state, task, s, hyper) for s in dev.sources]
        hyps = translator.translate(sources, hyper.dev_decode)
        out[task.task_id] = corpus_bleu([h[0][0] for h in hyps], dev.targets).bleu
    return out


@dataclass
class TaskOutcome:
    """Side products of one ``learn_task`` call, kept for provenance."""

    distilled: list[ParallelCorpus] = field(default_factory=list)
    reverse_distilled: list[ParallelCorpus] = field(default_factory=list)
    teacher_checksum: str = ""
    reverse_teacher_checksum: str = ""
    mappings: dict[str, RankMapping] = field(default_factory=dict)


def build_distill_sets(
    state: LifelongState, task: TaskSpec, method: str, hyper: LifelongHyper, lang_vocab: Vocabulary | None = None
) -> TaskOutcome:
    """Distilled corpora ``method`` mixes into the training of ``task``, built from the frozen current model(s)."""
    outcome = TaskOutcome()
    teacher = state.forward
    if teacher is None:
        return outcome
    train = task.train
    learned = list(state.learned_langs)
    indicators = state.scenario == "one2many" or hyper.many2one_indicators
    if lang_vocab is None:
        new_lang = task.tgt_lang if state.scenario == "one2many" else task.src_lang
        lang_vocab = build_vocab(train.sources if state.scenario == "many2one" else train.targets, hyper.vocab_size, new_lang)
    outcome.teacher_checksum = teacher.checksum()
    if method == "multi_distill":
        outcome.distilled = build_one2many_distill_set(teacher, train, learned, hyper.distill_decode)
    elif method == "direct_distill":
        outcome.distilled = build_many2one_distill_set(teacher, train, learned, "direct", hyper.distill_decode, indicators=indicators)
    elif method == "pseudo_distill":
        outcome.mappings = {lang: build_rank_mapping(lang_vocab, state.lang_vocabs[lang]) for lang in learned}
        outcome.distilled = build_many2one_distill_set(
            teacher, train, learned, "pseudo", hyper.distill_decode, outcome.mappings, indicators
        )
    elif method == "reverse_distill":
        if state.reverse is None:
            raise MethodError("reverse distillation needs a reverse model")
        outcome.reverse_teacher_checksum = state.reverse.checksum()
        outcome.distilled, outcome.reverse_distilled = build_reverse_distill_set(
            state.reverse, train, learned, hyper.distill_decode, indicators
        )
        if state.reverse.checksum() != outcome.reverse_teacher_checksum:
            raise RuntimeError("reverse teacher parameters changed during distillation")
    if teacher.checksum() != outcome.teacher_checksum:
        raise RuntimeError("teacher parameters changed during distillation")
    return outcome


def learn_task(
    state: LifelongState,
    task: TaskSpec,
    method: str,
    hyper: LifelongHyper,
    seed: int = 0,
    on_epoch: EpochHook | None = None,
    joint_data: Sequence[TaskSpec] | None = None,
) -> tuple[LifelongState, TaskOutcome]:
    """Learn ``task`` on top of ``state`` and return the new state (the input state is not modified)."""
    check_method(state.scenario, method)
    if state.tasks:
        shared = task.src_lang if state.scenario == "one2many" else task.tgt_lang
        if shared != state.shared_lang:
            raise MethodError(f"task {task.task_id} does not share language {state.shared_lang}")
    new_lang = task.tgt_lang if state.scenario == "one2many" else task.src_lang
    if new_lang in state.learned_langs:
        raise MethodError(f"language {new_lang} was already learned")
    if method == "joint" and joint_data is None:
        raise MethodError("joint training needs the raw corpora of all previous tasks")
    if state.use_reverse and state.scenario != "many2one":
        raise MethodError("a reverse model only exists in the many-to-one scenario")

    train = task.train
    indicators = state.scenario == "one2many" or hyper.many2one_indicators

    # vocabularies of the new task; per-language sorted vocabulary persisted for later rank mappings
    lang_vocab = build_vocab(train.sources if state.scenario == "many2one" else train.targets, hyper.vocab_size, new_lang)
    src_inds = [indicator_token(task.src_lang, task.tgt_lang)] if indicators else []
    src_task_vocab = _vocab_for(train.sources, task.src_lang, hyper.vocab_size, src_inds)
    tgt_task_vocab = _vocab_for(train.targets, task.tgt_lang, hyper.vocab_size)

    teacher = state.forward
    outcome = build_distill_sets(state, task, method, hyper, lang_vocab)
    distilled, rev_distilled = outcome.distilled, outcome.reverse_distilled

    # corpora of this stage
    new_fwd = forward_corpus(state, task, train, hyper)
    corpora = list(distilled) + [new_fwd]
    if method == "joint":
        corpora = [forward_corpus(state, t, t.train, hyper) for t in joint_data] + [new_fwd]
        src_task_vocab = _vocab_for([s for c in corpora for s in c.sources], task.src_lang, hyper.vocab_size)
        tgt_task_vocab = _vocab_for([t for c in corpora for t in c.targets], task.tgt_lang, hyper.vocab_size)

    # union vocabularies and expand the student before training
    student = _grow(teacher, src_task_vocab, tgt_task_vocab, state.model_config)

    all_tasks = list(state.tasks) + [task]
    stage = len(all_tasks)
    selection_tasks = all_tasks if method == "joint" else [task]

    def epoch_hook(epoch: int, model: Seq2SeqTransformer) -> float:
        tr = Translator(model, student.src_vocab, student.tgt_vocab)
        scores = dev_bleu(tr, state, all_tasks, hyper)
        if on_epoch is not None:
            on_epoch(method, stage, epoch, scores)
        return mean(scores[t.task_id] for t in selection_tasks)

    penalty = None
    if method == "ewc" and state.fisher is not None:
        fd = fit_fisher(state.fisher, student.model)
        penalty = lambda m: ewc_penalty(m, fd, hyper.ewc_lambda)  # noqa: E731

    train_mixture(
        student.model, corpora, student.src_vocab, student.tgt_vocab, hyper.train,
        seed=derive_seed(seed, "forward"), on_epoch=epoch_hook, penalty=penalty,
    )

    new_state = LifelongState(
        scenario=state.scenario,
        model_config=state.model_config,
        forward=student,
        reverse=state.reverse,
        tasks=all_tasks,
        lang_vocabs={**state.lang_vocabs, new_lang: lang_vocab},
        fisher=state.fisher,
        use_reverse=state.use_reverse,
    )

    if method == "ewc":
        new_state = with_fisher(new_state, hyper)

    if state.use_reverse:
        new_state.reverse = _update_reverse(state, task, train, rev_distilled, hyper, seed)
    return new_state, outcome


def _update_reverse(
    state: LifelongState,
    task: TaskSpec,
    train: ParallelCorpus,
    rev_distilled: Sequence[ParallelCorpus],
    hyper: LifelongHyper,
    seed: int,
) -> Translator:
    """Train the reverse (one-to-many) student on back-translated pairs plus the new reverse pairs."""
    new_rev = reverse_corpus(train)
    src_vocab = _vocab_for(new_rev.sources, task.tgt_lang, hyper.vocab_size, [indicator_token(task.tgt_lang, task.src_lang)])
    tgt_vocab = _vocab_for(new_rev.targets, task.src_lang, hyper.vocab_size)
    student = _grow(state.reverse, src_vocab, tgt_vocab, state.model_config)
    train_mixture(
        student.model, list(rev_distilled) + [new_rev], student.src_vocab, student.tgt_vocab, hyper.train,
        seed=derive_seed(seed, "reverse"),
    )
    return student


def bootstrap_reverse(state: LifelongState, hyper: LifelongHyper, seed: int = 0) -> LifelongState:
    """Give a one-task many-to-one system its reverse model, trained on that task's raw pairs."""
    if state.scenario != "many2one" or len(state.tasks) != 1:
        raise MethodError("a reverse model is bootstrapped from the first many-to-one task only")
    task = state.tasks[0]
    empty = LifelongState(state.scenario, state.model_config)
    reverse = _update_reverse(empty, task, task.train, [], hyper, seed)
    return dataclasses.replace(state, reverse=reverse, use_reverse=True)


def with_fisher(state: LifelongState, hyper: LifelongHyper) -> LifelongState:
    """Add the newest task's Fisher diagonal to the store, as an EWC stage does after training."""
    task = state.tasks[-1]
    new_fwd = forward_corpus(state, task, task.train, hyper)
    pairs, _ = encode_corpora([new_fwd], state.forward.src_vocab, state.forward.tgt_vocab)
    fisher = accumulate_fisher(state.fisher, compute_fisher(state.forward.model, pairs, hyper.fisher_samples))
    return dataclasses.replace(state, fisher=fisher)


def new_system(scenario: str, model_config: ModelConfig, use_reverse: bool = False) -> LifelongState:
    if scenario not in SCENARIOS:
        raise MethodError(f"unknown scenario {scenario!r}")
    return LifelongState(scenario, model_config, use_reverse=use_reverse)

