"""Sequential-task experiment runner with per-stage checkpoints, resumption and provenance.

Output layout under the run directory::

    run.json                      resolved config plus CLI overrides
    tasks/<task_id>/              generated synthetic corpora (synthetic configs only)
    stage1/                       first task trained from scratch, shared by every method
    stage1-reverse/               reverse model bootstrapped from the first task (reverse_distill)
    single/<task_id>/             single-task baselines used for Delta
    <method>/stage<k>/            state after task k: checkpoints, vocabularies, distilled sets, row.json
    <method>/curves.jsonl         per-epoch dev BLEU
    report.json, report.txt, curves.jsonl

Every stage derives its seed from the global seed and the stage index alone,
so adding or removing a method never changes another method's randomness.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import shutil
from pathlib import Path
from typing import Sequence

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .corpus import TaskSpec
from .decoding import DecodeConfig
from .evaluation import CFReport, CFRow, CurveLog, corpus_bleu, exact_match, read_curves
from .lifelong import (
    LifelongHyper,
    LifelongState,
    TaskOutcome,
    Translator,
    bootstrap_reverse,
    build_distill_sets,
    learn_task,
    new_system,
    source_form,
    with_fisher,
)
from .model import ModelConfig
from .synthetic import gen_task
from .training import derive_seed
from .vocab import Vocabulary

log = logging.getLogger(__name__)

SHARED = "stage1"
SINGLE = "single"
ROW = "row.json"


class RunError(RuntimeError):
    """A stage failed; the message names the stage and the last good checkpoint."""


class RunExistsError(ValueError):
    pass


def stage_seed(seed: int, stage: int) -> int:
    return derive_seed(seed, "stage", stage)


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ------------------------------------------------------------- tasks


def gen_synthetic(cfg: ExperimentConfig) -> list[TaskSpec]:
    """Materialize the config's synthetic tasks (idempotent per task manifest)."""
    return [gen_task(spec, directory) for spec, directory in cfg.synthetic_tasks()]


def prepare_tasks(cfg: ExperimentConfig) -> list[TaskSpec]:
    if cfg.synthetic is not None:
        return gen_synthetic(cfg)
    return cfg.task_specs()


# ------------------------------------------------------- state on disk


def save_state(directory: Path, state: LifelongState) -> dict:
    """Checkpoint every model of ``state``; returns the checksums written."""
    directory.mkdir(parents=True, exist_ok=True)
    sums = {}
    fwd = state.forward
    sums["forward"] = save_checkpoint(
        directory / "forward", fwd.model, fwd.src_vocab, fwd.tgt_vocab,
        fisher=state.fisher, extra={"param_checksum": fwd.checksum()},
    )
    if state.reverse is not None:
        rev = state.reverse
        sums["reverse"] = save_checkpoint(
            directory / "reverse", rev.model, rev.src_vocab, rev.tgt_vocab, extra={"param_checksum": rev.checksum()}
        )
    vdir = directory / "lang_vocabs"
    vdir.mkdir(exist_ok=True)
    for lang, v in state.lang_vocabs.items():
        v.save(vdir / f"{lang}.vocab")
    _write_json(
        directory / "state.json",
        {
            "scenario": state.scenario,
            "model_config": state.model_config.to_dict(),
            "tasks": [t.task_id for t in state.tasks],
            "langs": list(state.lang_vocabs),
            "use_reverse": state.use_reverse,
            "checksums": sums,
        },
    )
    return sums


def load_state(directory: Path, tasks: Sequence[TaskSpec]) -> LifelongState:
    meta = json.loads((directory / "state.json").read_text(encoding="utf-8"))
    by_id = {t.task_id: t for t in tasks}
    fwd = load_checkpoint(directory / "forward")
    reverse = None
    if (directory / "reverse").exists():
        rev = load_checkpoint(directory / "reverse")
        reverse = Translator(rev.model, rev.src_vocab, rev.tgt_vocab)
    return LifelongState(
        scenario=meta["scenario"],
        model_config=ModelConfig(**meta["model_config"]),
        forward=Translator(fwd.model, fwd.src_vocab, fwd.tgt_vocab),
        reverse=reverse,
        tasks=[by_id[t] for t in meta["tasks"]],
        lang_vocabs={lang: Vocabulary.load(directory / "lang_vocabs" / f"{lang}.vocab", lang) for lang in meta["langs"]},
        fisher=fwd.fisher,
        use_reverse=meta["use_reverse"],
    )


def save_distilled(directory: Path, outcome: TaskOutcome, method: str, decode: DecodeConfig) -> None:
    """Distilled corpora as plain file pairs plus a provenance manifest."""
    if not outcome.distilled and not outcome.reverse_distilled:
        return
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for prefix, corpora in (("fwd", outcome.distilled), ("rev", outcome.reverse_distilled)):
        for i, c in enumerate(corpora):
            name = f"{prefix}{i}"
            src, tgt = c.save(directory, name)
            entries.append({
                "name": name, "src_lang": c.src_lang, "tgt_lang": c.tgt_lang, "pairs": len(c),
                "weight": c.weight, "files": {src.name: _sha256(src), tgt.name: _sha256(tgt)},
            })
    mappings = {}
    for lang, m in outcome.mappings.items():
        path = directory / f"mapping.{m.from_lang}-{lang}"
        m.save(path)
        mappings[lang] = {"file": path.name, "sha256": _sha256(path)}
    _write_json(directory / "provenance.json", {
        "method": method,
        "decode": dataclasses.asdict(decode),
        "teacher_checksum": outcome.teacher_checksum,
        "reverse_teacher_checksum": outcome.reverse_teacher_checksum,
        "mappings": mappings,
        "corpora": entries,
    })


# --------------------------------------------------------- evaluation


def evaluate_stage(
    state: LifelongState, decode: DecodeConfig, hyper: LifelongHyper, split: str = "test"
) -> tuple[dict[str, float], dict[str, float]]:
    """BLEU and exact-match per learned task (arrival order) on ``split``."""
    bleu, exact = {}, {}
    for task in state.tasks:
        corpus = task.split(split)
        sources = [source_form(state, task, s, hyper) for s in corpus.sources]
        hyps = [h[0][0] for h in state.forward.translate(sources, decode)]
        bleu[task.task_id] = corpus_bleu(hyps, corpus.targets).bleu
        exact[task.task_id] = exact_match(hyps, corpus.targets)
    return bleu, exact


# ------------------------------------------------------------ the run


def completed_stages(method_dir: Path) -> list[int]:
    if not method_dir.is_dir():
        return []
    out = []
    for d in method_dir.glob("stage*"):
        if d.name[5:].isdigit() and (d / ROW).exists():
            out.append(int(d.name[5:]))
    return sorted(out)


class Runner:
    def __init__(self, cfg: ExperimentConfig, resume: bool = False, methods: Sequence[str] | None = None):
        self.cfg = cfg
        self.out = cfg.out
        self.resume = resume
        self.methods = list(methods) if methods else cfg.methods
        self.hyper = cfg.hyper()
        self.eval_decode = cfg.decode_config("eval_decode")
        self.tasks: list[TaskSpec] = []

    # -- bookkeeping

    def _check_run_dir(self) -> None:
        meta = self.out / "run.json"
        if meta.exists():
            old = json.loads(meta.read_text(encoding="utf-8"))
            same = {**old.get("config", {}), "out": None} == {**self.cfg.to_dict(), "out": None}
            if self.resume and not same:
                raise RunExistsError(f"{self.out} holds a run with a different config; refusing to resume")
            if not self.resume and any(completed_stages(self.out / m) for m in self.methods):
                raise RunExistsError(f"{self.out} already holds results; pass --resume to continue")
        _write_json(meta, {"config": self.cfg.to_dict(), "overrides": self.cfg.overrides, "methods": self.methods})

    def _row(self, method: str, state: LifelongState) -> CFRow:
        bleu, exact = evaluate_stage(state, self.eval_decode, self.hyper)
        return CFRow(method, len(state.tasks), bleu, exact, checkpoint=state.forward.checksum())

    def _hook(self, curves: CurveLog, name: str):
        def on_epoch(method: str, stage: int, epoch: int, scores: dict[str, float]) -> None:
            curves.log_curve(name, stage, epoch, scores)
            log.info("%s stage %d epoch %d dev %s", name, stage, epoch, {k: round(v, 2) for k, v in scores.items()})

        return on_epoch

    # -- shared first stage

    def _stage1(self) -> LifelongState:
        d = self.out / SHARED
        if (d / ROW).exists():
            return load_state(d, self.tasks)
        if d.exists():
            shutil.rmtree(d)
        curves = CurveLog(d / "curves.jsonl")
        log.info("stage 1: training %s from scratch", self.tasks[0].task_id)
        state, _ = learn_task(
            new_system(self.cfg.scenario, self.cfg.model_config()), self.tasks[0], "finetune", self.hyper,
            seed=stage_seed(self.cfg.seed, 1), on_epoch=self._hook(curves, SHARED),
        )
        save_state(d, state)
        _write_json(d / ROW, self._row(SHARED, state).to_dict())
        return state

    def _reverse_bootstrap(self, s1: LifelongState) -> LifelongState:
        d = self.out / f"{SHARED}-reverse"
        if (d / ROW).exists():
            return load_state(d, self.tasks)
        log.info("stage 1: bootstrapping the reverse model")
        state = bootstrap_reverse(s1, self.hyper, seed=stage_seed(self.cfg.seed, 1))
        save_state(d, state)
        _write_json(d / ROW, {"reverse_checksum": state.reverse.checksum()})
        return state

    def _method_start(self, method: str, s1: LifelongState) -> LifelongState:
        if method == "reverse_distill":
            return self._reverse_bootstrap(s1)
        if method == "ewc":
            return with_fisher(s1, self.hyper)
        return s1

    # -- baselines

    def _single(self) -> dict[str, float]:
        """Test BLEU of one model trained from scratch per task."""
        out = {}
        for i, task in enumerate(self.tasks, 1):
            d = self.out / SINGLE / task.task_id
            if (d / ROW).exists():
                out[task.task_id] = json.loads((d / ROW).read_text(encoding="utf-8"))["bleu"][task.task_id]
                continue
            if i == 1:
                row = json.loads((self.out / SHARED / ROW).read_text(encoding="utf-8"))
                _write_json(d / ROW, {**row, "method": SINGLE})
                out[task.task_id] = row["bleu"][task.task_id]
                continue
            log.info("single baseline: %s", task.task_id)
            state, _ = learn_task(
                new_system(self.cfg.scenario, self.cfg.model_config()), task, "finetune", self.hyper,
                seed=derive_seed(self.cfg.seed, SINGLE, i),
            )
            save_state(d, state)
            row = self._row(SINGLE, state)
            _write_json(d / ROW, row.to_dict())
            out[task.task_id] = row.bleu[task.task_id]
        return out

    # -- one method

    def _run_method(self, method: str, s1: LifelongState, stop_after: int | None) -> None:
        mdir = self.out / method
        curves_path = mdir / "curves.jsonl"
        done = completed_stages(mdir)
        last = max(done) if done else 0
        curves = CurveLog(curves_path)
        curves.drop_after(method, last)
        for d in mdir.glob("stage*") if mdir.exists() else []:
            if d.name[5:].isdigit() and int(d.name[5:]) > last:
                shutil.rmtree(d)
        if last == 0:
            state = self._method_start(method, s1)
            for rec in read_curves(self.out / SHARED / "curves.jsonl"):
                curves.log_curve(method, rec.stage, rec.epoch, rec.dev_bleu)
            save_state(mdir / "stage1", state)
            row = json.loads((self.out / SHARED / ROW).read_text(encoding="utf-8"))
            _write_json(mdir / "stage1" / ROW, {**row, "method": method})
            last = 1
        else:
            log.info("%s: resuming after stage %d", method, last)
            state = load_state(mdir / f"stage{last}", self.tasks)
        for k in range(last + 1, len(self.tasks) + 1):
            if stop_after is not None and k > stop_after:
                return
            task = self.tasks[k - 1]
            sdir = mdir / f"stage{k}"
            log.info("%s stage %d: learning %s", method, k, task.task_id)
            try:
                state, outcome = learn_task(
                    state, task, method, self.hyper, seed=stage_seed(self.cfg.seed, k),
                    on_epoch=self._hook(curves, method), joint_data=self.tasks[: k - 1],
                )
                save_state(sdir, state)
                save_distilled(sdir / "distilled", outcome, method, self.hyper.distill_decode)
                row = self._row(method, state)
            except Exception as err:
                raise RunError(
                    f"{method} stage {k} ({task.task_id}) failed: {err}; last good checkpoint: {mdir / f'stage{k - 1}'}"
                ) from err
            _write_json(sdir / ROW, row.to_dict())
            log.info("%s stage %d: test BLEU %s", method, k, {t: round(b, 2) for t, b in row.bleu.items()})

    def run(self, stop_after: int | None = None) -> CFReport:
        self.out.mkdir(parents=True, exist_ok=True)
        self._check_run_dir()
        self.tasks = prepare_tasks(self.cfg)
        s1 = self._stage1()
        if self.cfg.single_baseline:
            self._single()
        for method in self.methods:
            self._run_method(method, s1, stop_after)
        report = build_report(self.out, [t.task_id for t in self.tasks], self.methods)
        write_report(self.out, report)
        return report


def run_experiment(
    cfg: ExperimentConfig, resume: bool = False, methods: Sequence[str] | None = None, stop_after: int | None = None
) -> CFReport:
    return Runner(cfg, resume, methods).run(stop_after)


# ------------------------------------------------------------ reports


def run_methods(out: Path) -> list[str]:
    meta = out / "run.json"
    if meta.exists():
        return json.loads(meta.read_text(encoding="utf-8"))["methods"]
    return sorted(d.name for d in out.iterdir() if d.is_dir() and completed_stages(d))


def build_report(out: Path, task_ids: Sequence[str], methods: Sequence[str]) -> CFReport:
    """Collect every completed stage row; Delta is filled in wherever single baselines exist."""
    single = {}
    for t in task_ids:
        p = out / SINGLE / t / ROW
        if p.exists():
            single[t] = json.loads(p.read_text(encoding="utf-8"))["bleu"][t]
    report = CFReport(list(task_ids))

    def single_avg(row: CFRow) -> float | None:
        if all(t in single for t in row.bleu):
            return sum(single[t] for t in row.bleu) / len(row.bleu)
        return None

    if single:
        for k in range(1, len(task_ids) + 1):
            learned = task_ids[:k]
            if all(t in single for t in learned):
                row = CFRow(SINGLE, k, {t: single[t] for t in learned})
                row.single_avg = row.bleu_avg
                report.add(row)
    for method in methods:
        for k in completed_stages(out / method):
            row = CFRow.from_dict(json.loads((out / method / f"stage{k}" / ROW).read_text(encoding="utf-8")))
            row.single_avg = single_avg(row)
            report.add(row)
    return report


def collect_curves(out: Path, methods: Sequence[str]) -> list:
    recs = []
    for m in methods:
        p = out / m / "curves.jsonl"
        if p.exists():
            recs.extend(read_curves(p))
    return recs


def write_report(out: Path, report: CFReport) -> None:
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_table(final_only=True) + "\n" + report.to_table(final_only=False), encoding="utf-8")
    methods = [m for m in dict.fromkeys(r.method for r in report.rows) if m != SINGLE]
    lines = [r.to_json() + "\n" for r in collect_curves(out, methods)]
    (out / "curves.jsonl").write_text("".join(lines), encoding="utf-8")


def report_dir(out: Path) -> CFReport:
    """Rebuild report files from whatever stages a (possibly partial) run directory holds."""
    if not out.is_dir():
        raise FileNotFoundError(f"run directory {out} does not exist")
    methods = run_methods(out)
    task_ids = []
    for m in methods:
        done = completed_stages(out / m)
        if done:
            meta = json.loads((out / m / f"stage{max(done)}" / "state.json").read_text(encoding="utf-8"))
            if len(meta["tasks"]) > len(task_ids):
                task_ids = meta["tasks"]
    if not task_ids:
        raise FileNotFoundError(f"run directory {out} holds no completed stage")
    report = build_report(out, task_ids, methods)
    write_report(out, report)
    return report


def reevaluate(cfg: ExperimentConfig, methods: Sequence[str] | None = None) -> CFReport:
    """Decode the test sets again from the final checkpoint of every method and compare with the saved rows."""
    out = cfg.out
    tasks = prepare_tasks(cfg)
    hyper, decode = cfg.hyper(), cfg.decode_config("eval_decode")
    report = CFReport([t.task_id for t in tasks])
    for method in methods or run_methods(out):
        done = completed_stages(out / method)
        if not done:
            continue
        state = load_state(out / method / f"stage{max(done)}", tasks)
        bleu, exact = evaluate_stage(state, decode, hyper)
        report.add(CFRow(method, max(done), bleu, exact, checkpoint=state.forward.checksum()))
    return report


def distill_only(cfg: ExperimentConfig, method: str, stage: int, dest: Path | None = None) -> Path:
    """Build the distilled sets ``method`` would use for task ``stage + 1`` from its saved stage checkpoint."""
    tasks = prepare_tasks(cfg)
    if not 1 <= stage < len(tasks):
        raise ValueError(f"stage must be in 1..{len(tasks) - 1}")
    src = cfg.out / method / f"stage{stage}"
    if not (src / ROW).exists():
        raise FileNotFoundError(f"{src} is not a completed stage")
    state = load_state(src, tasks)
    outcome = build_distill_sets(state, tasks[stage], method, cfg.hyper())
    dest = dest or cfg.out / method / f"distill-for-stage{stage + 1}"
    save_distilled(dest, outcome, method, cfg.hyper().distill_decode)
    return dest
