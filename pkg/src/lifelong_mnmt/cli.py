"""Command-line entry point: ``lifelong-mnmt <subcommand> ...``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .checkpoint import CheckpointError, verify_checkpoint
from .config import OUT_ENV, ConfigError, load_config
from .lifelong import MethodError
from .pipeline import RunExistsError, distill_only, gen_synthetic, reevaluate, report_dir, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("lifelong_mnmt")


def _methods(value: str | None) -> list[str] | None:
    if value is None:
        return None
    return [m for m in value.split(",") if m]


def _load(args, check_files: bool = True):
    overrides = {"seed": args.seed, "out": args.out}
    if getattr(args, "method", None):
        overrides["methods"] = _methods(args.method)
    return load_config(args.config, overrides, check_files=check_files)


def cmd_gen_synthetic(args) -> int:
    cfg = _load(args)
    if cfg.synthetic is None:
        raise ConfigError("config has no 'synthetic' section")
    for task in gen_synthetic(cfg):
        print(f"{task.task_id}\t{task.directory}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _load(args)
    report = run_experiment(cfg, resume=args.resume)
    sys.stdout.write(report.to_table())
    print(f"report: {cfg.out / 'report.json'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    report = reevaluate(cfg, _methods(args.method))
    sys.stdout.write(report.to_table(final_only=False))
    return EXIT_OK


def cmd_report(args) -> int:
    if args.out is None and args.config is None:
        raise ConfigError("report needs --out or --config")
    out = Path(args.out) if args.out else load_config(args.config, check_files=False).out
    report = report_dir(out)
    sys.stdout.write(report.to_table())
    print(f"wrote {out / 'report.json'}, {out / 'report.txt'}, {out / 'curves.jsonl'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _load(args)
    methods = _methods(args.method) or []
    if len(methods) != 1:
        raise ConfigError("distill needs exactly one --method")
    dest = distill_only(cfg, methods[0], args.stage, Path(args.dest) if args.dest else None)
    print(dest)
    return EXIT_OK


def cmd_inspect(args) -> int:
    manifest = verify_checkpoint(args.path)
    shapes = manifest["param_shapes"]
    n = sum(int(torch.Size(s).numel()) for s in shapes)
    print(f"format_version: {manifest['format_version']}")
    print(f"config: {json.dumps(manifest['config'], sort_keys=True)}")
    print(f"parameters: {n} in {len(shapes)} arrays")
    print(f"vocab langs: {manifest.get('vocab_langs', {})}")
    for name, digest in sorted(manifest["checksums"].items()):
        print(f"{name}: sha256 {digest} ok")
    if manifest.get("extra"):
        print(f"extra: {json.dumps(manifest['extra'], sort_keys=True)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lifelong-mnmt", description="Lifelong multilingual NMT experiments on synthetic tasks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress per epoch")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="experiment JSON")
        sp.add_argument("--seed", type=int, help="override the global seed")
        sp.add_argument("--out", help=f"override the output directory (also ${OUT_ENV})")
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")

    sp = sub.add_parser("gen-synthetic", help="write the synthetic task corpora")
    common(sp)
    sp.set_defaults(func=cmd_gen_synthetic)

    sp = sub.add_parser("run", help="train every method over the task sequence")
    common(sp)
    sp.add_argument("--method", help="comma-separated methods, overriding the config")
    sp.add_argument("--resume", action="store_true", help="continue from the last completed stages")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("evaluate", help="re-decode test sets from final checkpoints")
    common(sp)
    sp.add_argument("--method", help="comma-separated methods (default: all in the run)")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="render tables and curve data of a run directory")
    common(sp, config_required=False)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("distill", help="build the distilled sets for the next task from a saved stage")
    common(sp)
    sp.add_argument("--method", required=True)
    sp.add_argument("--stage", type=int, required=True, help="completed stage whose model is the teacher")
    sp.add_argument("--dest", help="output directory for the distilled corpora")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("inspect-checkpoint", help="verify and summarize a checkpoint directory")
    sp.add_argument("path")
    sp.add_argument("--threads", type=int, default=1)
    sp.set_defaults(func=cmd_inspect)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(levelname)s %(message)s"
    )
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (ConfigError, MethodError, RunExistsError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as err:  # noqa: BLE001
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
