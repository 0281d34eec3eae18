"""Command-line entry point: one binary, one subcommand per pipeline stage.

Progress goes to stderr; stdout carries only machine-readable JSON records.
Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .harness import SETTINGS, ExperimentPlan, PlanError, StageError, config_hash

# CLI override flag -> (owner, field); owner is the plan or its protect config
OVERRIDES = {
    "seed": ("plan", "master_seed"),
    "epsilon": ("protect", "epsilon"),
    "iters": ("protect", "max_steps"),
    "masks": ("protect", "mask_count"),
    "alpha": ("protect", "alpha"),
    "beta": ("protect", "beta"),
}

SUBCOMMANDS = ("gen-data", "train-extractor", "protect", "attack", "eval", "report", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fadekit",
        description="Protect image galleries by fading them into noise, attack them, and evaluate.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="chatty progress on stderr")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")

    def common(p: argparse.ArgumentParser, protector: bool = False, setting: bool = False):
        p.add_argument("--plan", type=str, default=None, help="experiment plan file (INI); defaults to built-ins")
        p.add_argument("--out", type=str, default=None, help="output directory root (default: plan's out_dir)")
        p.add_argument("--seed", type=int, default=None, help="override the plan's master seed")
        p.add_argument("--epsilon", type=float, default=None, help="override the feature-constraint threshold")
        p.add_argument("--iters", type=int, default=None, help="override the protection iteration count")
        p.add_argument("--masks", type=int, default=None, help="override the replacement mask count")
        p.add_argument("--alpha", type=float, default=None, help="override the momentum decay factor")
        p.add_argument("--beta", type=float, default=None, help="override the constraint step size")
        p.add_argument("--workers", type=int, default=None, help="parallel workers for per-image stages (default: all cores)")
        if protector:
            p.add_argument("--protector", type=str, default=None, help="run only this protector (default: all in plan)")
        if setting:
            p.add_argument("--setting", type=str, default=None, choices=SETTINGS, help="run only this query/gallery setting")

    common(sub.add_parser("gen-data", help="generate the synthetic dataset"))
    common(sub.add_parser("train-extractor", help="train and freeze the embedding model"))
    common(sub.add_parser("protect", help="protect all splits"), protector=True)
    common(sub.add_parser("attack", help="mount the recovery attack"), protector=True)
    common(sub.add_parser("eval", help="retrieval metrics per setting"), protector=True, setting=True)
    common(sub.add_parser("report", help="re-emit the report from existing results"))
    common(sub.add_parser("all", help="run the full pipeline and emit reports"), protector=False)
    return parser


def resolve_plan(args: argparse.Namespace) -> ExperimentPlan:
    plan = ExperimentPlan.from_file(args.plan) if args.plan else ExperimentPlan()
    protect_cfg = plan.protect
    for flag, (owner, field_name) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if owner == "protect":
            protect_cfg = replace(protect_cfg, **{field_name: value})
        else:
            plan = replace(plan, **{field_name: value})
    plan = replace(plan, protect=protect_cfg)
    plan.validate()
    return plan


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("fadekit: a subcommand is required", file=sys.stderr)
        return 2

    def log(message: str) -> None:
        print(message, file=sys.stderr)

    quiet_log = log if args.verbose else (lambda s: None)

    try:
        plan = resolve_plan(args)
        out = Path(args.out) if args.out else Path(plan.out_dir)
        workers = args.workers if args.workers else harness.default_workers()
        protectors = plan.protectors
        if getattr(args, "protector", None):
            if args.protector not in harness.PROTECTORS:
                parser.error(
                    f"unknown protector {args.protector!r}; registered: {', '.join(harness.PROTECTORS)}"
                )
            protectors = (args.protector,)
        settings = (args.setting,) if getattr(args, "setting", None) else plan.settings

        if args.command == "gen-data":
            harness.run_gen_data(plan, out, quiet_log)
            print(json.dumps({"stage": "gen-data", "out": str(out), "config_hash": config_hash(plan)}))
        elif args.command == "train-extractor":
            harness.run_train_extractor(plan, out, quiet_log)
            print(json.dumps({"stage": "train-extractor", "out": str(out), "config_hash": config_hash(plan)}))
        elif args.command == "protect":
            for protector in protectors:
                harness.run_protect(plan, out, protector, workers=workers, log=quiet_log)
                records = harness.load_protect_records(out, protector)
                finals = [r["final_loss"] for r in records if r["final_loss"] is not None]
                summary = {
                    "stage": "protect",
                    "protector": protector,
                    "images": len(records),
                    "mean_final_loss": (sum(finals) / len(finals)) if finals else None,
                    "config_hash": config_hash(plan),
                }
                print(json.dumps(summary))
        elif args.command == "attack":
            for protector in protectors:
                metrics = harness.run_attack(plan, out, protector, quiet_log)
                print(json.dumps({"stage": "attack", "config_hash": config_hash(plan), **metrics}))
        elif args.command == "eval":
            for protector in protectors:
                for setting in settings:
                    row = harness.run_eval(plan, out, protector, setting, quiet_log)
                    print(json.dumps({"stage": "eval", "config_hash": config_hash(plan), **row}))
        elif args.command == "report":
            report = harness.load_report(out)
            harness.emit_report(plan, out, report)
            for (protector, setting), row in sorted(report.retrieval.items()):
                print(json.dumps({"kind": "retrieval", **row}, sort_keys=True))
            for protector, row in sorted(report.attack.items()):
                print(json.dumps({"kind": "attack", **row}, sort_keys=True))
        elif args.command == "all":
            report = harness.run_all(plan, out, workers=workers, log=quiet_log)
            print(
                json.dumps(
                    {
                        "stage": "all",
                        "out": str(out),
                        "config_hash": report.config_hash,
                        "rows": len(report.retrieval) + len(report.attack),
                    }
                )
            )
    except (PlanError, StageError, ValueError, OSError) as exc:
        print(f"fadekit: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
