"""Command-line surface: bootstrap, replay, reuse, batch, report.

Exit codes are a pure function of the outcome:
  0 accepted / valid replay / passing reuse
  1 replay invalid or reuse stage failure
  2 configuration error (argparse usage errors share this code)
  3 budget_exhausted    4 backend_exhausted
  5 planner_failed or contract load error
  6 executor_failed
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

from .backends import LlmBackend, RulePlannerBackend, RuleRepairBackend, ScriptedBackend
from .errors import (
    BackendUnavailable,
    ExecutorUnavailable,
    ImageUnavailable,
    MalformedManifest,
    MissingFile,
    NotARepository,
    RepobootError,
    SourceUnreachable,
)
from .explorer import cold_explore, reuse_contract
from .orchestrator import BudgetCaps, PipelineConfig, bootstrap_pipeline
from .serialize import dumps_stable, read_json, write_json
from .verifier import VerifierConfig, clean_replay, validity
from .contract import load_contract
from .evidence import snapshot_repository

RESULT_EXIT_CODES = {
    "accepted": 0,
    "budget_exhausted": 3,
    "backend_exhausted": 4,
    "planner_failed": 5,
    "executor_failed": 6,
}

# Overrides beyond twice the documented default are refused outright.
_BUDGET_HARD_MAX_FACTOR = 2


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--backend", default="rule",
                        help="rule | scripted:<dir> | llm (default: rule)")
    parser.add_argument("--executor", default="local_sandbox",
                        choices=("container", "local_sandbox"))
    parser.add_argument("--base-image", default="ubuntu:24.04",
                        help="container base image (container executor only)")
    parser.add_argument("--output", default="text", choices=("text", "json"))
    parser.add_argument("--logs", default="runs", help="run log directory root")
    parser.add_argument("--warm-reuse", action=argparse.BooleanOptionalAction,
                        default=True,
                        help="reuse the warm environment between repair rounds")
    defaults = BudgetCaps()
    for field in fields(BudgetCaps):
        parser.add_argument(
            f"--budget.{field.name}", type=int, dest=f"budget_{field.name}",
            default=None, metavar="N",
            help=f"override {field.name} (default {getattr(defaults, field.name)})",
        )


def _caps_from_args(args, parser) -> BudgetCaps:
    defaults = BudgetCaps()
    overrides = {}
    for field in fields(BudgetCaps):
        value = getattr(args, f"budget_{field.name}", None)
        if value is None:
            continue
        hard_max = getattr(defaults, field.name) * _BUDGET_HARD_MAX_FACTOR
        if value < 1 or value > hard_max:
            parser.error(
                f"--budget.{field.name} must be between 1 and {hard_max} "
                f"(twice the documented default)"
            )
        overrides[field.name] = value
    return replace(defaults, **overrides)


def _config_from_args(args, parser) -> PipelineConfig:
    verifier = VerifierConfig(executor=args.executor, base_image=args.base_image)
    return PipelineConfig(
        verifier=verifier,
        caps=_caps_from_args(args, parser),
        log_root=Path(args.logs),
        warm_reuse=args.warm_reuse,
    )


def _make_backends(spec: str, parser):
    if spec == "rule":
        return RulePlannerBackend(), RuleRepairBackend()
    if spec.startswith("scripted:"):
        directory = spec.split(":", 1)[1]
        try:
            backend = ScriptedBackend.from_dir(directory)
        except BackendUnavailable as exc:
            parser.error(str(exc))
        return backend, backend
    if spec == "llm":
        try:
            backend = LlmBackend.from_env()
        except BackendUnavailable as exc:
            parser.error(str(exc))
        return backend, backend
    parser.error(f"unknown backend: {spec}")


def _emit(payload: dict, output: str) -> None:
    if output == "json":
        sys.stdout.write(dumps_stable(payload))
        return
    for key, value in payload.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        print(f"{key}: {value}")


def cmd_bootstrap(args, parser) -> int:
    config = _config_from_args(args, parser)
    planner, repairer = _make_backends(args.backend, parser)
    report = bootstrap_pipeline(args.source, config, planner, repairer)
    _emit(report.to_json_dict(), args.output)

    if report.result == "accepted" and report.final_contract:
        source = Path(args.source)
        if source.is_dir():
            import shutil

            dest = source / ".bootstrap"
            if dest.exists():
                shutil.rmtree(dest)
            shutil.copytree(report.final_contract["root"], dest)
    return RESULT_EXIT_CODES.get(report.result, 1)


def cmd_replay(args, parser) -> int:
    config = _config_from_args(args, parser)
    try:
        contract = load_contract(args.contract_dir)
    except (MissingFile, MalformedManifest) as exc:
        print(f"contract load error: {exc}", file=sys.stderr)
        return 5
    try:
        snapshot = snapshot_repository(args.repo, Path(args.logs) / "_replay_work")
        trace = clean_replay(snapshot, contract, config.verifier)
    except (NotARepository, SourceUnreachable) as exc:
        print(f"repository error: {exc}", file=sys.stderr)
        return 5
    except (ExecutorUnavailable, ImageUnavailable) as exc:
        print(f"executor error: {exc}", file=sys.stderr)
        return 6
    _emit(trace.to_json_dict(), args.output)
    return 0 if validity(trace) else 1


def cmd_reuse(args, parser) -> int:
    config = _config_from_args(args, parser)
    try:
        report = reuse_contract(
            args.contract_dir, args.repo, config.verifier,
            include_strongest=args.strongest,
            workdir=Path(args.logs) / "_reuse_work",
        )
    except (MissingFile, MalformedManifest) as exc:
        print(f"contract load error: {exc}", file=sys.stderr)
        return 5
    except (ExecutorUnavailable, ImageUnavailable) as exc:
        print(f"executor error: {exc}", file=sys.stderr)
        return 6
    _emit(report, args.output)
    return 0 if report["passed"] else 1


def _quantile(values: list[float], fraction: float) -> float:
    if not values:
        return 0.0
    ordered = sorted(values)
    index = min(len(ordered) - 1, round(fraction * (len(ordered) - 1)))
    return round(ordered[index], 3)


def cmd_batch(args, parser) -> int:
    config = _config_from_args(args, parser)
    list_path = Path(args.list_file)
    if not list_path.is_file():
        parser.error(f"list file not found: {list_path}")
    sources = [
        line.strip() for line in list_path.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]

    def run_one(source: str):
        planner, repairer = _make_backends(args.backend, parser)
        return bootstrap_pipeline(source, config, planner, repairer)

    reports = []
    if sources:
        with ThreadPoolExecutor(max_workers=args.parallel) as pool:
            reports = list(pool.map(run_one, sources))

    wall_times = [r.wall_time_s for r in reports]
    token_totals = [float(r.tokens.get("total", 0)) for r in reports]
    summary = {
        "total": len(reports),
        "accepted": sum(1 for r in reports if r.result == "accepted"),
        "results": {
            r.repository: {"result": r.result, "detail": r.detail} for r in reports
        },
        "wall_time_s": {
            "median": round(statistics.median(wall_times), 3) if wall_times else 0.0,
            "p90": _quantile(wall_times, 0.9),
        },
        "tokens_total": {
            "median": round(statistics.median(token_totals), 3) if token_totals else 0.0,
            "p90": _quantile(token_totals, 0.9),
        },
    }
    write_json(Path(args.logs) / "batch_summary.json", summary)
    _emit(summary, args.output)
    return 6 if any(r.result == "executor_failed" for r in reports) else 0


def cmd_report(args, parser) -> int:
    path = Path(args.run_path)
    if path.is_dir():
        path = path / "run_report.json"
    if not path.is_file():
        print(f"run report not found: {path}", file=sys.stderr)
        return 2
    _emit(read_json(path), args.output)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repoboot",
        description="Turn an unfamiliar repository into a verified .bootstrap contract",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bootstrap = sub.add_parser("bootstrap", help="run the full pipeline on one repository")
    p_bootstrap.add_argument("source", help="local path or repository URL")
    _add_common(p_bootstrap)
    p_bootstrap.set_defaults(func=cmd_bootstrap)

    p_replay = sub.add_parser("replay", help="clean-replay an existing contract")
    p_replay.add_argument("contract_dir", help="path to a .bootstrap directory")
    p_replay.add_argument("repo", help="repository the contract belongs to")
    _add_common(p_replay)
    p_replay.set_defaults(func=cmd_replay)

    p_reuse = sub.add_parser("reuse", help="execute a contract the downstream way")
    p_reuse.add_argument("contract_dir", help="path to a .bootstrap directory")
    p_reuse.add_argument("repo", help="repository the contract belongs to")
    p_reuse.add_argument("--strongest", action="store_true",
                         help="also run strongest_verify")
    _add_common(p_reuse)
    p_reuse.set_defaults(func=cmd_reuse)

    p_batch = sub.add_parser("batch", help="bootstrap every repository in a list file")
    p_batch.add_argument("list_file", help="file with one source per line")
    p_batch.add_argument("--parallel", type=int, default=os.cpu_count() or 2)
    _add_common(p_batch)
    p_batch.set_defaults(func=cmd_batch)

    p_report = sub.add_parser("report", help="print a persisted run report")
    p_report.add_argument("run_path", help="run directory or run_report.json path")
    p_report.add_argument("--output", default="text", choices=("text", "json"))
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except RepobootError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
