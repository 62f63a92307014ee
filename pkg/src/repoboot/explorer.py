"""Downstream reuse protocol and its cold-exploration comparator.

``reuse_contract`` is what a downstream consumer does with a frozen contract:
read commands.json and execute exactly the manifested commands, nothing else.
``cold_explore`` is the deterministic stand-in for an agent that has no
contract: it re-reads the repository, probes candidate tools, re-derives a
plan, and only then executes the same stages. Comparing the two wall times
gives a hermetic measurement of what the contract saves.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

from .backends.base import build_plan_request
from .backends.rule import RulePlannerBackend
from .contract import load_contract, manifest_from_plan, render_stage_script
from .evidence import extract_ci_evidence, scan_repository, snapshot_repository
from .plan import parse_plan_document
from .verifier import VerifierConfig, close_session, open_session, run_stage

# Candidate commands a contract-less explorer tries while figuring out the
# stack; most fail quickly on any given repository, which is the point.
_PROBE_COMMANDS = (
    "cat README.md",
    "cat README.rst",
    "cat package.json",
    "cat pyproject.toml",
    "cat requirements.txt",
    "cat Makefile",
    "python3 -m pip --version",
    "node --version",
    "npm --version",
    "yarn --version",
    "cargo --version",
    "go version",
    "make -n",
    "cmake --version",
    "python3 -m pytest --collect-only -q",
)


def _execute_stages(session, manifest, include_strongest: bool,
                    config: VerifierConfig) -> list[dict]:
    """Run setup/doctor/minimal (and optionally strongest) exactly as manifested."""
    stages = [
        ("setup", list(manifest.install)),
        ("doctor", list(manifest.doctor)),
        ("minimal", [manifest.minimal_verify]),
    ]
    if include_strongest:
        commands = [manifest.strongest_verify] if manifest.strongest_verify else []
        stages.append(("strongest", commands))

    results = []
    gate_failed = False
    for stage, commands in stages:
        if stage == "strongest" and not commands:
            results.append({"stage": stage, "outcome": "skipped", "duration_s": 0.0,
                            "commands_run": 0, "failed_command_index": None})
            continue
        if gate_failed:
            results.append({"stage": stage, "outcome": "skipped", "duration_s": 0.0,
                            "commands_run": 0, "failed_command_index": None})
            continue
        script = render_stage_script(commands, stage)
        timeout = config.stage_timeouts.get(stage, 300)
        result = run_stage(session, stage, script, timeout)
        results.append({
            "stage": stage,
            "outcome": result.outcome,
            "duration_s": result.duration_s,
            "commands_run": result.commands_run,
            "failed_command_index": result.failed_command_index,
        })
        if stage in ("setup", "doctor", "minimal") and result.outcome != "pass":
            gate_failed = True
    return results


def reuse_contract(contract_dir: str | Path, repo_source: str | Path,
                   config: VerifierConfig, include_strongest: bool = False,
                   workdir: str | Path | None = None) -> dict:
    """Execute a frozen contract the way a downstream consumer would."""
    started = time.monotonic()
    contract = load_contract(contract_dir)
    work = Path(workdir) if workdir else Path(contract_dir).resolve().parent / "_reuse_work"
    snapshot = snapshot_repository(str(repo_source), work)
    session = open_session(snapshot, config, mode="clean")
    try:
        stage_reports = _execute_stages(session, contract.manifest, include_strongest, config)
    finally:
        close_session(session)

    manifest_counts = {
        "setup": len(contract.manifest.install),
        "doctor": len(contract.manifest.doctor),
        "minimal": 1,
    }
    passed = all(
        r["outcome"] == "pass" for r in stage_reports
        if r["stage"] in ("setup", "doctor", "minimal")
    )
    return {
        "mode": "reuse",
        "contract": str(contract_dir),
        "repository": str(repo_source),
        "stages": stage_reports,
        "manifest_command_counts": manifest_counts,
        "total_commands_run": sum(r["commands_run"] for r in stage_reports),
        "passed": passed,
        "wall_time_s": round(time.monotonic() - started, 3),
    }


def cold_explore(repo_source: str | Path, config: VerifierConfig,
                 include_strongest: bool = False,
                 workdir: str | Path | None = None) -> dict:
    """Contract-less comparator: rediscover, probe, re-plan, then execute."""
    started = time.monotonic()
    work = Path(workdir) if workdir else Path(str(repo_source)).resolve().parent / "_cold_work"
    snapshot = snapshot_repository(str(repo_source), work)

    # Exploration phase: read evidence files and probe for available tooling.
    discovery = scan_repository(snapshot)
    ci = extract_ci_evidence(snapshot)
    for item in discovery.important_files + discovery.evidence:
        (snapshot.root / item.file_path).read_bytes()

    session = open_session(snapshot, config, mode="clean")
    try:
        probes_run = 0
        for probe in _PROBE_COMMANDS:
            script = f"#!/usr/bin/env bash\n{probe}\n"
            run_stage(session, "probe", script, timeout_s=30)
            probes_run += 1

        # Re-derive the plan the hard way, then execute the same stages.
        planner = RulePlannerBackend()
        response = planner.complete(build_plan_request(discovery, ci))
        plan = parse_plan_document(json.loads(response.document))
        manifest = manifest_from_plan(plan)
        stage_reports = _execute_stages(session, manifest, include_strongest, config)
    finally:
        close_session(session)

    passed = all(
        r["outcome"] == "pass" for r in stage_reports
        if r["stage"] in ("setup", "doctor", "minimal")
    )
    return {
        "mode": "cold",
        "repository": str(repo_source),
        "probes_run": probes_run,
        "stages": stage_reports,
        "total_commands_run": sum(r["commands_run"] for r in stage_reports) + probes_run,
        "passed": passed,
        "wall_time_s": round(time.monotonic() - started, 3),
    }
