"""Pipeline driver: discovery, planning, materialization, warm repair,
clean-replay acceptance, all under explicit budgets.

Each run owns a timestamped directory under the log root holding the evidence
reports, every round's plan and contract snapshot, every execution trace, the
budget ledger, and the final run report, so any acceptance decision can be
audited from disk afterwards.
"""

from __future__ import annotations

import logging
import shutil
import time
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

from .backends.base import TokenLedger
from .contract import (
    BootstrapContract,
    FailurePlaybook,
    FrozenContract,
    PLAYBOOK_MAX_ENTRIES,
    PlaybookEntry,
    freeze_contract,
    materialize_contract,
)
from .errors import (
    BackendUnavailable,
    ExecutorUnavailable,
    ImageUnavailable,
    NotARepository,
    PlanRejected,
    ResultingPlanRejected,
    SourceUnreachable,
    StructuredOutputExhausted,
    TransportError,
)
from .evidence import RepoSnapshot, extract_ci_evidence, scan_repository, snapshot_repository
from .patterns import ScanLimits
from .plan import BootstrapPlan, generate_plan, reject_violations, screen_risky_commands, validate_plan
from .repair import RepairDelta, apply_delta, diagnose_trace, propose_repair, sanity_check
from .serialize import write_json
from .verifier import (
    ExecutionTrace,
    STAGE_ORDER,
    VerifierConfig,
    clean_replay,
    close_session,
    open_session,
    validity,
    verify_contract,
)

logger = logging.getLogger(__name__)

_PLAN_STAGE_TO_TRACE = {
    "install": "setup",
    "doctor": "doctor",
    "minimal_verify": "minimal",
    "strongest_verify": "strongest",
    "run_probes": "probe",
}


@dataclass(frozen=True)
class BudgetCaps:
    max_repair_loops: int = 20
    max_clean_replay_repair_loops: int = 3
    max_strongest_test_repairs: int = 5
    max_llm_structured_retries: int = 5
    max_repair_llm_structured_retries: int = 5
    max_shell_commands: int = 80
    max_total_wall_time_s: int = 3600

    def to_json_dict(self) -> dict:
        return {
            "max_repair_loops": self.max_repair_loops,
            "max_clean_replay_repair_loops": self.max_clean_replay_repair_loops,
            "max_strongest_test_repairs": self.max_strongest_test_repairs,
            "max_llm_structured_retries": self.max_llm_structured_retries,
            "max_repair_llm_structured_retries": self.max_repair_llm_structured_retries,
            "max_shell_commands": self.max_shell_commands,
            "max_total_wall_time_s": self.max_total_wall_time_s,
        }


@dataclass(frozen=True)
class Exhausted:
    cap_name: str


@dataclass(frozen=True)
class BudgetLedger:
    caps: BudgetCaps = field(default_factory=BudgetCaps)
    rounds_used: int = 0
    clean_replays_used: int = 0
    strongest_repairs_used: int = 0
    plan_retries_used: int = 0
    repair_retries_round: int = 0
    repair_retries_peak: int = 0
    shell_commands_used: int = 0
    wall_time_s: float = 0.0

    def reset_round_retries(self) -> "BudgetLedger":
        return replace(self, repair_retries_round=0)

    def to_json_dict(self) -> dict:
        return {
            "caps": self.caps.to_json_dict(),
            "spent": {
                "repair_loops": self.rounds_used,
                "clean_replay_repair_loops": self.clean_replays_used,
                "strongest_test_repairs": self.strongest_repairs_used,
                "llm_structured_retries": self.plan_retries_used,
                "repair_llm_structured_retries_peak_round": self.repair_retries_peak,
                "shell_commands": self.shell_commands_used,
                "total_wall_time_s": self.wall_time_s,
            },
        }


def charge_budget(ledger: BudgetLedger, event: str, amount: float = 1):
    """Pure budget accounting: a new ledger, or Exhausted naming the cap."""
    caps = ledger.caps
    if event == "repair_round":
        if ledger.rounds_used + 1 > caps.max_repair_loops:
            return Exhausted("max_repair_loops")
        return replace(ledger, rounds_used=ledger.rounds_used + 1)
    if event == "clean_replay_round":
        if ledger.clean_replays_used + 1 > caps.max_clean_replay_repair_loops:
            return Exhausted("max_clean_replay_repair_loops")
        return replace(ledger, clean_replays_used=ledger.clean_replays_used + 1)
    if event == "strongest_repair":
        if ledger.strongest_repairs_used + 1 > caps.max_strongest_test_repairs:
            return Exhausted("max_strongest_test_repairs")
        return replace(ledger, strongest_repairs_used=ledger.strongest_repairs_used + 1)
    if event == "plan_retry":
        if ledger.plan_retries_used + int(amount) > caps.max_llm_structured_retries:
            return Exhausted("max_llm_structured_retries")
        return replace(ledger, plan_retries_used=ledger.plan_retries_used + int(amount))
    if event == "repair_retry":
        new_round = ledger.repair_retries_round + int(amount)
        if new_round > caps.max_repair_llm_structured_retries:
            return Exhausted("max_repair_llm_structured_retries")
        return replace(
            ledger,
            repair_retries_round=new_round,
            repair_retries_peak=max(ledger.repair_retries_peak, new_round),
        )
    if event == "shell_command":
        new_total = ledger.shell_commands_used + int(amount)
        if new_total > caps.max_shell_commands:
            return Exhausted("max_shell_commands")
        return replace(ledger, shell_commands_used=new_total)
    if event == "wall_tick":
        if amount > caps.max_total_wall_time_s:
            return Exhausted("max_total_wall_time_s")
        return replace(ledger, wall_time_s=round(float(amount), 3))
    raise ValueError(f"unknown budget event: {event}")


@dataclass
class RunReport:
    repository: str
    result: str  # accepted | budget_exhausted | backend_exhausted | planner_failed | executor_failed
    detail: str = ""
    rounds_used: int = 0
    clean_replays_used: int = 0
    wall_time_s: float = 0.0
    tokens: dict = field(default_factory=lambda: {"input": 0, "output": 0, "total": 0})
    final_contract: dict | None = None
    trace_refs: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "repository": self.repository,
            "result": self.result,
            "detail": self.detail,
            "rounds_used": self.rounds_used,
            "clean_replays_used": self.clean_replays_used,
            "wall_time_s": self.wall_time_s,
            "tokens": self.tokens,
            "final_contract": self.final_contract,
            "trace_refs": self.trace_refs,
        }


@dataclass
class PipelineConfig:
    verifier: VerifierConfig = field(default_factory=VerifierConfig)
    caps: BudgetCaps = field(default_factory=BudgetCaps)
    scan_limits: ScanLimits = field(default_factory=ScanLimits)
    log_root: Path = Path("runs")
    warm_reuse: bool = True
    include_probes_in_clean: bool = True


def record_repair_knowledge(playbook: FailurePlaybook, signature_text: str,
                            fix_summary: str, outcome: str,
                            round_index: int) -> FailurePlaybook:
    """Append one playbook entry, keeping only the newest 20."""
    entries = list(playbook.entries)
    entries.append(PlaybookEntry(
        signature=signature_text, fix_summary=fix_summary, outcome=outcome,
        round_index=round_index,
    ))
    if len(entries) > PLAYBOOK_MAX_ENTRIES:
        entries = entries[-PLAYBOOK_MAX_ENTRIES:]
    return FailurePlaybook(entries=entries)


class _BudgetStop(Exception):
    def __init__(self, cap_name: str) -> None:
        super().__init__(cap_name)
        self.cap_name = cap_name


class _PipelineRun:
    """Mutable state for one repository's pipeline run."""

    def __init__(self, source: str, config: PipelineConfig, planner_backend,
                 repair_backend) -> None:
        self.source = str(source)
        self.planner_backend = planner_backend
        self.repair_backend = repair_backend
        self.started = time.monotonic()
        self.tokens = TokenLedger()
        self.ledger = BudgetLedger(caps=config.caps)
        stamp = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
        name = Path(self.source.rstrip("/")).name or "repo"
        self.run_dir = Path(config.log_root) / name / stamp
        self.run_dir.mkdir(parents=True, exist_ok=True)
        verifier = config.verifier
        if verifier.log_dir is None:
            verifier = replace(verifier, log_dir=self.run_dir / "stage_logs")
        self.config = replace(config, verifier=verifier)
        self.trace_refs: list[str] = []
        self.trace_history: list[ExecutionTrace] = []
        self.playbook = FailurePlaybook()
        self.event_counter = 0
        self.snapshot: RepoSnapshot | None = None
        self.warm_session = None
        self.round_index = 0

    # -- bookkeeping --

    def charge(self, event: str, amount: float = 1) -> None:
        outcome = charge_budget(self.ledger, event, amount)
        if isinstance(outcome, Exhausted):
            raise _BudgetStop(outcome.cap_name)
        self.ledger = outcome

    def tick_wall(self) -> None:
        self.charge("wall_tick", time.monotonic() - self.started)

    def persist_trace(self, trace: ExecutionTrace) -> None:
        ref = self.run_dir / f"trace_{len(self.trace_refs):03d}.json"
        write_json(ref, trace.to_json_dict())
        self.trace_refs.append(str(ref))
        self.trace_history.append(trace)
        self.charge("shell_command", sum(r.commands_run for r in trace.stage_results))
        self.tick_wall()

    def record(self, signature_text: str, fix_summary: str, outcome: str) -> None:
        self.event_counter += 1
        self.playbook = record_repair_knowledge(
            self.playbook, signature_text, fix_summary, outcome, self.event_counter
        )

    def close_warm(self) -> None:
        if self.warm_session is not None:
            close_session(self.warm_session)
            self.warm_session = None

    def report(self, result: str, detail: str = "",
               final_contract: FrozenContract | None = None) -> RunReport:
        self.close_warm()
        report = RunReport(
            repository=self.source,
            result=result,
            detail=detail,
            rounds_used=self.ledger.rounds_used,
            clean_replays_used=self.ledger.clean_replays_used,
            wall_time_s=round(time.monotonic() - self.started, 3),
            tokens=self.tokens.to_json_dict(),
            final_contract=final_contract.to_json_dict() if final_contract else None,
            trace_refs=list(self.trace_refs),
        )
        write_json(self.run_dir / "ledger.json", self.ledger.to_json_dict())
        write_json(self.run_dir / "run_report.json", report.to_json_dict())
        return report


def bootstrap_pipeline(source: str, config: PipelineConfig, planner_backend,
                       repair_backend) -> RunReport:
    """Full pipeline: discovery, plan, contract, warm repair, clean replay.

    Terminal failures are reported inside RunReport.result, never as silent
    partial output; every intermediate artifact is persisted under the run
    directory.
    """
    run = _PipelineRun(source, config, planner_backend, repair_backend)
    try:
        return _run_pipeline(run)
    except _BudgetStop as stop:
        return run.report("budget_exhausted", detail=stop.cap_name)
    except (ExecutorUnavailable, ImageUnavailable) as exc:
        return run.report("executor_failed", detail=str(exc))
    except StructuredOutputExhausted as exc:
        return run.report("backend_exhausted", detail=str(exc))
    except (BackendUnavailable, TransportError) as exc:
        return run.report("backend_exhausted", detail=str(exc))
    finally:
        run.close_warm()


def _run_pipeline(run: _PipelineRun) -> RunReport:
    config = run.config

    # Stage 1: acquisition + discovery.
    try:
        run.snapshot = snapshot_repository(run.source, run.run_dir / "snapshot")
    except (NotARepository, SourceUnreachable) as exc:
        return run.report("planner_failed", detail=str(exc))
    discovery = scan_repository(run.snapshot, config.scan_limits)
    ci = extract_ci_evidence(run.snapshot)
    (run.run_dir / "discovery_report.json").write_text(discovery.to_json(), encoding="utf-8")
    (run.run_dir / "ci_evidence_report.json").write_text(ci.to_json(), encoding="utf-8")
    run.tick_wall()

    # A rule repairer constructed without a report gets this run's discovery,
    # mirroring how the scripted backend is configured with its response dir.
    if getattr(run.repair_backend, "discovery", "absent") is None:
        run.repair_backend.discovery = discovery

    if discovery.structure_summary.get("files_examined", 0) == 0:
        return run.report("planner_failed", detail="repository snapshot is empty")

    # Stage 2: plan generation.
    attempts_before = len(getattr(run.planner_backend, "calls", []))
    plan = generate_plan(
        discovery, ci, run.planner_backend,
        retry_budget=config.caps.max_llm_structured_retries,
        token_ledger=run.tokens,
    )
    attempts = len(getattr(run.planner_backend, "calls", [])) - attempts_before
    if attempts:
        run.charge("plan_retry", attempts)

    violations = validate_plan(plan, repo_nonempty=True)
    write_json(run.run_dir / "plan_violations.json",
               [v.to_json_dict() for v in violations])
    rejects = reject_violations(violations)
    if rejects:
        return run.report(
            "planner_failed",
            detail="plan rejected: " + ", ".join(v.rule_id for v in rejects),
        )
    warnings = screen_risky_commands(plan)

    # Stage 3: initial contract.
    contract = _materialize_round(run, plan, warnings)

    # Keep the guarded originals for the sanity check.
    original_plan = plan
    original_evidence_map = dict(plan.evidence_links)
    original_strongest = plan.goals.strongest_verify

    rerun_from: str | None = None
    setup_resume_index: int | None = None
    pending: tuple[str, str, str] | None = None  # signature text, fix summary, failed stage

    while True:
        trace = _warm_verify(run, contract, rerun_from, setup_resume_index)
        run.persist_trace(trace)

        if pending is not None:
            signature_text, fix_summary, failed_stage = pending
            stage_result = trace.result_for(failed_stage)
            fixed = stage_result is not None and stage_result.outcome == "pass"
            run.record(signature_text, fix_summary, "fixed" if fixed else "abandoned")
            pending = None
            _refresh_playbook(contract, run.playbook)

        if _gated_pass(trace):
            accepted = _acceptance_gate(run, contract, plan, warnings)
            if accepted is not None:
                frozen, clean_trace = accepted
                _finalize_accept(run, contract)
                strongest_result = clean_trace.result_for("strongest")
                if strongest_result is not None and strongest_result.outcome == "fail":
                    # Advisory only: nothing that happens here may revoke
                    # the acceptance already earned.
                    try:
                        _strongest_subloop(run, plan, contract, clean_trace, warnings)
                    except (_BudgetStop, Exception):
                        logger.debug("strongest repair sub-loop ended early", exc_info=True)
                return run.report("accepted", final_contract=frozen)
            # Clean replay failed: resume repair from the clean trace.
            run.close_warm()
            trace = run.trace_history[-1]

        # Repair round.
        run.charge("repair_round")
        run.round_index += 1
        run.ledger = run.ledger.reset_round_retries()
        plan, contract, delta, signature_text = _propose_accepted_repair(
            run, plan, contract, trace,
            original_plan, original_evidence_map, original_strongest, warnings,
        )
        failed_stage = diagnose_trace(trace).stage
        pending = (signature_text, delta.rationale or _summarize(delta), failed_stage)
        rerun_from, setup_resume_index = _warm_hints(trace, delta, run)


def _materialize_round(run: _PipelineRun, plan: BootstrapPlan, warnings) -> BootstrapContract:
    round_dir = run.run_dir / f"round_{run.round_index:03d}"
    write_json(round_dir / "plan.json", plan.to_json_dict())
    return materialize_contract(plan, warnings, run.playbook, round_dir / ".bootstrap")


def _refresh_playbook(contract: BootstrapContract, playbook: FailurePlaybook) -> None:
    """Sync the playbook file after a repair outcome became known; the rest
    of the contract is untouched so verification results stay meaningful."""
    from .serialize import dumps_stable

    (contract.root / "failure_playbook.json").write_text(
        dumps_stable(playbook.to_json_dict()), encoding="utf-8"
    )
    contract.failure_playbook = playbook


def _warm_verify(run: _PipelineRun, contract: BootstrapContract,
                 rerun_from: str | None, setup_resume_index: int | None) -> ExecutionTrace:
    config = run.config
    if config.warm_reuse:
        if run.warm_session is None:
            run.warm_session = open_session(run.snapshot, config.verifier, mode="warm")
            rerun_from = None
            setup_resume_index = None
        session = run.warm_session
    else:
        run.close_warm()
        run.warm_session = open_session(run.snapshot, config.verifier, mode="warm")
        session = run.warm_session
        rerun_from = None
        setup_resume_index = None
    return verify_contract(
        session, contract, include_strongest=False, include_probes=False,
        rerun_from=rerun_from, setup_resume_index=setup_resume_index,
    )


def _gated_pass(trace: ExecutionTrace) -> bool:
    for stage in ("setup", "doctor", "minimal"):
        result = trace.result_for(stage)
        if result is None or result.outcome != "pass":
            return False
    return True


def _acceptance_gate(run: _PipelineRun, contract: BootstrapContract,
                     plan: BootstrapPlan, warnings):
    """Freeze the candidate and clean-replay it; None means resume repair."""
    candidate = freeze_contract(contract)
    clean_trace = clean_replay(
        run.snapshot, contract, run.config.verifier,
        include_probes=run.config.include_probes_in_clean,
    )
    run.persist_trace(clean_trace)
    if validity(clean_trace):
        write_json(run.run_dir / "frozen_contract.json", candidate.to_json_dict())
        return candidate, clean_trace
    run.charge("clean_replay_round")
    return None


def _finalize_accept(run: _PipelineRun, contract: BootstrapContract) -> None:
    """Copy the accepted contract into the snapshot working copy."""
    dest = run.snapshot.root / ".bootstrap"
    if dest.exists():
        shutil.rmtree(dest)
    shutil.copytree(contract.root, dest)


def _propose_accepted_repair(run: _PipelineRun, plan: BootstrapPlan,
                             contract: BootstrapContract, trace: ExecutionTrace,
                             original_plan: BootstrapPlan, original_evidence_map: dict,
                             original_strongest, warnings):
    """Propose deltas until one survives the sanity check, within the round's
    retry budget. Rejected proposals are recorded as abandoned."""
    caps = run.config.caps
    signature = diagnose_trace(trace)
    signature_text = f"{signature.category}: {signature.matched_text or signature.stage}"
    attempts_left = caps.max_repair_llm_structured_retries

    while attempts_left > 0:
        before = len(getattr(run.repair_backend, "calls", []))
        try:
            delta = propose_repair(
                plan, contract, trace, run.repair_backend,
                retry_budget=attempts_left, token_ledger=run.tokens,
            )
        finally:
            used = max(1, len(getattr(run.repair_backend, "calls", [])) - before)
        attempts_left -= used
        run.charge("repair_retry", used)

        try:
            candidate_plan = apply_delta(plan, delta)
        except ResultingPlanRejected as exc:
            run.record(signature_text, f"delta rejected by validator: {exc}", "abandoned")
            continue

        candidate_dir = run.run_dir / "candidate" / ".bootstrap"
        try:
            candidate_contract = materialize_contract(
                candidate_plan, warnings, run.playbook, candidate_dir
            )
        except PlanRejected as exc:
            run.record(signature_text, f"candidate rejected: {exc}", "abandoned")
            continue

        verdict = sanity_check(
            original_plan, original_evidence_map, original_strongest,
            candidate_contract, run.trace_history,
        )
        write_json(
            run.run_dir / f"sanity_round_{run.round_index:03d}.json",
            verdict.to_json_dict(),
        )
        if not verdict.accepted:
            kinds = ",".join(v["kind"] for v in verdict.violations)
            run.record(signature_text, f"sanity check rejected repair ({kinds})", "abandoned")
            continue

        new_contract = _materialize_round(run, candidate_plan, warnings)
        return candidate_plan, new_contract, delta, signature_text

    raise StructuredOutputExhausted(
        f"no sanity-accepted repair delta within the round budget "
        f"({caps.max_repair_llm_structured_retries})",
        attempts=caps.max_repair_llm_structured_retries,
    )


def _summarize(delta: RepairDelta) -> str:
    if not delta.edits:
        return "no-op delta"
    return ", ".join(e.op for e in delta.edits)


def _warm_hints(trace: ExecutionTrace, delta: RepairDelta, run: _PipelineRun):
    """Earliest stage the next warm verify must rerun, plus an append-only
    setup resume index when the delta only appended install commands."""
    touched_trace_stages = {
        _PLAN_STAGE_TO_TRACE[s] for s in delta.touched_plan_stages()
        if s in _PLAN_STAGE_TO_TRACE
    }
    failing = None
    for result in trace.stage_results:
        if result.stage in ("setup", "doctor", "minimal") and result.outcome not in ("pass", "skipped"):
            failing = result.stage
            break
    candidates = set(touched_trace_stages)
    if failing:
        candidates.add(failing)
    if not candidates:
        candidates = {"setup"}
    rerun_from = min(candidates, key=STAGE_ORDER.index)

    setup_resume_index = None
    if rerun_from == "setup" and _is_pure_install_append(delta):
        setup_resume_index = delta.edits[0].index
    return rerun_from, setup_resume_index


def _is_pure_install_append(delta: RepairDelta) -> bool:
    if len(delta.edits) != 1:
        return False
    edit = delta.edits[0]
    return edit.op == "insert_commands" and edit.stage == "install"


def _strongest_subloop(run: _PipelineRun, plan: BootstrapPlan,
                       contract: BootstrapContract, clean_trace: ExecutionTrace,
                       warnings) -> None:
    """Advisory repairs for a failing strongest_verify; never revokes acceptance."""
    current_plan = plan
    current_contract = contract
    trace = clean_trace
    for _ in range(run.config.caps.max_strongest_test_repairs):
        outcome = charge_budget(run.ledger, "strongest_repair")
        if isinstance(outcome, Exhausted):
            return
        run.ledger = outcome
        try:
            delta = propose_repair(
                current_plan, current_contract, trace, run.repair_backend,
                retry_budget=1, token_ledger=run.tokens, include_strongest=True,
            )
        except Exception:
            return
        if not delta.edits:
            return
        try:
            current_plan = apply_delta(current_plan, delta)
        except ResultingPlanRejected:
            return
        run.round_index += 1
        current_contract = _materialize_round(run, current_plan, warnings)
        try:
            trace = clean_replay(run.snapshot, current_contract, run.config.verifier)
        except (ExecutorUnavailable, ImageUnavailable):
            return
        run.persist_trace(trace)
        strongest = trace.result_for("strongest")
        if strongest is None or strongest.outcome != "fail":
            if validity(trace):
                _finalize_accept(run, current_contract)
            return
