"""Trace-driven repair: localized plan deltas gated by a sanity check.

A repair never rewrites the plan wholesale. It is an ordered list of edits
over the existing plan (insert/remove/replace/move commands, whole-list
replacement, verification-goal updates, metadata updates), and everything the
edits do not name is copied through unchanged. The sanity check then rejects
any repair that weakens a verification target or deletes evidence-supported
commands without the trace implicating them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .contract import BootstrapContract, _diff_lists
from .errors import (
    IndexOutOfBounds,
    NoFailure,
    ResultingPlanRejected,
    SchemaError,
)
from .patterns import (
    BUILD_INVOCATION_RES,
    FAILURE_SIGNATURE_RES,
    IMPORT_CHECK_RES,
    NON_LOCAL_TRACE_RES,
    STRENGTH_BUILD,
    STRENGTH_IDENTITY,
    STRENGTH_IMPORT_CHECK,
    STRENGTH_TEST_SUITE,
    TEST_INVOCATION_RES,
    TOOLCHAIN_COMMANDS,
)
from .plan import (
    BootstrapPlan,
    CommandSpec,
    detect_degenerate_verify,
    parse_command_spec,
    parse_plan_document,
    reject_violations,
    validate_plan,
)

EDIT_OPS = (
    "insert_commands",
    "remove_commands",
    "replace_commands",
    "move_commands",
    "replace_doctor",
    "replace_install",
    "set_minimal_verify",
    "set_strongest_verify",
    "update_field",
)

_LIST_STAGES = ("install", "doctor", "run_probes")
_UPDATE_FIELDS = ("cwd", "timeout_s", "agent_context", "evidence_links", "failure_playbook")

# Trace stage name -> plan stage name for command locators.
TRACE_TO_PLAN_STAGE = {
    "setup": "install",
    "doctor": "doctor",
    "minimal": "minimal_verify",
    "strongest": "strongest_verify",
    "probe": "run_probes",
}


@dataclass(frozen=True)
class Edit:
    op: str
    stage: str | None = None
    index: int | None = None
    indices: tuple[int, ...] | None = None
    from_index: int | None = None
    to_index: int | None = None
    commands: tuple[CommandSpec, ...] | None = None
    command: CommandSpec | None = None
    field_name: str | None = None
    value: object = None

    def to_json_dict(self) -> dict:
        out: dict = {"op": self.op}
        if self.stage is not None:
            out["stage"] = self.stage
        if self.index is not None:
            out["index"] = self.index
        if self.indices is not None:
            out["indices"] = list(self.indices)
        if self.from_index is not None:
            out["from"] = self.from_index
        if self.to_index is not None:
            out["to"] = self.to_index
        if self.commands is not None:
            out["commands"] = [c.to_json_dict() for c in self.commands]
        if self.command is not None:
            out["command"] = self.command.to_json_dict()
        elif self.op == "set_strongest_verify":
            out["command"] = None
        if self.field_name is not None:
            out["field"] = self.field_name
        if self.op == "update_field":
            out["value"] = self.value
        return out


@dataclass
class RepairDelta:
    edits: list[Edit] = field(default_factory=list)
    rationale: str = ""

    def to_json_dict(self) -> dict:
        return {"edits": [e.to_json_dict() for e in self.edits], "rationale": self.rationale}

    def touched_plan_stages(self) -> set[str]:
        """Plan stages whose command slots this delta can change."""
        touched: set[str] = set()
        for edit in self.edits:
            if edit.op in ("insert_commands", "remove_commands", "replace_commands",
                           "move_commands"):
                touched.add(edit.stage or "")
            elif edit.op == "replace_doctor":
                touched.add("doctor")
            elif edit.op == "replace_install":
                touched.add("install")
            elif edit.op == "set_minimal_verify":
                touched.add("minimal_verify")
            elif edit.op == "set_strongest_verify":
                touched.add("strongest_verify")
            elif edit.op == "update_field" and edit.field_name in ("cwd", "timeout_s"):
                touched.add(edit.stage or "")
        touched.discard("")
        return touched


@dataclass(frozen=True)
class FailureSignature:
    category: str
    matched_text: str
    stage: str
    command_index: int | None
    token: str | None = None

    def to_json_dict(self) -> dict:
        return {
            "category": self.category,
            "matched_text": self.matched_text,
            "stage": self.stage,
            "command_index": self.command_index,
            "token": self.token,
        }


@dataclass
class SanityVerdict:
    accepted: bool
    violations: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"accepted": self.accepted, "violations": self.violations}


def diagnose_trace(trace, include_strongest: bool = False) -> FailureSignature:
    """Classify the first failing gated stage against the signature table.

    With ``include_strongest`` a failing advisory stage is diagnosed when all
    gated stages passed (used by the post-acceptance strongest repair loop).
    """
    for result in trace.stage_results:
        if result.stage not in ("setup", "doctor", "minimal"):
            continue
        if result.outcome == "pass" or result.outcome == "skipped":
            continue
        return diagnose_stage_result(result)
    if include_strongest:
        strongest = next(
            (r for r in trace.stage_results if r.stage == "strongest"), None
        )
        if strongest is not None and strongest.outcome in ("fail", "timeout"):
            return diagnose_stage_result(strongest)
    raise NoFailure("all gated stages passed")


def diagnose_stage_result(result) -> FailureSignature:
    """Signature for one failing stage result; `unknown` when nothing matches."""
    if result.outcome == "timeout":
        return FailureSignature(
            category="timeout", matched_text="", stage=result.stage,
            command_index=result.failed_command_index,
        )
    combined = result.stdout_tail + "\n" + result.stderr_tail
    for category, pattern in FAILURE_SIGNATURE_RES:
        match = pattern.search(combined)
        if match:
            token = match.group(1) if match.groups() else None
            if category == "command_not_found" and token in TOOLCHAIN_COMMANDS:
                category = "missing_toolchain"
            return FailureSignature(
                category=category, matched_text=match.group(0), stage=result.stage,
                command_index=result.failed_command_index, token=token,
            )
    return FailureSignature(
        category="unknown", matched_text="", stage=result.stage,
        command_index=result.failed_command_index,
    )


# --- delta schema ---


def parse_delta_document(raw, plan: BootstrapPlan) -> RepairDelta:
    """Validate a backend delta document, including index bounds against plan.

    Bounds are checked as the edits would apply sequentially, so later edits
    may legally address positions created by earlier ones.
    """
    if not isinstance(raw, dict):
        raise SchemaError(f"delta must be an object, got {type(raw).__name__}")
    edits_raw = raw.get("edits")
    if not isinstance(edits_raw, list):
        raise SchemaError("delta.edits must be a list")
    rationale = raw.get("rationale", "")
    if not isinstance(rationale, str):
        raise SchemaError("delta.rationale must be a string")

    edits = [_parse_edit(item, i) for i, item in enumerate(edits_raw)]
    delta = RepairDelta(edits=edits, rationale=rationale)
    _check_bounds(plan, delta)
    return delta


def _parse_edit(raw, position: int) -> Edit:
    if not isinstance(raw, dict):
        raise SchemaError(f"edits[{position}] must be an object")
    op = raw.get("op")
    if op not in EDIT_OPS:
        raise SchemaError(f"edits[{position}].op must be one of {EDIT_OPS}, got {op!r}")

    def need_stage() -> str:
        stage = raw.get("stage")
        if stage not in _LIST_STAGES:
            raise SchemaError(f"edits[{position}].stage must be one of {_LIST_STAGES}")
        return stage

    def need_index(key: str) -> int:
        value = raw.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 0:
            raise SchemaError(f"edits[{position}].{key} must be a non-negative integer")
        return value

    def parse_commands(key: str) -> tuple[CommandSpec, ...]:
        value = raw.get(key)
        if not isinstance(value, list):
            raise SchemaError(f"edits[{position}].{key} must be a list of commands")
        return tuple(parse_command_spec(c, "install") for c in value)

    if op == "insert_commands":
        return Edit(op=op, stage=need_stage(), index=need_index("index"),
                    commands=parse_commands("commands"))
    if op == "remove_commands":
        indices = raw.get("indices")
        if not isinstance(indices, list) or not indices or not all(
            isinstance(i, int) and not isinstance(i, bool) and i >= 0 for i in indices
        ):
            raise SchemaError(f"edits[{position}].indices must be non-empty non-negative ints")
        return Edit(op=op, stage=need_stage(), indices=tuple(sorted(set(indices))))
    if op == "replace_commands":
        return Edit(op=op, stage=need_stage(), index=need_index("index"),
                    command=parse_command_spec(raw.get("command"), "install"))
    if op == "move_commands":
        return Edit(op=op, stage=need_stage(), from_index=need_index("from"),
                    to_index=need_index("to"))
    if op in ("replace_doctor", "replace_install"):
        return Edit(op=op, commands=parse_commands("commands"))
    if op == "set_minimal_verify":
        return Edit(op=op, command=parse_command_spec(raw.get("command"), "minimal_verify"))
    if op == "set_strongest_verify":
        command = raw.get("command")
        return Edit(
            op=op,
            command=parse_command_spec(command, "strongest_verify") if command is not None else None,
        )
    # update_field
    field_name = raw.get("field")
    if field_name not in _UPDATE_FIELDS:
        raise SchemaError(f"edits[{position}].field must be one of {_UPDATE_FIELDS}")
    if field_name in ("cwd", "timeout_s"):
        stage = raw.get("stage")
        valid = _LIST_STAGES + ("minimal_verify", "strongest_verify")
        if stage not in valid:
            raise SchemaError(f"edits[{position}].stage must be one of {valid}")
        return Edit(op=op, stage=stage, index=need_index("index"),
                    field_name=field_name, value=raw.get("value"))
    return Edit(op=op, field_name=field_name, value=raw.get("value"))


def _check_bounds(plan: BootstrapPlan, delta: RepairDelta) -> None:
    lengths = {
        "install": len(plan.install_commands),
        "doctor": len(plan.doctor_commands),
        "run_probes": len(plan.goals.run_probes),
        "minimal_verify": 1,
        "strongest_verify": 1 if plan.goals.strongest_verify else 0,
    }
    for edit in delta.edits:
        if edit.op == "insert_commands":
            if edit.index > lengths[edit.stage]:
                raise SchemaError(
                    f"insert index {edit.index} out of bounds for {edit.stage} "
                    f"(length {lengths[edit.stage]})"
                )
            lengths[edit.stage] += len(edit.commands or ())
        elif edit.op == "remove_commands":
            for idx in edit.indices or ():
                if idx >= lengths[edit.stage]:
                    raise SchemaError(
                        f"remove index {idx} out of bounds for {edit.stage} "
                        f"(length {lengths[edit.stage]})"
                    )
            lengths[edit.stage] -= len(edit.indices or ())
        elif edit.op == "replace_commands":
            if edit.index >= lengths[edit.stage]:
                raise SchemaError(
                    f"replace index {edit.index} out of bounds for {edit.stage} "
                    f"(length {lengths[edit.stage]})"
                )
        elif edit.op == "move_commands":
            for idx in (edit.from_index, edit.to_index):
                if idx >= lengths[edit.stage]:
                    raise SchemaError(
                        f"move index {idx} out of bounds for {edit.stage} "
                        f"(length {lengths[edit.stage]})"
                    )
        elif edit.op == "replace_install":
            lengths["install"] = len(edit.commands or ())
        elif edit.op == "replace_doctor":
            lengths["doctor"] = len(edit.commands or ())
        elif edit.op == "set_strongest_verify":
            lengths["strongest_verify"] = 1 if edit.command else 0
        elif edit.op == "update_field" and edit.field_name in ("cwd", "timeout_s"):
            if edit.index >= lengths[edit.stage]:
                raise SchemaError(
                    f"update_field index {edit.index} out of bounds for {edit.stage}"
                )


# --- applying deltas ---


def apply_delta(plan: BootstrapPlan, delta: RepairDelta,
                repo_nonempty: bool = True) -> BootstrapPlan:
    """Apply edits in order onto a copy of the plan; untouched slots are kept
    byte-identical. The edited plan is re-validated before being returned."""
    out = parse_plan_document(plan.to_json_dict())
    for edit in delta.edits:
        _apply_edit(out, edit)
    rejects = reject_violations(validate_plan(out, repo_nonempty=repo_nonempty))
    if rejects:
        raise ResultingPlanRejected(
            "edited plan has reject-severity violations: "
            + ", ".join(v.rule_id for v in rejects),
            violations=rejects,
        )
    return out


def _get_single(plan: BootstrapPlan, stage: str) -> CommandSpec:
    if stage == "minimal_verify":
        return plan.goals.minimal_verify
    if stage == "strongest_verify":
        if plan.goals.strongest_verify is None:
            raise IndexOutOfBounds("plan has no strongest_verify to update")
        return plan.goals.strongest_verify
    raise KeyError(stage)


def _set_single(plan: BootstrapPlan, stage: str, spec: CommandSpec) -> None:
    if stage == "minimal_verify":
        plan.goals.minimal_verify = spec
    else:
        plan.goals.strongest_verify = spec


def _apply_edit(plan: BootstrapPlan, edit: Edit) -> None:
    if edit.op == "insert_commands":
        commands = plan.commands_of(edit.stage)
        if edit.index > len(commands):
            raise IndexOutOfBounds(
                f"insert index {edit.index} out of bounds for {edit.stage}"
            )
        commands[edit.index:edit.index] = list(edit.commands or ())
    elif edit.op == "remove_commands":
        commands = plan.commands_of(edit.stage)
        for idx in sorted(edit.indices or (), reverse=True):
            if idx >= len(commands):
                raise IndexOutOfBounds(
                    f"remove index {idx} out of bounds for {edit.stage}"
                )
            del commands[idx]
    elif edit.op == "replace_commands":
        commands = plan.commands_of(edit.stage)
        if edit.index >= len(commands):
            raise IndexOutOfBounds(
                f"replace index {edit.index} out of bounds for {edit.stage}"
            )
        commands[edit.index] = edit.command
    elif edit.op == "move_commands":
        commands = plan.commands_of(edit.stage)
        for idx in (edit.from_index, edit.to_index):
            if idx >= len(commands):
                raise IndexOutOfBounds(f"move index {idx} out of bounds for {edit.stage}")
        spec = commands.pop(edit.from_index)
        commands.insert(edit.to_index, spec)
    elif edit.op == "replace_install":
        plan.install_commands[:] = list(edit.commands or ())
    elif edit.op == "replace_doctor":
        plan.doctor_commands[:] = list(edit.commands or ())
    elif edit.op == "set_minimal_verify":
        plan.goals.minimal_verify = edit.command
    elif edit.op == "set_strongest_verify":
        plan.goals.strongest_verify = edit.command
    elif edit.op == "update_field":
        if edit.field_name == "agent_context":
            plan.agent_context = str(edit.value or "")
        elif edit.field_name == "evidence_links":
            if isinstance(edit.value, dict):
                plan.evidence_links = {str(k): v for k, v in edit.value.items()}
        elif edit.field_name == "failure_playbook":
            # Playbook state lives outside the plan; the orchestrator applies
            # these edits to its own record.
            pass
        elif edit.field_name in ("cwd", "timeout_s"):
            if edit.stage in _LIST_STAGES:
                commands = plan.commands_of(edit.stage)
                if edit.index >= len(commands):
                    raise IndexOutOfBounds(
                        f"update_field index {edit.index} out of bounds for {edit.stage}"
                    )
                target = commands[edit.index]
                commands[edit.index] = _with_field(target, edit.field_name, edit.value)
            else:
                target = _get_single(plan, edit.stage)
                _set_single(plan, edit.stage, _with_field(target, edit.field_name, edit.value))


def _with_field(spec: CommandSpec, field_name: str, value) -> CommandSpec:
    raw = spec.to_json_dict()
    raw[field_name] = value
    return parse_command_spec(raw, "install")


def propose_repair(plan: BootstrapPlan, contract: BootstrapContract, trace,
                   backend, retry_budget: int = 5, token_ledger=None,
                   include_strongest: bool = False) -> RepairDelta:
    """Ask the repair backend for a delta; invalid responses consume retries."""
    from .backends.base import build_repair_request, request_structured

    diagnose_trace(trace, include_strongest)  # raises NoFailure when nothing failed
    request = build_repair_request(plan, trace)
    return request_structured(
        backend, request, retry_budget,
        validator=lambda doc: parse_delta_document(doc, plan),
        token_ledger=token_ledger,
    )


# --- sanity check ---


def classify_strength(cmd: str) -> int:
    """Four-level verification strength: test > build > import check > identity.

    Commands outside the tables rank with import checks so that replacing a
    recognized target with something unrecognizable reads as a downgrade.
    """
    for pattern in TEST_INVOCATION_RES:
        if pattern.search(cmd):
            return STRENGTH_TEST_SUITE
    for pattern in BUILD_INVOCATION_RES:
        if pattern.search(cmd):
            return STRENGTH_BUILD
    for pattern in IMPORT_CHECK_RES:
        if pattern.search(cmd):
            return STRENGTH_IMPORT_CHECK
    probe = CommandSpec(cmd=cmd, reason=cmd)
    if detect_degenerate_verify(probe, True):
        return STRENGTH_IDENTITY
    return STRENGTH_IMPORT_CHECK


def _trace_shows_non_local(trace_history) -> bool:
    for trace in trace_history or ():
        for result in trace.stage_results:
            combined = result.stdout_tail + "\n" + result.stderr_tail
            for pattern in NON_LOCAL_TRACE_RES:
                if pattern.search(combined):
                    return True
    return False


def _trace_implicates(trace_history, trace_stage: str, index: int) -> bool:
    for trace in trace_history or ():
        for result in trace.stage_results:
            if result.stage == trace_stage and result.failed_command_index == index:
                return True
    return False


def sanity_check(
    original_plan: BootstrapPlan,
    evidence_map: dict,
    strongest_target: CommandSpec | None,
    repaired: BootstrapContract,
    trace_history: list,
) -> SanityVerdict:
    """Reject repairs that weaken verification or erase evidence-backed work.

    Pure function of its inputs; the verdict lists one violation per guarded
    aspect that regressed.
    """
    violations: list[dict] = []
    repaired_minimal = repaired.manifest.minimal_verify
    original_minimal = original_plan.goals.minimal_verify

    if detect_degenerate_verify(repaired_minimal, True):
        violations.append({
            "kind": "verify_weakened",
            "detail": (
                f"minimal_verify became degenerate: {original_minimal.cmd!r} -> "
                f"{repaired_minimal.cmd!r}"
            ),
        })
    elif classify_strength(repaired_minimal.cmd) < classify_strength(original_minimal.cmd):
        violations.append({
            "kind": "plan_goal_drift",
            "detail": (
                f"minimal_verify downgraded from "
                f"{original_minimal.cmd!r} to {repaired_minimal.cmd!r}"
            ),
        })

    if strongest_target is not None:
        repaired_strongest = repaired.manifest.strongest_verify
        dropped = repaired_strongest is None
        weakened = (
            repaired_strongest is not None
            and classify_strength(repaired_strongest.cmd) < classify_strength(strongest_target.cmd)
        )
        if (dropped or weakened) and not _trace_shows_non_local(trace_history):
            violations.append({
                "kind": "strongest_dropped_without_evidence",
                "detail": (
                    f"strongest_verify {strongest_target.cmd!r} was "
                    + ("removed" if dropped else f"weakened to {repaired_strongest.cmd!r}")
                    + " with no trace evidence of a non-local dependency"
                ),
            })

    for plan_stage, trace_stage, old_list, new_list in (
        ("install", "setup", original_plan.install_commands, repaired.manifest.install),
        ("doctor", "doctor", original_plan.doctor_commands, repaired.manifest.doctor),
    ):
        for entry in _diff_lists(plan_stage, old_list, new_list):
            if entry.kind not in (f"{plan_stage}-removed", f"{plan_stage}-replaced"):
                continue
            old_index = entry.from_index
            links = (evidence_map or {}).get(f"{plan_stage}/{old_index}")
            if not links:
                continue
            if not _trace_implicates(trace_history, trace_stage, old_index):
                violations.append({
                    "kind": "evidence_command_deleted",
                    "detail": (
                        f"evidence-linked {plan_stage} command {old_index} was removed "
                        "with no trace implicating it"
                    ),
                })

    return SanityVerdict(accepted=not violations, violations=violations)
