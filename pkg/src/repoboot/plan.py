"""Bootstrap plan model, schema parsing, and the deterministic validator."""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .errors import SchemaError, StructuredOutputExhausted
from .patterns import (
    DEGENERATE_BARE_COMMANDS,
    DEGENERATE_CAT_RE,
    DEGENERATE_PREFIXES,
    DEGENERATE_VERSION_RE,
    DEGENERATE_VERSION_SUBCOMMANDS,
    MUTATION_RES,
    RISK_RES,
    TEST_INVOCATION_RES,
)
from .serialize import dumps_stable

# Per-phase timeout applied when a backend omits one.
PHASE_TIMEOUTS = {
    "install": 3600,
    "doctor": 120,
    "minimal_verify": 300,
    "strongest_verify": 1200,
    "run_probes": 300,
}

PLAN_STAGES = ("install", "doctor", "minimal_verify", "strongest_verify", "run_probes")

BACKEND_INFERRED = "backend-inferred"

_SEGMENT_SPLIT_RE = re.compile(r"[;|]|&&|\|\|")
_TOKEN_RE = re.compile(r"[A-Za-z0-9_.\-/]+")


@dataclass(frozen=True)
class CommandSpec:
    """One shell command with its working directory, budget, and provenance."""

    cmd: str
    cwd: str = "."
    timeout_s: int = 300
    reason: str = ""
    provenance: str = BACKEND_INFERRED

    def to_json_dict(self) -> dict:
        return {
            "cmd": self.cmd,
            "cwd": self.cwd,
            "timeout_s": self.timeout_s,
            "reason": self.reason,
            "provenance": self.provenance,
        }


@dataclass
class VerificationGoals:
    minimal_verify: CommandSpec
    strongest_verify: CommandSpec | None = None
    run_probes: list[CommandSpec] = field(default_factory=list)


@dataclass
class BootstrapPlan:
    """Schema-constrained bootstrap strategy: ordered phases plus goals."""

    install_commands: list[CommandSpec] = field(default_factory=list)
    doctor_commands: list[CommandSpec] = field(default_factory=list)
    goals: VerificationGoals = None  # type: ignore[assignment]
    constraints_notes: list[str] = field(default_factory=list)
    evidence_links: dict[str, list[dict]] = field(default_factory=dict)
    agent_context: str = ""

    def to_json_dict(self) -> dict:
        return {
            "install_commands": [c.to_json_dict() for c in self.install_commands],
            "doctor_commands": [c.to_json_dict() for c in self.doctor_commands],
            "minimal_verify": self.goals.minimal_verify.to_json_dict(),
            "strongest_verify": (
                self.goals.strongest_verify.to_json_dict()
                if self.goals.strongest_verify
                else None
            ),
            "run_probes": [c.to_json_dict() for c in self.goals.run_probes],
            "constraints_notes": list(self.constraints_notes),
            "evidence_links": self.evidence_links,
            "agent_context": self.agent_context,
        }

    def to_json(self) -> str:
        return dumps_stable(self.to_json_dict())

    def commands_of(self, stage: str) -> list[CommandSpec]:
        """Live command list for a list-valued stage."""
        if stage == "install":
            return self.install_commands
        if stage == "doctor":
            return self.doctor_commands
        if stage == "run_probes":
            return self.goals.run_probes
        raise KeyError(f"not a list-valued stage: {stage}")

    def all_commands(self):
        """Yield (stage, index, CommandSpec) over every command in the plan."""
        for stage in ("install", "doctor"):
            for idx, cmd in enumerate(self.commands_of(stage)):
                yield stage, idx, cmd
        yield "minimal_verify", 0, self.goals.minimal_verify
        if self.goals.strongest_verify is not None:
            yield "strongest_verify", 0, self.goals.strongest_verify
        for idx, cmd in enumerate(self.goals.run_probes):
            yield "run_probes", idx, cmd


@dataclass(frozen=True)
class ConstraintViolation:
    rule_id: str
    severity: str  # "reject" | "warn"
    target: str  # "<stage>/<index>"
    message: str

    def to_json_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "severity": self.severity,
            "target": self.target,
            "message": self.message,
        }


@dataclass(frozen=True)
class SafetyWarning:
    kind: str
    stage: str
    index: int
    cmd: str
    detail: str

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stage": self.stage,
            "index": self.index,
            "cmd": self.cmd,
            "detail": self.detail,
        }


def parse_command_spec(raw, phase: str) -> CommandSpec:
    """Validate one command document; fills the phase default timeout."""
    if not isinstance(raw, dict):
        raise SchemaError(f"{phase}: command must be an object, got {type(raw).__name__}")
    cmd = raw.get("cmd")
    if not isinstance(cmd, str) or not cmd.strip():
        raise SchemaError(f"{phase}: cmd must be a non-empty string")
    if "\n" in cmd:
        raise SchemaError(f"{phase}: cmd must be a single line")
    cwd = raw.get("cwd", ".")
    if not isinstance(cwd, str) or not cwd:
        raise SchemaError(f"{phase}: cwd must be a non-empty string")
    if cwd.startswith(("/", "\\")) or re.match(r"^[A-Za-z]:", cwd):
        raise SchemaError(f"{phase}: cwd must be relative to the repository root: {cwd!r}")
    parts = [p for p in cwd.split("/") if p not in ("", ".")]
    depth = 0
    for part in parts:
        depth += -1 if part == ".." else 1
        if depth < 0:
            raise SchemaError(f"{phase}: cwd escapes the repository root: {cwd!r}")
    timeout_s = raw.get("timeout_s")
    if timeout_s is None:
        timeout_s = PHASE_TIMEOUTS.get(phase, 300)
    if not isinstance(timeout_s, int) or isinstance(timeout_s, bool) or timeout_s <= 0:
        raise SchemaError(f"{phase}: timeout_s must be a positive integer")
    reason = raw.get("reason")
    if not isinstance(reason, str) or not reason.strip():
        raise SchemaError(f"{phase}: reason must be a non-empty string")
    provenance = raw.get("provenance", BACKEND_INFERRED)
    if not isinstance(provenance, str) or not provenance:
        raise SchemaError(f"{phase}: provenance must be a string")
    return CommandSpec(cmd=cmd.strip(), cwd=cwd, timeout_s=timeout_s, reason=reason,
                       provenance=provenance)


def parse_plan_document(raw) -> BootstrapPlan:
    """Validate a backend plan document against the plan schema."""
    if not isinstance(raw, dict):
        raise SchemaError(f"plan must be an object, got {type(raw).__name__}")
    unknown = set(raw) - set(PLAN_STAGES) - {
        "install_commands", "doctor_commands", "constraints_notes",
        "evidence_links", "agent_context",
    }
    if unknown:
        raise SchemaError(f"plan has unknown fields: {sorted(unknown)}")

    def command_list(key: str, phase: str) -> list[CommandSpec]:
        value = raw.get(key, [])
        if value is None:
            return []
        if not isinstance(value, list):
            raise SchemaError(f"{key} must be a list")
        return [parse_command_spec(item, phase) for item in value]

    install = command_list("install_commands", "install")
    doctor = command_list("doctor_commands", "doctor")
    probes = command_list("run_probes", "run_probes")

    minimal_raw = raw.get("minimal_verify")
    if minimal_raw is None:
        raise SchemaError("minimal_verify is mandatory")
    minimal = parse_command_spec(minimal_raw, "minimal_verify")

    strongest_raw = raw.get("strongest_verify")
    strongest = (
        parse_command_spec(strongest_raw, "strongest_verify")
        if strongest_raw is not None
        else None
    )

    notes = raw.get("constraints_notes", [])
    if notes is None:
        notes = []
    if not isinstance(notes, list) or not all(isinstance(n, str) for n in notes):
        raise SchemaError("constraints_notes must be a list of strings")

    links = raw.get("evidence_links", {})
    if links is None:
        links = {}
    if not isinstance(links, dict):
        raise SchemaError("evidence_links must be an object")

    agent_context = raw.get("agent_context", "")
    if agent_context is None:
        agent_context = ""
    if not isinstance(agent_context, str):
        raise SchemaError("agent_context must be a string")

    return BootstrapPlan(
        install_commands=install,
        doctor_commands=doctor,
        goals=VerificationGoals(minimal_verify=minimal, strongest_verify=strongest,
                                run_probes=probes),
        constraints_notes=notes,
        evidence_links={str(k): v for k, v in links.items()},
        agent_context=agent_context,
    )


def plan_from_json_dict(raw: dict) -> BootstrapPlan:
    """Alias used where the document is already known to be schema-valid."""
    return parse_plan_document(raw)


def detect_degenerate_verify(command: CommandSpec, repo_nonempty: bool) -> bool:
    """True when the command cannot evidence usability of a non-empty checkout.

    A compound command is degenerate only if every segment is; recognized
    test-runner invocations are never degenerate.
    """
    if not repo_nonempty:
        return False
    segments = [s.strip() for s in _SEGMENT_SPLIT_RE.split(command.cmd)]
    segments = [s for s in segments if s]
    if not segments:
        return True
    return all(_segment_degenerate(s) for s in segments)


def _segment_degenerate(segment: str) -> bool:
    if DEGENERATE_VERSION_RE.search(segment):
        return True
    tokens = segment.split()
    if len(tokens) == 2 and tokens[1] in DEGENERATE_VERSION_SUBCOMMANDS:
        return True
    for pattern in TEST_INVOCATION_RES:
        if pattern.search(segment):
            return False
    if segment in DEGENERATE_BARE_COMMANDS:
        return True
    if tokens and tokens[0] in DEGENERATE_PREFIXES:
        return True
    if DEGENERATE_CAT_RE.match(segment):
        return True
    return False


def screen_risky_commands(plan: BootstrapPlan) -> list[SafetyWarning]:
    """Match every command against the risk table; warnings never reject."""
    warnings: list[SafetyWarning] = []
    for stage, index, spec in plan.all_commands():
        for kind, pattern in RISK_RES:
            match = pattern.search(spec.cmd)
            if match:
                warnings.append(
                    SafetyWarning(kind=kind, stage=stage, index=index, cmd=spec.cmd,
                                  detail=match.group(0))
                )
    return warnings


def _reason_matches(spec: CommandSpec) -> bool:
    cmd_tokens = {t.lower() for t in _TOKEN_RE.findall(spec.cmd)}
    reason_tokens = {t.lower() for t in _TOKEN_RE.findall(spec.reason)}
    return bool(cmd_tokens & reason_tokens)


def validate_plan(plan: BootstrapPlan, repo_nonempty: bool = True) -> list[ConstraintViolation]:
    """Run every constraint rule; reject severities block materialization.

    The validator is total: it never raises for a schema-valid plan and never
    mutates its input.
    """
    violations: list[ConstraintViolation] = []
    minimal = plan.goals.minimal_verify

    if detect_degenerate_verify(minimal, repo_nonempty):
        violations.append(ConstraintViolation(
            rule_id="degenerate-verify", severity="reject", target="minimal_verify/0",
            message=f"minimal_verify cannot evidence a non-empty checkout: {minimal.cmd!r}",
        ))
    elif detect_degenerate_verify(minimal, True) and not repo_nonempty:
        violations.append(ConstraintViolation(
            rule_id="minimal-verify-weak", severity="warn", target="minimal_verify/0",
            message=f"minimal_verify is weak but the repository is empty: {minimal.cmd!r}",
        ))

    for stage in ("install", "doctor"):
        for index, spec in enumerate(plan.commands_of(stage)):
            for pattern in TEST_INVOCATION_RES:
                if pattern.search(spec.cmd):
                    violations.append(ConstraintViolation(
                        rule_id="verify-in-install", severity="reject",
                        target=f"{stage}/{index}",
                        message=(
                            "validation and test commands belong in verification "
                            f"phases only: {spec.cmd!r}"
                        ),
                    ))
                    break

    for index, spec in enumerate(plan.doctor_commands):
        for pattern in MUTATION_RES:
            if pattern.search(spec.cmd):
                violations.append(ConstraintViolation(
                    rule_id="doctor-not-readonly", severity="reject",
                    target=f"doctor/{index}",
                    message=f"doctor commands must be read-only health checks: {spec.cmd!r}",
                ))
                break

    for index, spec in enumerate(plan.install_commands):
        if spec.cmd == minimal.cmd:
            violations.append(ConstraintViolation(
                rule_id="install-duplicates-verify", severity="reject",
                target=f"install/{index}",
                message=f"install command duplicates minimal_verify: {spec.cmd!r}",
            ))

    for stage, index, spec in plan.all_commands():
        if not _reason_matches(spec):
            violations.append(ConstraintViolation(
                rule_id="reason-command-mismatch", severity="reject",
                target=f"{stage}/{index}",
                message=f"reason does not mention any token of the command: {spec.cmd!r}",
            ))

    strongest = plan.goals.strongest_verify
    if strongest is not None and strongest.provenance == BACKEND_INFERRED:
        violations.append(ConstraintViolation(
            rule_id="strongest-unsourced", severity="warn", target="strongest_verify/0",
            message="strongest_verify should carry CI or build-evidence provenance",
        ))

    for warning in screen_risky_commands(plan):
        violations.append(ConstraintViolation(
            rule_id=f"risky-{warning.kind}", severity="warn",
            target=f"{warning.stage}/{warning.index}",
            message=f"risky command is allowed but logged: {warning.cmd!r}",
        ))

    return violations


def reject_violations(violations: list[ConstraintViolation]) -> list[ConstraintViolation]:
    return [v for v in violations if v.severity == "reject"]


def generate_plan(discovery, ci, backend, retry_budget: int = 5,
                  token_ledger=None) -> BootstrapPlan:
    """Ask the planner backend for a plan, retrying schema-invalid responses.

    Raises StructuredOutputExhausted once the retry budget is spent and
    BackendUnavailable if the backend cannot serve at all.
    """
    from .backends.base import build_plan_request, request_structured

    if retry_budget < 1:
        raise StructuredOutputExhausted("retry budget must be at least 1", attempts=0)
    request = build_plan_request(discovery, ci)
    return request_structured(
        backend, request, retry_budget, validator=parse_plan_document,
        token_ledger=token_ledger,
    )
