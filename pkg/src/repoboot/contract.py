"""Materialize, load, diff, and freeze the on-disk `.bootstrap` directory.

The directory is the artifact's public contract and always contains exactly
eight files: setup.sh, doctor.sh, verify.sh, commands.json, evidence_map.json,
agent_context.md, failure_playbook.json, safety_warnings.json. Scripts are
POSIX shell with fail-fast semantics and one `### CMD <index>` marker line
before each command so failure locations can be recovered from output alone.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from difflib import SequenceMatcher
from pathlib import Path

from .errors import MalformedManifest, MissingFile, OutputDirNotWritable, PlanRejected
from .plan import (
    BootstrapPlan,
    CommandSpec,
    SafetyWarning,
    VerificationGoals,
    parse_command_spec,
    reject_violations,
    validate_plan,
)
from .serialize import dumps_stable

CONTRACT_FILES = (
    "setup.sh",
    "doctor.sh",
    "verify.sh",
    "commands.json",
    "evidence_map.json",
    "agent_context.md",
    "failure_playbook.json",
    "safety_warnings.json",
)

MANIFEST_SCHEMA_VERSION = 1
PLAYBOOK_MAX_ENTRIES = 20

_SCRIPT_STAGES = {"setup": "install", "doctor": "doctor", "verify": "minimal_verify"}


@dataclass(frozen=True)
class PlaybookEntry:
    signature: str
    fix_summary: str
    outcome: str  # "fixed" | "abandoned"
    round_index: int

    def to_json_dict(self) -> dict:
        return {
            "signature": self.signature,
            "fix_summary": self.fix_summary,
            "outcome": self.outcome,
            "round_index": self.round_index,
        }


@dataclass
class FailurePlaybook:
    """Compressed repair knowledge preserved for future consumers."""

    entries: list[PlaybookEntry] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"entries": [e.to_json_dict() for e in self.entries]}

    @classmethod
    def from_json_dict(cls, raw: dict) -> "FailurePlaybook":
        return cls(entries=[
            PlaybookEntry(e["signature"], e["fix_summary"], e["outcome"], e["round_index"])
            for e in raw.get("entries", [])
        ])


@dataclass
class CommandsManifest:
    install: list[CommandSpec] = field(default_factory=list)
    doctor: list[CommandSpec] = field(default_factory=list)
    minimal_verify: CommandSpec = None  # type: ignore[assignment]
    strongest_verify: CommandSpec | None = None
    run_probes: list[CommandSpec] = field(default_factory=list)
    schema_version: int = MANIFEST_SCHEMA_VERSION

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "install": [c.to_json_dict() for c in self.install],
            "doctor": [c.to_json_dict() for c in self.doctor],
            "minimal_verify": self.minimal_verify.to_json_dict(),
            "strongest_verify": (
                self.strongest_verify.to_json_dict() if self.strongest_verify else None
            ),
            "run_probes": [c.to_json_dict() for c in self.run_probes],
        }


@dataclass
class BootstrapContract:
    root: Path
    plan: BootstrapPlan
    manifest: CommandsManifest
    evidence_map: dict
    failure_playbook: FailurePlaybook
    safety_warnings: list[SafetyWarning]
    agent_context: str


@dataclass(frozen=True)
class FrozenContract:
    contract: BootstrapContract
    content_hash: str
    frozen_at: str

    def to_json_dict(self) -> dict:
        return {
            "root": str(self.contract.root),
            "content_hash": self.content_hash,
            "frozen_at": self.frozen_at,
        }


def manifest_from_plan(plan: BootstrapPlan) -> CommandsManifest:
    return CommandsManifest(
        install=list(plan.install_commands),
        doctor=list(plan.doctor_commands),
        minimal_verify=plan.goals.minimal_verify,
        strongest_verify=plan.goals.strongest_verify,
        run_probes=list(plan.goals.run_probes),
    )


def _sq(text: str) -> str:
    """Single-quote for POSIX shell."""
    return "'" + text.replace("'", "'\"'\"'") + "'"


def render_stage_script(commands: list[CommandSpec], stage: str, start_index: int = 0) -> str:
    """Render a fail-fast stage script with machine-parseable markers.

    Each command runs from its declared cwd (relative to the repository
    root); the first nonzero exit aborts the script with that exit code.
    """
    lines = [
        "#!/usr/bin/env bash",
        f"# repoboot {stage} stage — generated, do not edit",
        "set -u -o pipefail",
        '__repoboot_root="$(pwd)"',
    ]
    for offset, spec in enumerate(commands):
        index = start_index + offset
        lines.append(f"echo '### CMD {index}'")
        lines.append(f'cd "$__repoboot_root" && cd -- {_sq(spec.cwd)} && {{')
        lines.append(spec.cmd)
        lines.append("} || exit $?")
    lines.append("exit 0")
    return "\n".join(lines) + "\n"


def parse_stage_script(text: str) -> list[tuple[int, str, str]]:
    """Recover (index, cwd, cmd) triples from a rendered stage script."""
    out: list[tuple[int, str, str]] = []
    lines = text.splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("echo '### CMD ") and line.endswith("'"):
            index = int(line[len("echo '### CMD "):-1])
            cd_line = lines[i + 1]
            prefix = 'cd "$__repoboot_root" && cd -- '
            cwd_part = cd_line[len(prefix):].rsplit(" && {", 1)[0]
            cwd = cwd_part[1:-1].replace("'\"'\"'", "'") if cwd_part.startswith("'") else cwd_part
            cmd_lines = []
            j = i + 2
            while j < len(lines) and lines[j] != "} || exit $?":
                cmd_lines.append(lines[j])
                j += 1
            out.append((index, cwd, "\n".join(cmd_lines)))
            i = j + 1
        else:
            i += 1
    return out


def materialize_contract(
    plan: BootstrapPlan,
    warnings: list[SafetyWarning],
    playbook: FailurePlaybook,
    outdir: str | Path,
    repo_nonempty: bool = True,
) -> BootstrapContract:
    """Write the eight contract files; refuses plans with reject violations."""
    rejects = reject_violations(validate_plan(plan, repo_nonempty=repo_nonempty))
    if rejects:
        raise PlanRejected(
            "plan has reject-severity violations: "
            + ", ".join(v.rule_id for v in rejects),
            violations=rejects,
        )

    outdir = Path(outdir)
    try:
        if outdir.exists():
            shutil.rmtree(outdir)
        outdir.mkdir(parents=True)
    except OSError as exc:
        raise OutputDirNotWritable(f"cannot prepare {outdir}: {exc}") from exc

    manifest = manifest_from_plan(plan)
    scripts = {
        "setup.sh": render_stage_script(manifest.install, "setup"),
        "doctor.sh": render_stage_script(manifest.doctor, "doctor"),
        "verify.sh": render_stage_script([manifest.minimal_verify], "minimal"),
    }
    for name, text in scripts.items():
        path = outdir / name
        path.write_text(text, encoding="utf-8")
        path.chmod(0o755)

    (outdir / "commands.json").write_text(dumps_stable(manifest.to_json_dict()), encoding="utf-8")
    (outdir / "evidence_map.json").write_text(dumps_stable(plan.evidence_links), encoding="utf-8")
    (outdir / "agent_context.md").write_text(_render_agent_context(plan, warnings), encoding="utf-8")
    (outdir / "failure_playbook.json").write_text(dumps_stable(playbook.to_json_dict()), encoding="utf-8")
    (outdir / "safety_warnings.json").write_text(
        dumps_stable({"warnings": [w.to_json_dict() for w in warnings]}), encoding="utf-8"
    )

    return BootstrapContract(
        root=outdir,
        plan=plan,
        manifest=manifest,
        evidence_map=dict(plan.evidence_links),
        failure_playbook=playbook,
        safety_warnings=list(warnings),
        agent_context=plan.agent_context,
    )


def _render_agent_context(plan: BootstrapPlan, warnings: list[SafetyWarning]) -> str:
    lines = ["# Bootstrap context", ""]
    if plan.agent_context:
        lines += [plan.agent_context.rstrip(), ""]
    lines.append("## Execution protocol")
    lines.append("Run `setup.sh`, then `doctor.sh`, then `verify.sh`; all three must")
    lines.append("exit 0 for the checkout to be considered usable. `commands.json`")
    lines.append("lists the same commands plus the advisory strongest verification.")
    lines.append("")
    if plan.constraints_notes:
        lines.append("## Constraints to preserve")
        for note in plan.constraints_notes:
            lines.append(f"- {note}")
        lines.append("")
    if warnings:
        lines.append("## Safety warnings")
        for w in warnings:
            lines.append(f"- [{w.kind}] {w.stage}/{w.index}: `{w.cmd}`")
        lines.append("")
    return "\n".join(lines)


def _parse_manifest(raw) -> CommandsManifest:
    if not isinstance(raw, dict):
        raise MalformedManifest("commands.json root must be an object")
    version = raw.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise MalformedManifest(f"unsupported commands.json schema_version: {version!r}")
    try:
        install = [parse_command_spec(c, "install") for c in raw.get("install", [])]
        doctor = [parse_command_spec(c, "doctor") for c in raw.get("doctor", [])]
        probes = [parse_command_spec(c, "run_probes") for c in raw.get("run_probes", [])]
        if raw.get("minimal_verify") is None:
            raise MalformedManifest("commands.json lacks minimal_verify")
        minimal = parse_command_spec(raw["minimal_verify"], "minimal_verify")
        strongest = (
            parse_command_spec(raw["strongest_verify"], "strongest_verify")
            if raw.get("strongest_verify") is not None
            else None
        )
    except MalformedManifest:
        raise
    except Exception as exc:
        raise MalformedManifest(f"commands.json is invalid: {exc}") from exc
    return CommandsManifest(
        install=install, doctor=doctor, minimal_verify=minimal,
        strongest_verify=strongest, run_probes=probes,
    )


def load_contract(directory: str | Path) -> BootstrapContract:
    """Parse a `.bootstrap` directory back into a contract value."""
    root = Path(directory)
    if not root.is_dir():
        raise MissingFile(str(root))
    for name in CONTRACT_FILES:
        if not (root / name).is_file():
            raise MissingFile(name)

    try:
        manifest_raw = json.loads((root / "commands.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"commands.json is not valid JSON: {exc}") from exc
    manifest = _parse_manifest(manifest_raw)

    try:
        evidence_map = json.loads((root / "evidence_map.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"evidence_map.json is not valid JSON: {exc}") from exc

    try:
        playbook_raw = json.loads((root / "failure_playbook.json").read_text(encoding="utf-8"))
        playbook = FailurePlaybook.from_json_dict(playbook_raw)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedManifest(f"failure_playbook.json is invalid: {exc}") from exc

    try:
        warnings_raw = json.loads((root / "safety_warnings.json").read_text(encoding="utf-8"))
        warnings = [
            SafetyWarning(w["kind"], w["stage"], w["index"], w["cmd"], w["detail"])
            for w in warnings_raw.get("warnings", [])
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise MalformedManifest(f"safety_warnings.json is invalid: {exc}") from exc

    agent_context = (root / "agent_context.md").read_text(encoding="utf-8")

    plan = BootstrapPlan(
        install_commands=list(manifest.install),
        doctor_commands=list(manifest.doctor),
        goals=VerificationGoals(
            minimal_verify=manifest.minimal_verify,
            strongest_verify=manifest.strongest_verify,
            run_probes=list(manifest.run_probes),
        ),
        evidence_links=evidence_map if isinstance(evidence_map, dict) else {},
        agent_context=agent_context,
    )
    return BootstrapContract(
        root=root, plan=plan, manifest=manifest,
        evidence_map=plan.evidence_links, failure_playbook=playbook,
        safety_warnings=warnings, agent_context=agent_context,
    )


def hash_contract_dir(directory: str | Path) -> str:
    """Content digest over the eight contract files, order-independent."""
    root = Path(directory)
    digest = hashlib.sha256()
    for name in CONTRACT_FILES:
        digest.update(name.encode("utf-8"))
        digest.update(b"\0")
        digest.update((root / name).read_bytes())
        digest.update(b"\0")
    return digest.hexdigest()


def freeze_contract(contract: BootstrapContract) -> FrozenContract:
    return FrozenContract(
        contract=contract,
        content_hash=hash_contract_dir(contract.root),
        frozen_at=datetime.now(timezone.utc).isoformat(),
    )


def verify_frozen(frozen: FrozenContract) -> bool:
    return hash_contract_dir(frozen.contract.root) == frozen.content_hash


@dataclass(frozen=True)
class DiffEntry:
    kind: str
    stage: str
    index: int | None = None
    from_index: int | None = None
    detail: str = ""

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "stage": self.stage,
            "index": self.index,
            "from_index": self.from_index,
            "detail": self.detail,
        }


def _spec_key(spec: CommandSpec) -> tuple:
    return (spec.cmd, spec.cwd, spec.timeout_s, spec.reason, spec.provenance)


def _diff_lists(stage: str, old: list[CommandSpec], new: list[CommandSpec]) -> list[DiffEntry]:
    old_keys = [_spec_key(s) for s in old]
    new_keys = [_spec_key(s) for s in new]
    matcher = SequenceMatcher(a=old_keys, b=new_keys, autojunk=False)
    removed: list[tuple[int, tuple]] = []
    inserted: list[tuple[int, tuple]] = []
    replaced: list[DiffEntry] = []
    for op, i1, i2, j1, j2 in matcher.get_opcodes():
        if op == "equal":
            continue
        if op == "replace":
            span = min(i2 - i1, j2 - j1)
            for k in range(span):
                replaced.append(DiffEntry(
                    kind=f"{stage}-replaced", stage=stage, index=j1 + k,
                    from_index=i1 + k,
                    detail=f"{old[i1 + k].cmd!r} -> {new[j1 + k].cmd!r}",
                ))
            for k in range(span, i2 - i1):
                removed.append((i1 + k, old_keys[i1 + k]))
            for k in range(span, j2 - j1):
                inserted.append((j1 + k, new_keys[j1 + k]))
        elif op == "delete":
            removed.extend((i, old_keys[i]) for i in range(i1, i2))
        elif op == "insert":
            inserted.extend((j, new_keys[j]) for j in range(j1, j2))

    entries = list(replaced)
    leftover_inserts = list(inserted)
    for old_index, key in removed:
        match = next((pair for pair in leftover_inserts if pair[1] == key), None)
        if match is not None:
            leftover_inserts.remove(match)
            entries.append(DiffEntry(
                kind=f"{stage}-moved", stage=stage, index=match[0], from_index=old_index,
                detail=f"{key[0]!r} moved",
            ))
        else:
            entries.append(DiffEntry(
                kind=f"{stage}-removed", stage=stage, from_index=old_index,
                detail=f"{key[0]!r} removed",
            ))
    for new_index, key in leftover_inserts:
        entries.append(DiffEntry(
            kind=f"{stage}-inserted", stage=stage, index=new_index,
            detail=f"{key[0]!r} inserted",
        ))
    return entries


def diff_contract(old: BootstrapContract, new: BootstrapContract) -> list[DiffEntry]:
    """Structural per-stage diff between two contracts; identity yields []."""
    entries: list[DiffEntry] = []
    entries += _diff_lists("install", old.manifest.install, new.manifest.install)
    entries += _diff_lists("doctor", old.manifest.doctor, new.manifest.doctor)
    entries += _diff_lists("run_probes", old.manifest.run_probes, new.manifest.run_probes)

    if _spec_key(old.manifest.minimal_verify) != _spec_key(new.manifest.minimal_verify):
        entries.append(DiffEntry(
            kind="minimal-verify-changed", stage="minimal_verify", index=0,
            detail=f"{old.manifest.minimal_verify.cmd!r} -> {new.manifest.minimal_verify.cmd!r}",
        ))

    old_strongest = old.manifest.strongest_verify
    new_strongest = new.manifest.strongest_verify
    if old_strongest is None and new_strongest is not None:
        entries.append(DiffEntry(
            kind="strongest-verify-added", stage="strongest_verify", index=0,
            detail=f"{new_strongest.cmd!r} added",
        ))
    elif old_strongest is not None and new_strongest is None:
        entries.append(DiffEntry(
            kind="strongest-verify-dropped", stage="strongest_verify", index=0,
            detail=f"{old_strongest.cmd!r} dropped",
        ))
    elif old_strongest is not None and new_strongest is not None:
        if _spec_key(old_strongest) != _spec_key(new_strongest):
            entries.append(DiffEntry(
                kind="strongest-verify-changed", stage="strongest_verify", index=0,
                detail=f"{old_strongest.cmd!r} -> {new_strongest.cmd!r}",
            ))
    return entries
