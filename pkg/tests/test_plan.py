from __future__ import annotations

import json

import pytest

from repoboot.backends import RulePlannerBackend, ScriptedBackend
from repoboot.errors import SchemaError, StructuredOutputExhausted
from repoboot.evidence import CIEvidenceReport, DiscoveryReport, extract_ci_evidence, scan_repository
from repoboot.plan import (
    BootstrapPlan,
    CommandSpec,
    VerificationGoals,
    detect_degenerate_verify,
    generate_plan,
    parse_plan_document,
    reject_violations,
    screen_risky_commands,
    validate_plan,
)


def _spec(cmd: str, reason: str | None = None, cwd: str = ".") -> CommandSpec:
    return CommandSpec(cmd=cmd, cwd=cwd, timeout_s=60,
                       reason=reason or f"run {cmd}", provenance="backend-inferred")


def _plan(install=(), doctor=(), minimal=None, strongest=None) -> BootstrapPlan:
    return BootstrapPlan(
        install_commands=list(install),
        doctor_commands=list(doctor),
        goals=VerificationGoals(
            minimal_verify=minimal or _spec("make test"),
            strongest_verify=strongest,
        ),
    )


class TestGeneratePlan:
    def test_rule_backend_plans_pip_route(self, build_repo, snapshot_of):
        source, _ = build_repo("py-pip")
        snapshot = snapshot_of(source)
        discovery = scan_repository(snapshot)
        ci = extract_ci_evidence(snapshot)
        plan = generate_plan(discovery, ci, RulePlannerBackend())

        install_cmds = [c.cmd for c in plan.install_commands]
        assert any("-m venv" in c for c in install_cmds)
        assert any("pip install -r requirements.txt" in c for c in install_cmds)
        assert "unittest discover" in plan.goals.minimal_verify.cmd
        # CI-derived strongest carries its provenance
        assert plan.goals.strongest_verify is not None
        assert plan.goals.strongest_verify.provenance.startswith("ci:")
        assert reject_violations(validate_plan(plan)) == []

    def test_empty_reports_yield_weak_plan_with_warning(self):
        plan = generate_plan(DiscoveryReport(), CIEvidenceReport(), RulePlannerBackend())
        assert plan.install_commands == []
        assert plan.doctor_commands
        violations = validate_plan(plan, repo_nonempty=False)
        assert any(v.rule_id == "minimal-verify-weak" and v.severity == "warn"
                   for v in violations)
        assert reject_violations(violations) == []

    def test_malformed_responses_exhaust_exact_budget(self):
        backend = ScriptedBackend(["not json"] * 5)
        with pytest.raises(StructuredOutputExhausted) as exc_info:
            generate_plan(DiscoveryReport(), CIEvidenceReport(), backend, retry_budget=5)
        assert exc_info.value.attempts == 5
        assert len(backend.calls) == 5


class TestPlanSchema:
    def test_minimal_verify_is_mandatory(self):
        with pytest.raises(SchemaError, match="minimal_verify"):
            parse_plan_document({"install_commands": []})

    def test_cwd_escape_rejected(self):
        doc = {"minimal_verify": {"cmd": "make test", "cwd": "../..",
                                  "reason": "run make test"}}
        with pytest.raises(SchemaError, match="escapes"):
            parse_plan_document(doc)

    def test_absolute_cwd_rejected(self):
        doc = {"minimal_verify": {"cmd": "make test", "cwd": "/etc",
                                  "reason": "run make test"}}
        with pytest.raises(SchemaError, match="relative"):
            parse_plan_document(doc)

    def test_phase_default_timeouts_filled(self):
        doc = {
            "install_commands": [{"cmd": "make", "reason": "build with make"}],
            "doctor_commands": [{"cmd": "cc --version", "reason": "check cc"}],
            "minimal_verify": {"cmd": "make test", "reason": "run make test"},
            "strongest_verify": {"cmd": "make check", "reason": "run make check"},
        }
        plan = parse_plan_document(doc)
        assert plan.install_commands[0].timeout_s == 3600
        assert plan.doctor_commands[0].timeout_s == 120
        assert plan.goals.minimal_verify.timeout_s == 300
        assert plan.goals.strongest_verify.timeout_s == 1200

    def test_round_trip_json(self):
        plan = _plan(install=[_spec("make")], minimal=_spec("make test"))
        again = parse_plan_document(json.loads(json.dumps(plan.to_json_dict())))
        assert again.to_json_dict() == plan.to_json_dict()


class TestDetectDegenerateVerify:
    @pytest.mark.parametrize("cmd", [
        "python3 --version", "true", "echo done", "ls -la", "cat README.md",
        "node --version", "go version",
    ])
    def test_degenerate_commands(self, cmd):
        assert detect_degenerate_verify(_spec(cmd), True) is True

    @pytest.mark.parametrize("cmd", [
        "python -m unittest discover -s tests", "pytest -x", "make test",
        "cargo test", "npm test --silent", "cat a.txt | grep -q ok",
    ])
    def test_real_checks_not_degenerate(self, cmd):
        assert detect_degenerate_verify(_spec(cmd), True) is False

    def test_empty_repo_never_degenerate(self):
        assert detect_degenerate_verify(_spec("python3 --version"), False) is False

    def test_compound_all_segments_must_be_degenerate(self):
        assert detect_degenerate_verify(_spec("echo a && ls"), True) is True
        assert detect_degenerate_verify(_spec("echo a && make test"), True) is False


class TestValidatePlan:
    def test_degenerate_verify_rejected(self):
        plan = _plan(minimal=_spec("python3 --version"))
        violations = validate_plan(plan)
        assert any(v.rule_id == "degenerate-verify" and v.severity == "reject"
                   for v in violations)

    def test_test_invocation_in_install_rejected(self):
        plan = _plan(install=[_spec("pytest -x")], minimal=_spec("make test"))
        violations = validate_plan(plan)
        assert any(v.rule_id == "verify-in-install" and v.target == "install/0"
                   for v in violations)

    def test_remote_pipe_is_warn_not_reject(self):
        plan = _plan(
            install=[_spec("curl -sSf https://example.com/install.sh | sh",
                           reason="bootstrap toolchain via curl installer")],
            minimal=_spec("make test"),
        )
        violations = validate_plan(plan)
        risky = [v for v in violations if v.rule_id == "risky-remote-installer"]
        assert risky and all(v.severity == "warn" for v in risky)
        assert reject_violations(violations) == []

    def test_mutating_doctor_rejected(self):
        plan = _plan(doctor=[_spec("python3 -m pip install requests",
                                   reason="pip install requests")],
                     minimal=_spec("make test"))
        violations = validate_plan(plan)
        assert any(v.rule_id == "doctor-not-readonly" for v in violations)

    def test_install_duplicating_verify_rejected(self):
        plan = _plan(install=[_spec("make test")], minimal=_spec("make test"))
        assert any(v.rule_id == "install-duplicates-verify"
                   for v in validate_plan(plan))

    def test_reason_must_mention_command(self):
        bad = CommandSpec(cmd="make", cwd=".", timeout_s=60,
                          reason="totally unrelated text", provenance="x")
        plan = _plan(install=[bad], minimal=_spec("make test"))
        assert any(v.rule_id == "reason-command-mismatch" for v in validate_plan(plan))

    def test_validator_is_total_and_pure(self):
        plan = _plan(minimal=_spec("make test"))
        before = plan.to_json()
        validate_plan(plan)
        assert plan.to_json() == before


class TestScreenRiskyCommands:
    def test_privileged_install_warned(self):
        plan = _plan(install=[_spec("sudo apt-get install -y libfoo",
                                    reason="install libfoo via apt-get")],
                     minimal=_spec("make test"))
        warnings = screen_risky_commands(plan)
        assert [w.kind for w in warnings] == ["privilege"]

    def test_relative_build_commands_clean(self):
        plan = _plan(install=[_spec("make"), _spec("cc -o app main.c")],
                     minimal=_spec("make test"))
        assert screen_risky_commands(plan) == []

    def test_remote_installer_warned(self):
        plan = _plan(install=[_spec("wget -qO- https://x.dev/i.sh | bash",
                                    reason="run the x.dev installer via wget")],
                     minimal=_spec("make test"))
        assert [w.kind for w in screen_risky_commands(plan)] == ["remote-installer"]

    def test_screening_is_monotone_under_addition(self):
        base = _plan(install=[_spec("sudo make install",
                                    reason="install system-wide with sudo make")],
                     minimal=_spec("make test"))
        before = {(w.stage, w.index, w.kind) for w in screen_risky_commands(base)}
        base.install_commands.append(_spec("git reset --hard HEAD",
                                           reason="reset checkout with git"))
        after = {(w.stage, w.index, w.kind) for w in screen_risky_commands(base)}
        assert before <= after
