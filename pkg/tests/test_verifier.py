from __future__ import annotations

import shutil
import time
from hashlib import sha256

import pytest

from repoboot.contract import FailurePlaybook, materialize_contract, render_stage_script
from repoboot.errors import WarmTraceRejected
from repoboot.plan import BootstrapPlan, CommandSpec, VerificationGoals
from repoboot.verifier import (
    ExecutionTrace,
    Session,
    StageResult,
    VerifierConfig,
    clean_replay,
    close_session,
    open_session,
    run_stage,
    validity,
    verify_contract,
)


def _spec(cmd: str, cwd: str = ".", timeout_s: int = 60) -> CommandSpec:
    return CommandSpec(cmd=cmd, cwd=cwd, timeout_s=timeout_s, reason=f"run {cmd}",
                       provenance="backend-inferred")


def _plan(install=(), doctor=(), minimal=None, strongest=None) -> BootstrapPlan:
    return BootstrapPlan(
        install_commands=list(install),
        doctor_commands=list(doctor),
        goals=VerificationGoals(minimal_verify=minimal or _spec("test -f README.md"),
                                strongest_verify=strongest),
    )


@pytest.fixture
def sandbox_config():
    return VerifierConfig(executor="local_sandbox")


@pytest.fixture
def repo_snapshot(build_repo, snapshot_of):
    source, _ = build_repo("make-c")
    return snapshot_of(source)


def _contract(tmp_path, plan):
    return materialize_contract(plan, [], FailurePlaybook(), tmp_path / ".bootstrap")


class TestSessions:
    def test_two_clean_sessions_are_disjoint_and_fresh(self, repo_snapshot, sandbox_config):
        first = open_session(repo_snapshot, sandbox_config, mode="clean")
        second = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            assert first.id != second.id
            assert first.environment_state == "fresh"
            assert second.environment_state == "fresh"
            assert first.env.repo != second.env.repo
        finally:
            close_session(first)
            close_session(second)

    def test_sandbox_env_is_scrubbed(self, repo_snapshot, sandbox_config, monkeypatch):
        monkeypatch.setenv("SUPER_SECRET_TOKEN", "hunter2")
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            assert "SUPER_SECRET_TOKEN" not in session.env.env_vars
            assert session.env.env_vars["HOME"].startswith(str(session.env.root))
        finally:
            close_session(session)

    def test_session_close_removes_environment(self, repo_snapshot, sandbox_config):
        session = open_session(repo_snapshot, sandbox_config, mode="warm")
        root = session.env.root
        close_session(session)
        assert not root.exists()

    def test_container_executor_unavailable_without_runtime(self, repo_snapshot):
        if shutil.which("docker"):
            pytest.skip("container runtime present; unavailability path not testable")
        from repoboot.errors import ExecutorUnavailable

        config = VerifierConfig(executor="container")
        with pytest.raises(ExecutorUnavailable):
            open_session(repo_snapshot, config, mode="clean")


class TestRunStage:
    def test_passing_script(self, repo_snapshot, sandbox_config):
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            script = render_stage_script([_spec("echo ok")], "setup")
            result = run_stage(session, "setup", script, timeout_s=30)
            assert result.outcome == "pass"
            assert result.exit_code == 0
            assert result.commands_run == 1
        finally:
            close_session(session)

    def test_timeout_terminates_process_tree(self, repo_snapshot, sandbox_config):
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            script = render_stage_script([_spec("sleep 30", timeout_s=2)], "setup")
            started = time.monotonic()
            result = run_stage(session, "setup", script, timeout_s=2)
            elapsed = time.monotonic() - started
            assert result.outcome == "timeout"
            assert result.exit_code is None
            assert result.duration_s >= 2
            assert elapsed < 2 + 2.0 + 1.0  # timeout + grace + slack
        finally:
            close_session(session)

    def test_failed_command_index_recovered_from_markers(self, repo_snapshot, sandbox_config):
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            commands = [_spec("echo a"), _spec("echo b"), _spec("echo c"),
                        _spec("exit 3"), _spec("echo never")]
            script = render_stage_script(commands, "setup")
            result = run_stage(session, "setup", script, timeout_s=30)
            assert result.outcome == "fail"
            assert result.failed_command_index == 3
            assert result.commands_run == 4
        finally:
            close_session(session)


class TestVerifyContract:
    def test_good_contract_all_gated_stages_pass(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(
            install=[_spec("make")],
            doctor=[_spec("cc --version")],
            minimal=_spec("make test"),
        ))
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            trace = verify_contract(session, contract)
            outcomes = {r.stage: r.outcome for r in trace.stage_results}
            assert outcomes == {"setup": "pass", "doctor": "pass", "minimal": "pass"}
        finally:
            close_session(session)

    def test_setup_failure_skips_later_stages(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(
            install=[_spec("exit 1")],
            doctor=[_spec("cc --version")],
            minimal=_spec("make test"),
        ))
        session = open_session(repo_snapshot, sandbox_config, mode="clean")
        try:
            trace = verify_contract(session, contract, include_strongest=True)
            outcomes = {r.stage: r.outcome for r in trace.stage_results}
            assert outcomes["setup"] == "fail"
            assert outcomes["doctor"] == "skipped"
            assert outcomes["minimal"] == "skipped"
            assert outcomes["strongest"] == "skipped"
        finally:
            close_session(session)

    def test_strongest_failure_never_blocks_validity(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(
            install=[_spec("make")],
            minimal=_spec("make test"),
            strongest=_spec("exit 1"),
        ))
        trace = clean_replay(repo_snapshot, contract, sandbox_config)
        assert trace.result_for("strongest").outcome == "fail"
        assert validity(trace) is True

    def test_warm_reuse_skips_earlier_passing_stages(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(
            install=[_spec("make")],
            doctor=[_spec("cc --version")],
            minimal=_spec("make test"),
        ))
        session = open_session(repo_snapshot, sandbox_config, mode="warm")
        try:
            verify_contract(session, contract)
            assert session.executed_setup_count == 1
            second = verify_contract(session, contract, rerun_from="minimal")
            by_stage = {r.stage: r for r in second.stage_results}
            assert by_stage["setup"].reused and by_stage["setup"].commands_run == 0
            assert by_stage["doctor"].reused
            assert by_stage["minimal"].outcome == "pass" and not by_stage["minimal"].reused
            assert session.executed_setup_count == 1
        finally:
            close_session(session)

    def test_setup_suffix_resume_runs_only_appended_commands(
        self, repo_snapshot, sandbox_config, tmp_path
    ):
        base = _plan(install=[_spec("make")], minimal=_spec("make test"))
        contract = _contract(tmp_path / "a", base)
        session = open_session(repo_snapshot, sandbox_config, mode="warm")
        try:
            verify_contract(session, contract)
            grown = _plan(install=[_spec("make"), _spec("echo appended")],
                          minimal=_spec("make test"))
            contract2 = materialize_contract(grown, [], FailurePlaybook(),
                                             tmp_path / "b" / ".bootstrap")
            trace = verify_contract(session, contract2, rerun_from="setup",
                                    setup_resume_index=1)
            setup = trace.result_for("setup")
            assert setup.commands_run == 1
            assert setup.first_command_index == 1
            assert session.executed_setup_count == 1
        finally:
            close_session(session)


class TestCleanReplay:
    def test_deterministic_outcomes_across_replays(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(
            install=[_spec("make")], minimal=_spec("make test"),
        ))
        first = clean_replay(repo_snapshot, contract, sandbox_config)
        second = clean_replay(repo_snapshot, contract, sandbox_config)
        assert [(r.stage, r.outcome) for r in first.stage_results] == \
               [(r.stage, r.outcome) for r in second.stage_results]
        assert validity(first) and validity(second)

    def test_fresh_mount_matches_snapshot_listing(self, repo_snapshot, sandbox_config, tmp_path):
        contract = _contract(tmp_path, _plan(minimal=_spec("test -f README.md")))
        trace = clean_replay(repo_snapshot, contract, sandbox_config)
        names = sorted(
            p.relative_to(repo_snapshot.root).as_posix()
            for p in repo_snapshot.root.rglob("*") if p.is_file()
        )
        expected = sha256("\n".join(names).encode()).hexdigest()
        assert trace.pre_setup_listing == expected

    def test_warm_residue_detected_by_clean_replay(self, repo_snapshot, sandbox_config, tmp_path):
        # A contract whose verification needs a file setup never creates.
        residue_plan = _plan(
            install=[_spec("touch residue.txt")],
            minimal=_spec("test -f residue.txt"),
        )
        contract = _contract(tmp_path / "a", residue_plan)
        warm = open_session(repo_snapshot, sandbox_config, mode="warm")
        try:
            verify_contract(warm, contract)  # seeds residue.txt in the warm env
            stripped = _plan(install=[], minimal=_spec("test -f residue.txt"))
            contract2 = materialize_contract(stripped, [], FailurePlaybook(),
                                             tmp_path / "b" / ".bootstrap")
            warm_trace = verify_contract(warm, contract2)
            assert all(r.outcome == "pass" for r in warm_trace.stage_results)
        finally:
            close_session(warm)
        clean_trace = clean_replay(repo_snapshot, contract2, sandbox_config)
        assert clean_trace.result_for("minimal").outcome == "fail"
        assert validity(clean_trace) is False


class TestValidity:
    def _trace(self, mode: str, outcomes: dict[str, str]) -> ExecutionTrace:
        session = Session(id="s", mode=mode, environment_state="fresh",
                          started_at="t").summary()
        results = [
            StageResult(stage=stage, outcome=outcome,
                        exit_code=0 if outcome == "pass" else 1)
            for stage, outcome in outcomes.items()
        ]
        return ExecutionTrace(session=session, stage_results=results,
                              wall_time_s=0.0, contract_hash="h")

    def test_three_passes_with_failed_strongest_is_valid(self):
        trace = self._trace("clean", {"setup": "pass", "doctor": "pass",
                                      "minimal": "pass", "strongest": "fail"})
        assert validity(trace) is True

    def test_doctor_timeout_invalidates(self):
        trace = self._trace("clean", {"setup": "pass", "doctor": "timeout",
                                      "minimal": "skipped"})
        assert validity(trace) is False

    def test_warm_trace_rejected(self):
        trace = self._trace("warm", {"setup": "pass", "doctor": "pass",
                                     "minimal": "pass"})
        with pytest.raises(WarmTraceRejected):
            validity(trace)
