from __future__ import annotations

import json
import subprocess
from pathlib import Path

import pytest

from repoboot.contract import (
    CONTRACT_FILES,
    FailurePlaybook,
    diff_contract,
    freeze_contract,
    hash_contract_dir,
    load_contract,
    materialize_contract,
    parse_stage_script,
    render_stage_script,
    verify_frozen,
)
from repoboot.errors import MalformedManifest, MissingFile, PlanRejected
from repoboot.plan import BootstrapPlan, CommandSpec, VerificationGoals


def _spec(cmd: str, cwd: str = ".", reason: str | None = None) -> CommandSpec:
    return CommandSpec(cmd=cmd, cwd=cwd, timeout_s=60,
                       reason=reason or f"run {cmd}", provenance="backend-inferred")


def _plan(install=(), doctor=(), minimal=None, strongest=None, probes=()) -> BootstrapPlan:
    return BootstrapPlan(
        install_commands=list(install),
        doctor_commands=list(doctor),
        goals=VerificationGoals(
            minimal_verify=minimal or _spec("make test"),
            strongest_verify=strongest,
            run_probes=list(probes),
        ),
        evidence_links={"install/0": [{"file_path": "Makefile", "kind": "makefile"}]},
        agent_context="demo context",
    )


def _run_script(script: str, cwd: Path) -> subprocess.CompletedProcess:
    path = cwd / "stage.sh"
    path.write_text(script, encoding="utf-8")
    return subprocess.run(["bash", str(path)], cwd=cwd, capture_output=True, text=True)


class TestRenderStageScript:
    def test_fail_fast_stops_at_failing_command(self, tmp_path):
        script = render_stage_script(
            [_spec("echo first"), _spec("exit 9"), _spec("echo never")], "setup"
        )
        result = _run_script(script, tmp_path)
        assert result.returncode == 9
        markers = [l for l in result.stdout.splitlines() if l.startswith("### CMD")]
        assert markers == ["### CMD 0", "### CMD 1"]
        assert "never" not in result.stdout

    def test_empty_command_list_exits_zero_without_markers(self, tmp_path):
        result = _run_script(render_stage_script([], "doctor"), tmp_path)
        assert result.returncode == 0
        assert "### CMD" not in result.stdout

    def test_cwd_is_honored_per_command(self, tmp_path):
        (tmp_path / "sub").mkdir()
        script = render_stage_script([_spec("pwd", cwd="sub"), _spec("pwd")], "setup")
        result = _run_script(script, tmp_path)
        lines = [l for l in result.stdout.splitlines() if not l.startswith("###")]
        assert lines[0].endswith("/sub")
        assert not lines[1].endswith("/sub")

    def test_start_index_offsets_markers(self, tmp_path):
        script = render_stage_script([_spec("echo tail")], "setup", start_index=3)
        result = _run_script(script, tmp_path)
        assert "### CMD 3" in result.stdout

    def test_parse_recovers_commands_and_cwds(self):
        commands = [_spec("echo 'a b'", cwd="x/y"), _spec("make test")]
        parsed = parse_stage_script(render_stage_script(commands, "setup"))
        assert parsed == [(0, "x/y", "echo 'a b'"), (1, ".", "make test")]


class TestMaterializeContract:
    def test_exactly_eight_files_written(self, tmp_path):
        contract = materialize_contract(_plan(install=[_spec("make")]), [],
                                        FailurePlaybook(), tmp_path / ".bootstrap")
        names = sorted(p.name for p in contract.root.iterdir())
        assert names == sorted(CONTRACT_FILES)
        for script in ("setup.sh", "doctor.sh", "verify.sh"):
            assert (contract.root / script).stat().st_mode & 0o111

    def test_empty_doctor_script_exits_zero(self, tmp_path):
        contract = materialize_contract(_plan(install=[_spec("make")]), [],
                                        FailurePlaybook(), tmp_path / ".bootstrap")
        result = subprocess.run(["bash", str(contract.root / "doctor.sh")],
                                cwd=tmp_path, capture_output=True)
        assert result.returncode == 0

    def test_rejected_plan_writes_nothing(self, tmp_path):
        bad = _plan(minimal=_spec("python3 --version"))
        outdir = tmp_path / ".bootstrap"
        with pytest.raises(PlanRejected):
            materialize_contract(bad, [], FailurePlaybook(), outdir)
        assert not outdir.exists()

    def test_scripts_embed_manifest_commands_in_order(self, tmp_path):
        plan = _plan(install=[_spec("make"), _spec("make extras", cwd="extras")])
        contract = materialize_contract(plan, [], FailurePlaybook(),
                                        tmp_path / ".bootstrap")
        parsed = parse_stage_script((contract.root / "setup.sh").read_text())
        assert [(c, w) for _, w, c in parsed] == [
            (s.cmd, s.cwd) for s in plan.install_commands
        ]


class TestLoadContract:
    def test_round_trip_manifest_equals_plan(self, tmp_path):
        plan = _plan(install=[_spec("make")], doctor=[_spec("cc --version")],
                     strongest=_spec("make check"), probes=[_spec("./app --selftest")])
        materialize_contract(plan, [], FailurePlaybook(), tmp_path / ".bootstrap")
        loaded = load_contract(tmp_path / ".bootstrap")
        assert loaded.manifest.to_json_dict() == {
            "schema_version": 1,
            "install": [c.to_json_dict() for c in plan.install_commands],
            "doctor": [c.to_json_dict() for c in plan.doctor_commands],
            "minimal_verify": plan.goals.minimal_verify.to_json_dict(),
            "strongest_verify": plan.goals.strongest_verify.to_json_dict(),
            "run_probes": [c.to_json_dict() for c in plan.goals.run_probes],
        }
        assert loaded.evidence_map == plan.evidence_links

    def test_missing_manifest_reported_by_name(self, tmp_path):
        materialize_contract(_plan(install=[_spec("make")]), [], FailurePlaybook(),
                             tmp_path / ".bootstrap")
        (tmp_path / ".bootstrap" / "commands.json").unlink()
        with pytest.raises(MissingFile) as exc_info:
            load_contract(tmp_path / ".bootstrap")
        assert exc_info.value.name == "commands.json"

    def test_unknown_schema_version_rejected_loudly(self, tmp_path):
        materialize_contract(_plan(install=[_spec("make")]), [], FailurePlaybook(),
                             tmp_path / ".bootstrap")
        manifest_path = tmp_path / ".bootstrap" / "commands.json"
        raw = json.loads(manifest_path.read_text())
        raw["schema_version"] = 99
        manifest_path.write_text(json.dumps(raw))
        with pytest.raises(MalformedManifest, match="schema_version"):
            load_contract(tmp_path / ".bootstrap")


class TestFreeze:
    def test_any_byte_flip_changes_hash(self, tmp_path):
        contract = materialize_contract(_plan(install=[_spec("make")]), [],
                                        FailurePlaybook(), tmp_path / ".bootstrap")
        frozen = freeze_contract(contract)
        assert verify_frozen(frozen)
        context = contract.root / "agent_context.md"
        context.write_text(context.read_text() + "x", encoding="utf-8")
        assert not verify_frozen(frozen)

    def test_refreeze_is_stable(self, tmp_path):
        contract = materialize_contract(_plan(install=[_spec("make")]), [],
                                        FailurePlaybook(), tmp_path / ".bootstrap")
        assert freeze_contract(contract).content_hash == freeze_contract(contract).content_hash
        assert freeze_contract(contract).content_hash == hash_contract_dir(contract.root)


class TestDiffContract:
    def _pair(self, tmp_path, old_plan, new_plan):
        old = materialize_contract(old_plan, [], FailurePlaybook(), tmp_path / "old")
        new = materialize_contract(new_plan, [], FailurePlaybook(), tmp_path / "new")
        return old, new

    def test_identity_diff_is_empty(self, tmp_path):
        plan = _plan(install=[_spec("make")])
        old, new = self._pair(tmp_path, plan, plan)
        assert diff_contract(old, new) == []

    def test_minimal_verify_change_is_single_entry(self, tmp_path):
        old, new = self._pair(
            tmp_path,
            _plan(install=[_spec("make")], minimal=_spec("make test")),
            _plan(install=[_spec("make")], minimal=_spec("make check")),
        )
        entries = diff_contract(old, new)
        assert [e.kind for e in entries] == ["minimal-verify-changed"]

    def test_install_insertion_detected_at_index(self, tmp_path):
        old, new = self._pair(
            tmp_path,
            _plan(install=[_spec("make")]),
            _plan(install=[_spec("./configure"), _spec("make")]),
        )
        entries = diff_contract(old, new)
        assert [(e.kind, e.index) for e in entries] == [("install-inserted", 0)]

    def test_move_detected(self, tmp_path):
        first, second = _spec("make deps"), _spec("make")
        old, new = self._pair(
            tmp_path,
            _plan(install=[first, second]),
            _plan(install=[second, first]),
        )
        kinds = {e.kind for e in diff_contract(old, new)}
        assert "install-moved" in kinds

    def test_strongest_drop_detected(self, tmp_path):
        old, new = self._pair(
            tmp_path,
            _plan(install=[_spec("make")], strongest=_spec("make check")),
            _plan(install=[_spec("make")]),
        )
        assert [e.kind for e in diff_contract(old, new)] == ["strongest-verify-dropped"]
