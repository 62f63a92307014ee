from __future__ import annotations

import json
from pathlib import Path

import pytest

from repoboot.cli import main
from repoboot.contract import CONTRACT_FILES


def _run(argv: list[str], capsys) -> tuple[int, str]:
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out


class TestCmdBootstrap:
    def test_accepted_run_exits_zero_and_copies_contract_back(
        self, build_repo, tmp_path, capsys
    ):
        source, _ = build_repo("make-c")
        code, out = _run([
            "bootstrap", str(source), "--backend", "rule",
            "--executor", "local_sandbox", "--logs", str(tmp_path / "runs"),
            "--output", "json",
        ], capsys)
        assert code == 0
        report = json.loads(out)
        assert report["result"] == "accepted"
        contract_dir = source / ".bootstrap"
        assert sorted(p.name for p in contract_dir.iterdir()) == sorted(CONTRACT_FILES)

    def test_unreachable_source_maps_to_planner_failed_exit(self, tmp_path, capsys):
        code, out = _run([
            "bootstrap", "/definitely/not/here",
            "--logs", str(tmp_path / "runs"), "--output", "json",
        ], capsys)
        assert code == 5
        assert json.loads(out)["result"] == "planner_failed"

    def test_budget_override_beyond_hard_max_is_config_error(self, build_repo, tmp_path):
        source, _ = build_repo("make-c")
        with pytest.raises(SystemExit) as exc_info:
            main(["bootstrap", str(source), "--budget.max_repair_loops", "41",
                  "--logs", str(tmp_path / "runs")])
        assert exc_info.value.code == 2

    def test_budget_override_within_bounds_accepted(self, build_repo, tmp_path, capsys):
        source, _ = build_repo("make-c")
        code, _ = _run([
            "bootstrap", str(source), "--budget.max_repair_loops", "40",
            "--logs", str(tmp_path / "runs"), "--output", "json",
        ], capsys)
        assert code == 0


class TestCmdReplayAndReuse:
    @pytest.fixture
    def accepted(self, build_repo, tmp_path, capsys):
        source, _ = build_repo("make-c")
        code, _ = _run([
            "bootstrap", str(source), "--logs", str(tmp_path / "runs"),
            "--output", "json",
        ], capsys)
        assert code == 0
        return source, source / ".bootstrap"

    def test_replay_valid_contract_exits_zero(self, accepted, tmp_path, capsys):
        source, contract_dir = accepted
        code, out = _run([
            "replay", str(contract_dir), str(source),
            "--logs", str(tmp_path / "replay-logs"), "--output", "json",
        ], capsys)
        assert code == 0
        trace = json.loads(out)
        assert trace["session"]["mode"] == "clean"

    def test_replay_missing_manifest_is_load_error(self, accepted, tmp_path, capsys):
        source, contract_dir = accepted
        (contract_dir / "commands.json").unlink()
        code, _ = _run([
            "replay", str(contract_dir), str(source),
            "--logs", str(tmp_path / "replay-logs"),
        ], capsys)
        assert code == 5

    def test_reuse_runs_exactly_the_manifested_commands(self, accepted, tmp_path, capsys):
        source, contract_dir = accepted
        code, out = _run([
            "reuse", str(contract_dir), str(source),
            "--logs", str(tmp_path / "reuse-logs"), "--output", "json",
        ], capsys)
        assert code == 0
        report = json.loads(out)
        by_stage = {s["stage"]: s for s in report["stages"]}
        for stage, expected in report["manifest_command_counts"].items():
            assert by_stage[stage]["commands_run"] == expected

    def test_reuse_skips_absent_strongest(self, accepted, tmp_path, capsys):
        source, contract_dir = accepted
        manifest = json.loads((contract_dir / "commands.json").read_text())
        code, out = _run([
            "reuse", str(contract_dir), str(source), "--strongest",
            "--logs", str(tmp_path / "reuse-logs"), "--output", "json",
        ], capsys)
        assert code == 0
        report = json.loads(out)
        strongest = [s for s in report["stages"] if s["stage"] == "strongest"]
        if manifest["strongest_verify"] is None:
            assert strongest and strongest[0]["outcome"] == "skipped"


class TestCmdBatch:
    def test_batch_over_fixture_list(self, build_repo, tmp_path, capsys):
        first, _ = build_repo("make-c")
        second, _ = build_repo("plain")
        list_file = tmp_path / "repos.txt"
        list_file.write_text(f"{first}\n{second}\n", encoding="utf-8")
        code, out = _run([
            "batch", str(list_file), "--parallel", "2",
            "--logs", str(tmp_path / "runs"), "--output", "json",
        ], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["total"] == 2
        assert summary["accepted"] >= 1
        assert (tmp_path / "runs" / "batch_summary.json").exists()

    def test_empty_list_is_empty_summary_exit_zero(self, tmp_path, capsys):
        list_file = tmp_path / "repos.txt"
        list_file.write_text("# nothing here\n", encoding="utf-8")
        code, out = _run([
            "batch", str(list_file), "--logs", str(tmp_path / "runs"),
            "--output", "json",
        ], capsys)
        assert code == 0
        summary = json.loads(out)
        assert summary["total"] == 0 and summary["accepted"] == 0


class TestCmdReport:
    def test_prints_persisted_run_report(self, build_repo, tmp_path, capsys):
        source, _ = build_repo("make-c")
        code, out = _run([
            "bootstrap", str(source), "--logs", str(tmp_path / "runs"),
            "--output", "json",
        ], capsys)
        assert code == 0
        run_dir = Path(json.loads(out)["trace_refs"][0]).parent
        code, out = _run(["report", str(run_dir), "--output", "json"], capsys)
        assert code == 0
        assert json.loads(out)["result"] == "accepted"

    def test_missing_report_is_config_error_exit(self, tmp_path, capsys):
        code, _ = _run(["report", str(tmp_path / "nowhere")], capsys)
        assert code == 2
