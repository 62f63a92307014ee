"""Staged contract execution in disposable environments.

Two executors back the same session interface:

- ``container``: drives a Docker-compatible CLI. A fresh container is created
  from the configured base image, the snapshot is copied to the fixed mount
  path, and stage scripts run via ``exec``. Faithful to production use.
- ``local_sandbox``: hermetic fallback for hosts without a container runtime.
  Each session owns a disposable temp root holding a private copy of the
  repository, a scrubbed environment (PATH/HOME/LANG plus explicitly listed
  toolchain homes), and a private HOME/TMPDIR.

Warm sessions persist between repair rounds for cheap re-verification; clean
sessions are the only source of traces that may decide contract validity.
"""

from __future__ import annotations

import logging
import os
import re
import shutil
import signal
import subprocess
import tempfile
import time
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from hashlib import sha256
from pathlib import Path

from .contract import BootstrapContract, hash_contract_dir, render_stage_script
from .errors import (
    ExecutorUnavailable,
    ImageUnavailable,
    SessionClosed,
    WarmTraceRejected,
)
from .evidence import RepoSnapshot

logger = logging.getLogger(__name__)

STAGE_ORDER = ("setup", "doctor", "minimal", "strongest", "probe")
GATED_STAGES = ("setup", "doctor", "minimal")

_MARKER_RE = re.compile(r"^### CMD (\d+)$", re.MULTILINE)
_KILL_GRACE_S = 2.0


@dataclass
class VerifierConfig:
    executor: str = "local_sandbox"  # "container" | "local_sandbox"
    base_image: str = "ubuntu:24.04"
    mount_path: str = "/workspace/repo"
    stage_timeouts: dict[str, int] = field(default_factory=lambda: {
        "setup": 3600,
        "doctor": 120,
        "minimal": 300,
        "strongest": 1200,
        "probe": 300,
    })
    network_allowed: bool = True
    log_tail_bytes: int = 64 * 1024
    log_dir: Path | None = None
    # Toolchain-manager homes the sandbox copies from the host when set; a
    # rustup-shimmed cargo is unusable without its homes even though the
    # shim itself is on PATH.
    toolchain_env: tuple[str, ...] = (
        "CARGO_HOME", "RUSTUP_HOME", "GOROOT", "GOPATH", "JAVA_HOME",
    )


@dataclass
class Session:
    id: str
    mode: str  # "warm" | "clean"
    environment_state: str  # "fresh" | "reused"
    started_at: str
    executed_setup_count: int = 0
    env: object = None  # executor-specific handle
    config: "VerifierConfig" = None  # type: ignore[assignment]
    open: bool = True
    last_results: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "id": self.id,
            "mode": self.mode,
            "environment_state": self.environment_state,
            "started_at": self.started_at,
            "executed_setup_count": self.executed_setup_count,
        }


@dataclass
class StageResult:
    stage: str
    outcome: str  # "pass" | "fail" | "timeout" | "skipped"
    exit_code: int | None = None
    failed_command_index: int | None = None
    stdout_tail: str = ""
    stderr_tail: str = ""
    duration_s: float = 0.0
    commands_run: int = 0
    first_command_index: int = 0
    reused: bool = False

    def to_json_dict(self) -> dict:
        return {
            "stage": self.stage,
            "outcome": self.outcome,
            "exit_code": self.exit_code,
            "failed_command_index": self.failed_command_index,
            "stdout_tail": self.stdout_tail,
            "stderr_tail": self.stderr_tail,
            "duration_s": self.duration_s,
            "commands_run": self.commands_run,
            "first_command_index": self.first_command_index,
            "reused": self.reused,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "StageResult":
        return cls(**{k: raw[k] for k in raw})


@dataclass
class ExecutionTrace:
    session: dict
    stage_results: list[StageResult]
    wall_time_s: float
    contract_hash: str
    pre_setup_listing: str = ""
    probes_included: bool = False

    def result_for(self, stage: str) -> StageResult | None:
        for result in self.stage_results:
            if result.stage == stage:
                return result
        return None

    def to_json_dict(self) -> dict:
        return {
            "session": self.session,
            "stage_results": [r.to_json_dict() for r in self.stage_results],
            "wall_time_s": self.wall_time_s,
            "contract_hash": self.contract_hash,
            "pre_setup_listing": self.pre_setup_listing,
            "probes_included": self.probes_included,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "ExecutionTrace":
        return cls(
            session=raw["session"],
            stage_results=[StageResult.from_json_dict(r) for r in raw["stage_results"]],
            wall_time_s=raw["wall_time_s"],
            contract_hash=raw["contract_hash"],
            pre_setup_listing=raw.get("pre_setup_listing", ""),
            probes_included=raw.get("probes_included", False),
        )


# --- executors ---


@dataclass
class _RawRun:
    exit_code: int | None
    stdout: str
    stderr: str
    duration_s: float
    timed_out: bool


class _LocalSandboxEnv:
    """Disposable temp-root environment with a scrubbed variable set."""

    def __init__(self, snapshot: RepoSnapshot, config: VerifierConfig) -> None:
        self.root = Path(tempfile.mkdtemp(prefix="repoboot-env-"))
        mount_rel = config.mount_path.lstrip("/")
        self.repo = self.root / mount_rel
        self.repo.parent.mkdir(parents=True, exist_ok=True)
        shutil.copytree(snapshot.root, self.repo)
        home = self.root / "home"
        tmp = self.root / "tmp"
        home.mkdir()
        tmp.mkdir()
        self.env_vars = {
            "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
            "HOME": str(home),
            "LANG": os.environ.get("LANG", "C.UTF-8"),
            "LC_ALL": os.environ.get("LC_ALL", os.environ.get("LANG", "C.UTF-8")),
            "TMPDIR": str(tmp),
        }
        for name in config.toolchain_env:
            value = os.environ.get(name)
            if value:
                self.env_vars[name] = value
        self._script_counter = 0

    def run(self, script: str, stage: str, timeout_s: int, tail_bytes: int) -> _RawRun:
        self._script_counter += 1
        script_path = self.root / f"stage_{self._script_counter:03d}_{stage}.sh"
        script_path.write_text(script, encoding="utf-8")
        started = time.monotonic()
        proc = subprocess.Popen(
            ["bash", str(script_path)],
            cwd=self.repo,
            env=self.env_vars,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            start_new_session=True,
        )
        timed_out = False
        try:
            out, err = proc.communicate(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            out, err = _terminate_group(proc)
        duration = time.monotonic() - started
        return _RawRun(
            exit_code=None if timed_out else proc.returncode,
            stdout=_tail(out, tail_bytes),
            stderr=_tail(err, tail_bytes),
            duration_s=duration,
            timed_out=timed_out,
        )

    def listing_digest(self) -> str:
        names = sorted(
            p.relative_to(self.repo).as_posix()
            for p in self.repo.rglob("*")
            if p.is_file()
        )
        return sha256("\n".join(names).encode("utf-8")).hexdigest()

    def close(self) -> None:
        shutil.rmtree(self.root, ignore_errors=True)


class _ContainerEnv:
    """Docker-CLI backed environment; the repository is copied, not mounted,

    so contract execution can never mutate the snapshot."""

    def __init__(self, snapshot: RepoSnapshot, config: VerifierConfig) -> None:
        docker = shutil.which("docker")
        if docker is None:
            raise ExecutorUnavailable("docker CLI not found on PATH")
        probe = subprocess.run([docker, "info"], capture_output=True, text=True)
        if probe.returncode != 0:
            raise ExecutorUnavailable(f"container runtime not reachable: {probe.stderr.strip()}")
        self._docker = docker
        self._mount = config.mount_path
        run_args = [docker, "run", "-d"]
        if not config.network_allowed:
            run_args += ["--network", "none"]
        run_args += [config.base_image, "sleep", "infinity"]
        created = subprocess.run(run_args, capture_output=True, text=True)
        if created.returncode != 0:
            raise ImageUnavailable(
                f"cannot start container from {config.base_image}: {created.stderr.strip()}"
            )
        self.container_id = created.stdout.strip()
        subprocess.run(
            [docker, "exec", self.container_id, "mkdir", "-p", self._mount],
            capture_output=True,
        )
        copied = subprocess.run(
            [docker, "cp", f"{snapshot.root}/.", f"{self.container_id}:{self._mount}"],
            capture_output=True,
            text=True,
        )
        if copied.returncode != 0:
            self.close()
            raise ExecutorUnavailable(f"cannot copy snapshot into container: {copied.stderr.strip()}")
        self._script_counter = 0

    def run(self, script: str, stage: str, timeout_s: int, tail_bytes: int) -> _RawRun:
        self._script_counter += 1
        name = f"/tmp/repoboot_stage_{self._script_counter:03d}.sh"
        with tempfile.NamedTemporaryFile("w", suffix=".sh", delete=False) as handle:
            handle.write(script)
            host_path = handle.name
        try:
            subprocess.run(
                [self._docker, "cp", host_path, f"{self.container_id}:{name}"],
                capture_output=True,
            )
            started = time.monotonic()
            try:
                proc = subprocess.run(
                    [self._docker, "exec", "-w", self._mount, self.container_id, "bash", name],
                    capture_output=True,
                    timeout=timeout_s,
                )
                duration = time.monotonic() - started
                return _RawRun(
                    exit_code=proc.returncode,
                    stdout=_tail(proc.stdout, tail_bytes),
                    stderr=_tail(proc.stderr, tail_bytes),
                    duration_s=duration,
                    timed_out=False,
                )
            except subprocess.TimeoutExpired as exc:
                duration = time.monotonic() - started
                subprocess.run(
                    [self._docker, "exec", self.container_id, "pkill", "-f", name],
                    capture_output=True,
                )
                return _RawRun(
                    exit_code=None,
                    stdout=_tail(exc.stdout or b"", tail_bytes),
                    stderr=_tail(exc.stderr or b"", tail_bytes),
                    duration_s=duration,
                    timed_out=True,
                )
        finally:
            os.unlink(host_path)

    def listing_digest(self) -> str:
        proc = subprocess.run(
            [self._docker, "exec", self.container_id, "find", self._mount, "-type", "f"],
            capture_output=True,
            text=True,
        )
        names = sorted(proc.stdout.splitlines())
        return sha256("\n".join(names).encode("utf-8")).hexdigest()

    def close(self) -> None:
        subprocess.run(
            [self._docker, "rm", "-f", self.container_id],
            capture_output=True,
        )


def _terminate_group(proc: subprocess.Popen) -> tuple[bytes, bytes]:
    """TERM the whole process group, give it 2 s, then KILL."""
    try:
        os.killpg(proc.pid, signal.SIGTERM)
    except (ProcessLookupError, PermissionError):
        pass
    try:
        out, err = proc.communicate(timeout=_KILL_GRACE_S)
        return out or b"", err or b""
    except subprocess.TimeoutExpired:
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except (ProcessLookupError, PermissionError):
            pass
        out, err = proc.communicate()
        return out or b"", err or b""


def _tail(data: bytes | str, limit: int) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8", errors="replace")
    return data[-limit:].decode("utf-8", errors="replace")


# --- session lifecycle ---


def open_session(snapshot: RepoSnapshot, config: VerifierConfig, mode: str) -> Session:
    """Provision a fresh environment holding a private copy of the snapshot."""
    if mode not in ("warm", "clean"):
        raise ValueError(f"unknown session mode: {mode}")
    if config.executor == "local_sandbox":
        env = _LocalSandboxEnv(snapshot, config)
    elif config.executor == "container":
        env = _ContainerEnv(snapshot, config)
    else:
        raise ExecutorUnavailable(f"unknown executor: {config.executor}")
    return Session(
        id=f"{mode}-{uuid.uuid4().hex[:12]}",
        mode=mode,
        environment_state="fresh",
        started_at=datetime.now(timezone.utc).isoformat(),
        env=env,
        config=config,
    )


def close_session(session: Session) -> None:
    if session.open and session.env is not None:
        session.env.close()
    session.open = False


def run_stage(session: Session, stage: str, script: str, timeout_s: int) -> StageResult:
    """Execute one stage script, recovering the failure location from markers."""
    if not session.open:
        raise SessionClosed(f"session {session.id} is closed")
    config = session.config
    tail_bytes = config.log_tail_bytes if config else 64 * 1024
    raw = session.env.run(script, stage, timeout_s, tail_bytes)

    if config and config.log_dir:
        log_root = Path(config.log_dir)
        log_root.mkdir(parents=True, exist_ok=True)
        base = f"{session.id}_{stage}_{int(time.time() * 1000)}"
        (log_root / f"{base}.stdout").write_text(raw.stdout, encoding="utf-8")
        (log_root / f"{base}.stderr").write_text(raw.stderr, encoding="utf-8")

    emitted = [int(m) for m in _MARKER_RE.findall(raw.stdout)]
    script_markers = [int(m) for m in _MARKER_RE.findall(script)]
    first_index = emitted[0] if emitted else (script_markers[0] if script_markers else 0)

    if raw.timed_out:
        outcome = "timeout"
    elif raw.exit_code == 0:
        outcome = "pass"
    else:
        outcome = "fail"

    failed_index = None
    if outcome in ("fail", "timeout"):
        failed_index = emitted[-1] if emitted else first_index

    return StageResult(
        stage=stage,
        outcome=outcome,
        exit_code=raw.exit_code,
        failed_command_index=failed_index,
        stdout_tail=raw.stdout,
        stderr_tail=raw.stderr,
        duration_s=round(raw.duration_s, 3),
        commands_run=len(emitted),
        first_command_index=first_index,
        reused=False,
    )


def _stage_commands(contract: BootstrapContract, stage: str):
    manifest = contract.manifest
    if stage == "setup":
        return manifest.install
    if stage == "doctor":
        return manifest.doctor
    if stage == "minimal":
        return [manifest.minimal_verify]
    if stage == "strongest":
        return [manifest.strongest_verify] if manifest.strongest_verify else []
    if stage == "probe":
        return manifest.run_probes
    raise KeyError(stage)


def verify_contract(
    session: Session,
    contract: BootstrapContract,
    include_strongest: bool = False,
    include_probes: bool = False,
    rerun_from: str | None = None,
    setup_resume_index: int | None = None,
    on_stage=None,
) -> ExecutionTrace:
    """Run contract stages in canonical order inside the session.

    A failure in a gated stage (setup, doctor, minimal) marks every later
    stage skipped; a strongest failure is recorded but gates nothing. In warm
    sessions ``rerun_from`` reuses cached results for earlier stages, and
    ``setup_resume_index`` runs only the not-yet-executed tail of setup after
    an append-only repair.
    """
    if not session.open:
        raise SessionClosed(f"session {session.id} is closed")
    started = time.monotonic()

    pre_listing = ""
    if session.mode == "clean" and session.environment_state == "fresh":
        pre_listing = session.env.listing_digest()

    stages = ["setup", "doctor", "minimal"]
    if include_strongest:
        stages.append("strongest")
    if include_probes:
        stages.append("probe")

    rerun_rank = STAGE_ORDER.index(rerun_from) if rerun_from else 0
    results: list[StageResult] = []
    gate_failed = False

    for stage in stages:
        if gate_failed:
            results.append(StageResult(stage=stage, outcome="skipped"))
            continue

        cached = session.last_results.get(stage)
        if (
            session.mode == "warm"
            and rerun_from is not None
            and STAGE_ORDER.index(stage) < rerun_rank
            and cached is not None
            and cached.outcome == "pass"
        ):
            reused = StageResult(
                stage=stage, outcome="pass", exit_code=0,
                duration_s=0.0, commands_run=0,
                first_command_index=cached.first_command_index, reused=True,
            )
            results.append(reused)
            if on_stage:
                on_stage(reused)
            continue

        commands = _stage_commands(contract, stage)
        if stage == "strongest" and not commands:
            results.append(StageResult(stage=stage, outcome="skipped"))
            continue
        if stage == "probe" and not commands:
            continue

        start_index = 0
        if stage == "setup" and setup_resume_index is not None:
            commands = commands[setup_resume_index:]
            start_index = setup_resume_index
        script = render_stage_script(commands, stage, start_index=start_index)
        timeout = _timeout_for(stage, commands, session)
        result = run_stage(session, stage, script, timeout)
        results.append(result)
        session.last_results[stage] = result

        # Partial (suffix) reruns do not count as a full setup execution.
        if stage == "setup" and start_index == 0:
            session.executed_setup_count += 1

        if on_stage:
            on_stage(result)

        if stage in GATED_STAGES and result.outcome != "pass":
            gate_failed = True

    session.environment_state = "reused"
    return ExecutionTrace(
        session=session.summary(),
        stage_results=results,
        wall_time_s=round(time.monotonic() - started, 3),
        contract_hash=hash_contract_dir(contract.root),
        pre_setup_listing=pre_listing,
        probes_included=include_probes,
    )


def _timeout_for(stage: str, commands, session: Session) -> int:
    """Stage bound: the config ceiling, tightened by declared command budgets."""
    defaults = session.config.stage_timeouts if session.config else VerifierConfig().stage_timeouts
    stage_default = defaults.get(stage, 300)
    if not commands:
        return stage_default
    declared = sum(c.timeout_s for c in commands)
    return max(1, min(stage_default, declared))


def clean_replay(snapshot: RepoSnapshot, contract: BootstrapContract,
                 config: VerifierConfig, include_probes: bool = True,
                 on_stage=None) -> ExecutionTrace:
    """Authoritative validity check: fresh environment, full stage list."""
    session = open_session(snapshot, config, mode="clean")
    try:
        return verify_contract(
            session, contract, include_strongest=True, include_probes=include_probes,
            on_stage=on_stage,
        )
    finally:
        close_session(session)


def validity(trace: ExecutionTrace) -> bool:
    """Valid iff setup, doctor, and minimal all passed in a clean session."""
    if trace.session.get("mode") != "clean":
        raise WarmTraceRejected("validity is only defined for clean-replay traces")
    for stage in GATED_STAGES:
        result = trace.result_for(stage)
        if result is None or result.outcome != "pass":
            return False
    return True
