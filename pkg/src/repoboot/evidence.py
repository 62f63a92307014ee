"""Repository snapshot acquisition and bootstrap-evidence extraction.

The scan is deterministic and strictly read-only: given the same snapshot
bytes and the same limits, serialized reports are byte-identical. Nothing in
the repository is ever executed here.
"""

from __future__ import annotations

import logging
import os
import shutil
import subprocess
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .errors import NotARepository, SourceUnreachable
from .patterns import (
    CLOUD_ACTION_PREFIXES,
    GPU_RUNNER_TOKENS,
    MATRIX_ENTRY_LIMIT,
    SECRETS_RE,
    STEP_TIMEOUT_LIMIT_MINUTES,
    ScanLimits,
)
from .serialize import dumps_stable

logger = logging.getLogger(__name__)

_URL_PREFIXES = ("http://", "https://", "git@", "ssh://", "file://")

# Directories that never contain bootstrap evidence worth scanning.
_SKIP_DIRS = frozenset(
    {".git", ".bootstrap", ".hg", ".svn", "node_modules", ".venv", "venv",
     "__pycache__", ".tox", ".mypy_cache", ".pytest_cache", "target",
     "dist", ".idea", ".vscode", ".eggs"}
)

_LANGUAGE_EXTENSIONS = {
    "python": (".py",),
    "javascript": (".js", ".mjs", ".cjs", ".jsx"),
    "typescript": (".ts", ".tsx"),
    "c": (".c",),
    "cpp": (".cc", ".cpp", ".cxx", ".hpp", ".hh"),
    "rust": (".rs",),
    "go": (".go",),
    "java": (".java",),
    "ruby": (".rb",),
    "shell": (".sh", ".bash"),
}

_LANGUAGE_MANIFESTS = {
    "python": ("requirements.txt", "setup.py", "pyproject.toml", "Pipfile"),
    "javascript": ("package.json",),
    "rust": ("Cargo.toml",),
    "go": ("go.mod",),
    "java": ("pom.xml", "build.gradle"),
}

# (manager, lockfile triggers, manifest triggers). A lockfile claims its
# generic manifest: when yarn.lock exists, package.json alone no longer
# reports npm. Order of this table is the report order.
_MANAGER_TABLE = (
    ("poetry", ("poetry.lock",), ()),
    ("pip", (), ("requirements.txt", "requirements-dev.txt", "setup.py", "pyproject.toml")),
    ("yarn", ("yarn.lock",), ()),
    ("pnpm", ("pnpm-lock.yaml",), ()),
    ("npm", ("package-lock.json",), ("package.json",)),
    ("cargo", ("Cargo.lock",), ("Cargo.toml",)),
    ("go", (), ("go.mod",)),
    ("cmake", (), ("CMakeLists.txt",)),
    ("make", (), ("Makefile", "makefile", "GNUmakefile")),
)

# Generic manifests suppressed when a sibling lockfile manager is present.
_LOCKFILE_CLAIMS = {
    "yarn": ("npm",),
    "pnpm": ("npm",),
    "poetry": (),
}

_README_NAMES = ("readme", "readme.md", "readme.rst", "readme.txt")
_METADATA_NAMES = frozenset(
    {"package.json", "pyproject.toml", "setup.py", "setup.cfg", "cargo.toml",
     "go.mod", "pipfile", "composer.json", "pom.xml", "build.gradle",
     "requirements.txt", "requirements-dev.txt"}
)
_LOCKFILE_NAMES = frozenset(
    {"yarn.lock", "package-lock.json", "pnpm-lock.yaml", "poetry.lock",
     "pipfile.lock", "cargo.lock", "go.sum", "composer.lock"}
)
_BUILD_CONFIG_NAMES = frozenset(
    {"cmakelists.txt", "meson.build", "configure", "configure.ac",
     "build.bazel", "workspace", "tox.ini", "noxfile.py"}
)
_MAKEFILE_NAMES = frozenset({"makefile", "gnumakefile"})
_LAYOUT_NAMES = frozenset({"conftest.py", "__main__.py", "manage.py"})
_CI_FILE_NAMES = frozenset({".gitlab-ci.yml", "azure-pipelines.yml", "jenkinsfile"})


@dataclass(frozen=True)
class RepoSnapshot:
    """A local, never-mutated copy of the repository under inspection."""

    source: str
    root: Path
    commit_id: str | None
    acquired_at: str


@dataclass(frozen=True)
class EvidenceItem:
    file_path: str
    kind: str
    snippet: str
    line_range: tuple[int, int] | None = None

    def to_json_dict(self) -> dict:
        return {
            "file_path": self.file_path,
            "kind": self.kind,
            "snippet": self.snippet,
            "line_range": list(self.line_range) if self.line_range else None,
        }

    @classmethod
    def from_json_dict(cls, raw: dict) -> "EvidenceItem":
        rng = raw.get("line_range")
        return cls(
            file_path=raw["file_path"],
            kind=raw["kind"],
            snippet=raw.get("snippet", ""),
            line_range=tuple(rng) if rng else None,
        )


@dataclass
class DiscoveryReport:
    """Structured bootstrap evidence: languages, managers, files, layout."""

    languages: list[tuple[str, float]] = field(default_factory=list)
    package_managers: list[tuple[str, str]] = field(default_factory=list)
    important_files: list[EvidenceItem] = field(default_factory=list)
    structure_summary: dict = field(default_factory=dict)
    evidence: list[EvidenceItem] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "languages": [{"name": n, "confidence": c} for n, c in self.languages],
            "package_managers": [
                {"name": n, "trigger_file": t} for n, t in self.package_managers
            ],
            "important_files": [i.to_json_dict() for i in self.important_files],
            "structure_summary": self.structure_summary,
            "evidence": [i.to_json_dict() for i in self.evidence],
        }

    def to_json(self) -> str:
        return dumps_stable(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, raw: dict) -> "DiscoveryReport":
        return cls(
            languages=[(l["name"], l["confidence"]) for l in raw.get("languages", [])],
            package_managers=[
                (m["name"], m["trigger_file"]) for m in raw.get("package_managers", [])
            ],
            important_files=[EvidenceItem.from_json_dict(i) for i in raw.get("important_files", [])],
            structure_summary=raw.get("structure_summary", {}),
            evidence=[EvidenceItem.from_json_dict(i) for i in raw.get("evidence", [])],
        )


@dataclass(frozen=True)
class NonLocalFeature:
    kind: str
    location: str
    detail: str

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "location": self.location, "detail": self.detail}


@dataclass
class CIEvidenceReport:
    """Workflow files, locally runnable commands, and non-local constraints."""

    workflow_files: list[str] = field(default_factory=list)
    candidate_commands: list[tuple[str, str, str]] = field(default_factory=list)
    non_local_features: list[NonLocalFeature] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "workflow_files": self.workflow_files,
            "candidate_commands": [
                {"command": c, "workflow": w, "step_id": s}
                for c, w, s in self.candidate_commands
            ],
            "non_local_features": [f.to_json_dict() for f in self.non_local_features],
        }

    def to_json(self) -> str:
        return dumps_stable(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, raw: dict) -> "CIEvidenceReport":
        return cls(
            workflow_files=list(raw.get("workflow_files", [])),
            candidate_commands=[
                (c["command"], c["workflow"], c["step_id"])
                for c in raw.get("candidate_commands", [])
            ],
            non_local_features=[
                NonLocalFeature(f["kind"], f["location"], f["detail"])
                for f in raw.get("non_local_features", [])
            ],
        )


def snapshot_repository(source: str | Path, workdir: str | Path) -> RepoSnapshot:
    """Copy (or shallow-clone) the source into workdir and record its revision.

    Local directories are copied without version-control metadata; URLs are
    fetched with a depth-1 clone of the default branch.
    """
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    source_text = str(source)

    if source_text.startswith(_URL_PREFIXES):
        name = source_text.rstrip("/").rsplit("/", 1)[-1].removesuffix(".git") or "repo"
        dest = _fresh_dir(workdir, name)
        proc = subprocess.run(
            ["git", "clone", "--quiet", "--depth", "1", source_text, str(dest)],
            capture_output=True,
            text=True,
        )
        if proc.returncode != 0:
            raise SourceUnreachable(f"could not fetch {source_text}: {proc.stderr.strip()}")
        commit_id = _read_head(dest)
    else:
        src = Path(source_text)
        if not src.is_dir():
            raise NotARepository(f"{source_text} is not a readable directory")
        if not any(src.iterdir()):
            raise NotARepository(f"{source_text} is empty")
        commit_id = _read_head(src)
        dest = _fresh_dir(workdir, src.name)
        shutil.copytree(src, dest, ignore=shutil.ignore_patterns(".git"), dirs_exist_ok=True)

    return RepoSnapshot(
        source=source_text,
        root=dest.resolve(),
        commit_id=commit_id,
        acquired_at=datetime.now(timezone.utc).isoformat(),
    )


def scan_repository(snapshot: RepoSnapshot, limits: ScanLimits | None = None) -> DiscoveryReport:
    """Walk the snapshot and classify every bootstrap-relevant file."""
    limits = limits or ScanLimits()
    root = snapshot.root

    rel_files, truncated = _walk(root, limits)
    by_name: dict[str, list[str]] = {}
    for rel in rel_files:
        by_name.setdefault(Path(rel).name.lower(), []).append(rel)

    languages = _detect_languages(rel_files)
    managers = _detect_managers(by_name)

    important: list[EvidenceItem] = []
    evidence: list[EvidenceItem] = []
    for rel in rel_files:
        kind = _classify_file(rel)
        if kind is None:
            continue
        item = _make_item(root, rel, kind, limits.snippet_cap_bytes)
        if kind in ("readme", "package_metadata", "lockfile"):
            important.append(item)
        else:
            evidence.append(item)

    return DiscoveryReport(
        languages=languages,
        package_managers=managers,
        important_files=important,
        structure_summary={
            "tree": _render_tree(root, limits),
            "truncated": truncated,
            "files_examined": len(rel_files),
        },
        evidence=evidence,
    )


def extract_ci_evidence(snapshot: RepoSnapshot) -> CIEvidenceReport:
    """Pull runnable commands out of CI workflows, excluding non-local steps.

    Every run-style step either contributes candidate commands or is excluded
    with at least one recorded NonLocalFeature; unparseable workflows become
    an external_dependency feature rather than a fatal error.
    """
    report = CIEvidenceReport()
    wf_dir = snapshot.root / ".github" / "workflows"
    if not wf_dir.is_dir():
        return report

    for wf_path in sorted(wf_dir.iterdir()):
        if wf_path.suffix not in (".yml", ".yaml") or not wf_path.is_file():
            continue
        rel = wf_path.relative_to(snapshot.root).as_posix()
        report.workflow_files.append(rel)
        try:
            doc = yaml.safe_load(wf_path.read_text(encoding="utf-8", errors="replace"))
        except yaml.YAMLError:
            report.non_local_features.append(
                NonLocalFeature("external_dependency", f"{rel}:-", "unparseable")
            )
            continue
        if not isinstance(doc, dict):
            report.non_local_features.append(
                NonLocalFeature("external_dependency", f"{rel}:-", "unparseable")
            )
            continue
        _extract_workflow(doc, rel, report)
    return report


def classify_non_local(step_text: str, context: dict) -> list[NonLocalFeature]:
    """Classify one run-style step against the non-local pattern table.

    ``context`` carries workflow metadata: location, env, services,
    runs_on, matrix_size, timeout_minutes, and uses (action ids of the job).
    Pure function; the match that justified each feature is kept as detail.
    """
    location = context.get("location", "?")
    features: list[NonLocalFeature] = []

    scan_text = step_text + "\n" + "\n".join(
        f"{k}={v}" for k, v in sorted((context.get("env") or {}).items())
    )
    secret = SECRETS_RE.search(scan_text)
    if secret:
        features.append(NonLocalFeature("secret", location, secret.group(0)))

    services = context.get("services") or {}
    if services:
        names = ",".join(sorted(str(k) for k in services))
        features.append(NonLocalFeature("service_container", location, f"services: {names}"))

    runs_on = " ".join(_as_list(context.get("runs_on"))).lower()
    for token in GPU_RUNNER_TOKENS:
        if token in runs_on:
            features.append(NonLocalFeature("special_hardware", location, f"runs-on: {runs_on}"))
            break

    matrix_size = context.get("matrix_size") or 0
    if matrix_size > MATRIX_ENTRY_LIMIT:
        features.append(
            NonLocalFeature("long_running_matrix", location, f"matrix entries: {matrix_size}")
        )

    timeout_minutes = context.get("timeout_minutes") or 0
    if timeout_minutes > STEP_TIMEOUT_LIMIT_MINUTES:
        features.append(
            NonLocalFeature("long_running_matrix", location, f"timeout-minutes: {timeout_minutes}")
        )

    for action in context.get("uses") or []:
        for prefix in CLOUD_ACTION_PREFIXES:
            if str(action).startswith(prefix):
                features.append(NonLocalFeature("cloud_service", location, f"uses: {action}"))
                break

    return features


# --- internals ---


def _fresh_dir(workdir: Path, name: str) -> Path:
    dest = workdir / name
    counter = 1
    while dest.exists():
        dest = workdir / f"{name}-{counter}"
        counter += 1
    return dest


def _read_head(path: Path) -> str | None:
    if not (path / ".git").exists():
        return None
    proc = subprocess.run(
        ["git", "-C", str(path), "rev-parse", "HEAD"], capture_output=True, text=True
    )
    if proc.returncode != 0:
        return None
    return proc.stdout.strip() or None


def _walk(root: Path, limits: ScanLimits) -> tuple[list[str], bool]:
    rel_files: list[str] = []
    truncated = False
    for current, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d not in _SKIP_DIRS)
        depth = len(Path(current).relative_to(root).parts)
        if depth >= limits.tree_depth:
            dirnames[:] = []
        for fname in sorted(filenames):
            if len(rel_files) >= limits.max_files:
                return rel_files, True
            rel_files.append((Path(current) / fname).relative_to(root).as_posix())
    return rel_files, truncated


def _detect_languages(rel_files: list[str]) -> list[tuple[str, float]]:
    counts: dict[str, int] = {}
    total = 0
    for rel in rel_files:
        name = Path(rel).name
        suffix = Path(rel).suffix.lower()
        matched = None
        for lang, exts in _LANGUAGE_EXTENSIONS.items():
            if suffix in exts:
                matched = lang
                break
        if matched is None:
            for lang, manifests in _LANGUAGE_MANIFESTS.items():
                if name in manifests:
                    matched = lang
                    break
        if matched is not None:
            counts[matched] = counts.get(matched, 0) + 1
            total += 1
    if total == 0:
        return []
    scored = [(lang, round(count / total, 4)) for lang, count in counts.items()]
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return scored


def _detect_managers(by_name: dict[str, list[str]]) -> list[tuple[str, str]]:
    present: dict[str, str] = {}
    for manager, lockfiles, manifests in _MANAGER_TABLE:
        for trigger in lockfiles + manifests:
            hits = by_name.get(trigger.lower())
            if hits:
                present[manager] = sorted(hits)[0]
                break
    # poetry can also be declared inline in pyproject.toml
    if "poetry" not in present and "pip" in present:
        for rel in by_name.get("pyproject.toml", []):
            present.setdefault("_pyproject", rel)

    suppressed: set[str] = set()
    for manager, claimed in _LOCKFILE_CLAIMS.items():
        if manager in present:
            for generic in claimed:
                lock_triggers = dict((m, l) for m, l, _ in _MANAGER_TABLE)[generic]
                if generic in present and not any(
                    by_name.get(t.lower()) for t in lock_triggers
                ):
                    suppressed.add(generic)

    ordered = []
    for manager, _, _ in _MANAGER_TABLE:
        if manager in present and manager not in suppressed:
            ordered.append((manager, present[manager]))
    return ordered


def _classify_file(rel: str) -> str | None:
    path = Path(rel)
    name = path.name
    lower = name.lower()
    if lower in _README_NAMES:
        return "readme"
    if lower in _LOCKFILE_NAMES:
        return "lockfile"
    if lower in _METADATA_NAMES:
        return "package_metadata"
    if lower in _MAKEFILE_NAMES:
        return "makefile"
    if lower in _BUILD_CONFIG_NAMES:
        return "build_config"
    if lower in _LAYOUT_NAMES:
        return "layout"
    if rel.startswith(".github/workflows/") and path.suffix in (".yml", ".yaml"):
        return "ci_workflow"
    if lower in _CI_FILE_NAMES or rel.startswith(".circleci/"):
        return "ci_workflow"
    if path.suffix == ".sh" or (len(path.parts) > 1 and path.parts[0] in ("scripts", "bin")):
        return "script"
    return None


def _make_item(root: Path, rel: str, kind: str, snippet_cap: int) -> EvidenceItem:
    raw = (root / rel).read_bytes()[:snippet_cap]
    snippet = raw.decode("utf-8", errors="replace")
    line_range = (1, snippet.count("\n") + 1) if snippet else None
    return EvidenceItem(file_path=rel, kind=kind, snippet=snippet, line_range=line_range)


def _render_tree(root: Path, limits: ScanLimits) -> str:
    lines: list[str] = []
    budget = limits.max_files

    def render(directory: Path, depth: int) -> None:
        nonlocal budget
        if depth > limits.tree_depth or budget <= 0:
            return
        entries = sorted(directory.iterdir(), key=lambda p: (p.is_file(), p.name))
        for entry in entries:
            if entry.name in _SKIP_DIRS:
                continue
            if budget <= 0:
                return
            budget -= 1
            indent = "  " * depth
            if entry.is_dir():
                lines.append(f"{indent}{entry.name}/")
                render(entry, depth + 1)
            else:
                lines.append(f"{indent}{entry.name}")

    render(root, 0)
    return "\n".join(lines)


def _as_list(value) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v) for v in value]
    return [str(value)]


def _matrix_size(strategy: dict | None) -> int:
    if not isinstance(strategy, dict):
        return 0
    matrix = strategy.get("matrix")
    if not isinstance(matrix, dict):
        return 0
    size = 1
    found = False
    for key, values in matrix.items():
        if key in ("include", "exclude"):
            continue
        if isinstance(values, list) and values:
            size *= len(values)
            found = True
    return size if found else 0


def _extract_workflow(doc: dict, rel: str, report: CIEvidenceReport) -> None:
    jobs = doc.get("jobs")
    if not isinstance(jobs, dict):
        return
    for job_id in sorted(jobs):
        job = jobs[job_id]
        if not isinstance(job, dict):
            continue
        steps = job.get("steps")
        if not isinstance(steps, list):
            continue
        uses = [s.get("uses") for s in steps if isinstance(s, dict) and s.get("uses")]
        job_env = job.get("env") if isinstance(job.get("env"), dict) else {}
        for index, step in enumerate(steps):
            if not isinstance(step, dict) or "run" not in step:
                continue
            run_text = str(step.get("run") or "")
            step_id = f"{job_id}:{index}"
            env = dict(job_env)
            if isinstance(step.get("env"), dict):
                env.update(step["env"])
            context = {
                "location": f"{rel}:{step_id}",
                "env": {str(k): str(v) for k, v in env.items()},
                "services": job.get("services"),
                "runs_on": job.get("runs-on"),
                "matrix_size": _matrix_size(job.get("strategy")),
                "timeout_minutes": step.get("timeout-minutes") or job.get("timeout-minutes"),
                "uses": uses,
            }
            features = classify_non_local(run_text, context)
            if features:
                report.non_local_features.extend(features)
                continue
            for line in run_text.splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    report.candidate_commands.append((line, rel, step_id))
