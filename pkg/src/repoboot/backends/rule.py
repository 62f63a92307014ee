"""Deterministic rule-based planner and repairer.

Both are pure functions of their request content (the repairer may also be
configured with the run's discovery report, the same way the scripted backend
is configured with a response directory). They cover the common ecosystems:
pip/requirements, poetry, npm, yarn, cargo, go modules, make, and cmake.
"""

from __future__ import annotations

import json
import re
from pathlib import PurePosixPath

from ..evidence import CIEvidenceReport, DiscoveryReport
from ..patterns import COMMAND_FALLBACKS, MODULE_DIST_ALIASES, TEST_INVOCATION_RES
from ..plan import parse_plan_document
from ..repair import TRACE_TO_PLAN_STAGE, diagnose_trace
from ..serialize import dumps_compact
from ..verifier import ExecutionTrace
from .base import BackendRequest, BackendResponse

_VENV_RE = re.compile(r"-m venv\s+(\S+)")
_POETRY_DEP_RE = re.compile(
    r"^\[tool\.poetry\.dependencies\]\s*$(.*?)(?:^\[|\Z)", re.MULTILINE | re.DOTALL
)
_PROJECT_DEPS_RE = re.compile(r"^dependencies\s*=\s*\[(.*?)\]", re.MULTILINE | re.DOTALL)
_DEP_LINE_RE = re.compile(r"^([A-Za-z0-9_.\-]+)\s*=", re.MULTILINE)
_DEP_STRING_RE = re.compile(r"[\"']([A-Za-z0-9_.\-]+)")


def _cmd(cmd: str, reason: str, provenance: str = "backend-inferred",
         cwd: str = ".", timeout_s: int | None = None) -> dict:
    out = {"cmd": cmd, "cwd": cwd, "reason": reason, "provenance": provenance}
    if timeout_s is not None:
        out["timeout_s"] = timeout_s
    return out


class RulePlannerBackend:
    """Plans straight from the evidence reports, no model involved."""

    name = "rule-planner"

    def __init__(self) -> None:
        self.calls: list[BackendRequest] = []

    def complete(self, request: BackendRequest) -> BackendResponse:
        self.calls.append(request)
        discovery = DiscoveryReport.from_json_dict(json.loads(request.context_documents[0]))
        ci = CIEvidenceReport.from_json_dict(json.loads(request.context_documents[1]))
        document = dumps_compact(_plan_document(discovery, ci))
        return BackendResponse(document=document, parse_status="valid", token_usage=None)


def _plan_document(discovery: DiscoveryReport, ci: CIEvidenceReport) -> dict:
    managers = [name for name, _ in discovery.package_managers]
    triggers = dict(discovery.package_managers)
    route = next((m for m in managers if m in _ROUTES), None)

    if route is None:
        doc = _weak_plan(discovery)
    else:
        doc = _ROUTES[route](discovery, triggers[route])

    strongest = _strongest_from_ci(ci)
    if strongest is not None:
        doc["strongest_verify"] = strongest

    doc.setdefault("constraints_notes", []).append(
        "minimal_verify must keep exercising the project itself, not the runtime"
    )
    doc["agent_context"] = _agent_context_text(discovery, route)
    return doc


def _links_for(doc: dict) -> dict:
    links: dict[str, list[dict]] = {}
    for stage_key, stage_name in (
        ("install_commands", "install"),
        ("doctor_commands", "doctor"),
    ):
        for index, spec in enumerate(doc.get(stage_key, [])):
            prov = spec.get("provenance", "")
            if prov and prov != "backend-inferred" and not prov.startswith("ci:"):
                links[f"{stage_name}/{index}"] = [{"file_path": prov, "kind": "package_metadata"}]
    return links


def _finish(doc: dict) -> dict:
    doc["evidence_links"] = _links_for(doc)
    return doc


def _has_top_dir(discovery: DiscoveryReport, names: tuple[str, ...]) -> str | None:
    tree = discovery.structure_summary.get("tree", "")
    for line in tree.splitlines():
        stripped = line.strip("/")
        if line.endswith("/") and not line.startswith(" ") and stripped in names:
            return stripped
    return None


def _snippet_of(discovery: DiscoveryReport, filename: str) -> str:
    for item in discovery.important_files + discovery.evidence:
        if item.file_path == filename:
            return item.snippet
    return ""


def _python_minimal(discovery: DiscoveryReport, py: str) -> dict:
    tests_dir = _has_top_dir(discovery, ("tests", "test"))
    if tests_dir:
        return _cmd(
            f"{py} -m unittest discover -s {tests_dir} -t .",
            f"run the unittest suite under {tests_dir}/ as the cheapest real check",
        )
    return _cmd(
        f"{py} -m compileall -q .",
        "compile every python source with compileall as a usability check",
    )


def _plan_pip(discovery: DiscoveryReport, trigger: str) -> dict:
    py = ".venv/bin/python"
    install = [
        _cmd("python3 -m venv .venv",
             "create an isolated virtualenv with python3 -m venv", trigger),
    ]
    if "requirements" in trigger:
        install.append(_cmd(
            f"{py} -m pip install -r {trigger}",
            f"install the dependencies pinned in {trigger} with pip", trigger,
        ))
    else:
        install.append(_cmd(
            f"{py} -m pip install -e .",
            "install the project itself in editable mode with pip", trigger,
        ))
    return _finish({
        "install_commands": install,
        "doctor_commands": [
            _cmd(f"{py} --version",
                 "confirm the virtualenv python interpreter answers --version"),
        ],
        "minimal_verify": _python_minimal(discovery, py),
    })


def _plan_poetry(discovery: DiscoveryReport, trigger: str) -> dict:
    py = ".venv/bin/python"
    install = [
        _cmd("python3 -m venv .venv",
             "create an isolated virtualenv with python3 -m venv", trigger),
    ]
    deps = _poetry_declared_deps(_snippet_of(discovery, "pyproject.toml"))
    if deps:
        dep_text = " ".join(deps)
        install.append(_cmd(
            f"{py} -m pip install {dep_text}",
            f"install the dependencies declared in pyproject.toml with pip: {dep_text}",
            "pyproject.toml",
        ))
    return _finish({
        "install_commands": install,
        "doctor_commands": [
            _cmd(f"{py} --version",
                 "confirm the virtualenv python interpreter answers --version"),
        ],
        "minimal_verify": _python_minimal(discovery, py),
    })


def _poetry_declared_deps(snippet: str) -> list[str]:
    deps: list[str] = []
    section = _POETRY_DEP_RE.search(snippet)
    if section:
        for name in _DEP_LINE_RE.findall(section.group(1)):
            if name.lower() != "python":
                deps.append(name)
    else:
        array = _PROJECT_DEPS_RE.search(snippet)
        if array:
            deps.extend(_DEP_STRING_RE.findall(array.group(1)))
    return sorted(set(deps))


def _node_minimal(discovery: DiscoveryReport, runner: str) -> dict:
    snippet = _snippet_of(discovery, "package.json")
    if '"test"' in snippet:
        if runner == "yarn":
            return _cmd("yarn test", "run the package.json test script via yarn test")
        return _cmd("npm test --silent", "run the package.json test script via npm test")
    return _cmd(
        'node -e "require(\'./package.json\')"',
        "load package.json with node as a minimal usability check",
    )


def _plan_npm(discovery: DiscoveryReport, trigger: str) -> dict:
    has_lock = trigger == "package-lock.json"
    install_cmd = "npm ci" if has_lock else "npm install --no-audit --no-fund"
    return _finish({
        "install_commands": [
            _cmd(install_cmd, f"install node dependencies from {trigger} with npm", trigger),
        ],
        "doctor_commands": [
            _cmd("node --version", "confirm the node runtime answers --version"),
        ],
        "minimal_verify": _node_minimal(discovery, "npm"),
    })


def _plan_yarn(discovery: DiscoveryReport, trigger: str) -> dict:
    return _finish({
        "install_commands": [
            _cmd("yarn install",
                 f"install node dependencies from {trigger} with yarn install", trigger),
        ],
        "doctor_commands": [
            _cmd("node --version", "confirm the node runtime answers --version"),
        ],
        "minimal_verify": _node_minimal(discovery, "yarn"),
    })


def _plan_cargo(discovery: DiscoveryReport, trigger: str) -> dict:
    return _finish({
        "install_commands": [
            _cmd("cargo build", f"build the crate declared by {trigger} with cargo build",
                 trigger),
        ],
        "doctor_commands": [
            _cmd("cargo --version", "confirm the cargo toolchain answers --version"),
        ],
        "minimal_verify": _cmd("cargo test", "run the crate's test suite with cargo test"),
    })


def _plan_go(discovery: DiscoveryReport, trigger: str) -> dict:
    return _finish({
        "install_commands": [
            _cmd("go build ./...", f"build all packages of the {trigger} module with go build",
                 trigger),
        ],
        "doctor_commands": [
            _cmd("go version", "confirm the go toolchain answers go version"),
        ],
        "minimal_verify": _cmd("go test ./...", "run all module tests with go test"),
    })


def _plan_make(discovery: DiscoveryReport, trigger: str) -> dict:
    snippet = _snippet_of(discovery, trigger)
    if re.search(r"^test\s*:", snippet, re.MULTILINE):
        minimal = _cmd("make test", "run the Makefile test target with make test")
    elif re.search(r"^check\s*:", snippet, re.MULTILINE):
        minimal = _cmd("make check", "run the Makefile check target with make check")
    else:
        minimal = _cmd("make -n all", "dry-run the Makefile all target with make -n")
    return _finish({
        "install_commands": [
            _cmd("make", f"build the default target of {trigger} with make", trigger),
        ],
        "doctor_commands": [
            _cmd("cc --version", "confirm a C compiler is available via cc --version"),
        ],
        "minimal_verify": minimal,
    })


def _plan_cmake(discovery: DiscoveryReport, trigger: str) -> dict:
    return _finish({
        "install_commands": [
            _cmd("cmake -S . -B build",
                 f"configure the {trigger} project into build/ with cmake", trigger),
            _cmd("cmake --build build",
                 "compile the configured cmake build tree", trigger),
        ],
        "doctor_commands": [
            _cmd("cmake --version", "confirm the cmake toolchain answers --version"),
        ],
        "minimal_verify": _cmd(
            "ctest --test-dir build --output-on-failure",
            "run the registered ctest suite from the build tree",
        ),
    })


_ROUTES = {
    "pip": _plan_pip,
    "poetry": _plan_poetry,
    "npm": _plan_npm,
    "yarn": _plan_yarn,
    "cargo": _plan_cargo,
    "go": _plan_go,
    "make": _plan_make,
    "cmake": _plan_cmake,
}


def _weak_plan(discovery: DiscoveryReport) -> dict:
    languages = [name for name, _ in discovery.languages]
    if "python" in languages:
        minimal = _cmd("python3 -m compileall -q .",
                       "compile every python source with compileall as a usability check")
    else:
        minimal = _cmd("ls -la", "list the repository contents with ls")
    return {
        "install_commands": [],
        "doctor_commands": [
            _cmd("sh -c 'echo shell-ok'", "probe shell availability by printing shell-ok"),
        ],
        "minimal_verify": minimal,
        "evidence_links": {},
    }


def _strongest_from_ci(ci: CIEvidenceReport) -> dict | None:
    for command, workflow, step_id in ci.candidate_commands:
        for pattern in TEST_INVOCATION_RES:
            if pattern.search(command):
                return _cmd(
                    command,
                    f"strongest reproducible CI-derived check: {command}",
                    provenance=f"ci:{workflow}#{step_id}",
                )
    return None


def _agent_context_text(discovery: DiscoveryReport, route: str | None) -> str:
    languages = ", ".join(name for name, _ in discovery.languages[:3]) or "unknown"
    manager = route or "none detected"
    return (
        f"Detected languages: {languages}. Package manager route: {manager}. "
        "The install phase provisions everything the verification phases need; "
        "doctor commands only inspect the prepared environment."
    )


class RuleRepairBackend:
    """Maps failure signatures to minimal deltas via a fixed rule table.

    signature -> edit: missing_dependency appends an install of the named
    package (preferring an in-repo path package); missing_toolchain prepends a
    provider when one exists; command_not_found rewrites commands through the
    fallback table; wrong_cwd repoints the failing command at the directory
    that actually holds the referenced file; timeout doubles the failing
    command's budget; network and test_failure produce no plan edit.
    """

    name = "rule-repairer"

    def __init__(self, discovery: DiscoveryReport | None = None) -> None:
        self.discovery = discovery
        self.calls: list[BackendRequest] = []

    def complete(self, request: BackendRequest) -> BackendResponse:
        self.calls.append(request)
        plan = parse_plan_document(json.loads(request.context_documents[0]))
        trace = ExecutionTrace.from_json_dict(json.loads(request.context_documents[1]))
        signature = diagnose_trace(trace, include_strongest=True)
        document = dumps_compact(self._delta_for(plan, signature))
        return BackendResponse(document=document, parse_status="valid", token_usage=None)

    # -- rule table --

    def _delta_for(self, plan, signature) -> dict:
        handler = getattr(self, f"_fix_{signature.category}", None)
        if handler is not None:
            delta = handler(plan, signature)
            if delta is not None:
                return delta
        return _noop(f"no repair rule produced an edit for {signature.category}")

    def _fix_missing_dependency(self, plan, signature) -> dict | None:
        module = signature.token
        if not module:
            return None
        if _is_python_plan(plan):
            py = _venv_python(plan)
            local_dir = self._local_package_dir(module)
            if local_dir:
                cmd = f"{py} -m pip install ./{local_dir}"
                reason = f"install the missing local package {module} from ./{local_dir} with pip"
            else:
                dist = MODULE_DIST_ALIASES.get(module, module)
                cmd = f"{py} -m pip install {dist}"
                reason = f"install the missing dependency {dist} with pip"
        else:
            cmd = f"npm install --no-save {module}"
            reason = f"install the missing node dependency {module} with npm"
        return {
            "edits": [{
                "op": "insert_commands",
                "stage": "install",
                "index": len(plan.install_commands),
                "commands": [{"cmd": cmd, "cwd": ".", "reason": reason,
                              "provenance": "backend-inferred"}],
            }],
            "rationale": f"trace shows a missing module: {signature.matched_text}",
        }

    def _fix_missing_toolchain(self, plan, signature) -> dict | None:
        if signature.token in ("pip", "pip3"):
            py = _venv_python(plan)
            return {
                "edits": [{
                    "op": "insert_commands",
                    "stage": "install",
                    "index": 0,
                    "commands": [{
                        "cmd": f"{py} -m ensurepip --upgrade", "cwd": ".",
                        "reason": "provision pip via ensurepip before it is first used",
                        "provenance": "backend-inferred",
                    }],
                }],
                "rationale": f"toolchain missing: {signature.matched_text}",
            }
        return None

    def _fix_command_not_found(self, plan, signature) -> dict | None:
        tool = signature.token
        fallbacks = COMMAND_FALLBACKS.get(tool or "")
        if not fallbacks:
            return None
        edits: list[dict] = []
        for stage in ("install", "doctor", "run_probes"):
            for index, spec in enumerate(plan.commands_of(stage)):
                rewritten = _rewrite(spec.cmd, fallbacks)
                if rewritten:
                    edits.append({
                        "op": "replace_commands", "stage": stage, "index": index,
                        "command": _rewritten_spec(spec, rewritten, tool),
                    })
        minimal = plan.goals.minimal_verify
        rewritten = _rewrite(minimal.cmd, fallbacks)
        if rewritten:
            edits.append({
                "op": "set_minimal_verify",
                "command": _rewritten_spec(minimal, rewritten, tool),
            })
        strongest = plan.goals.strongest_verify
        if strongest is not None:
            rewritten = _rewrite(strongest.cmd, fallbacks)
            if rewritten:
                edits.append({
                    "op": "set_strongest_verify",
                    "command": _rewritten_spec(strongest, rewritten, tool),
                })
        if not edits:
            return None
        return {
            "edits": edits,
            "rationale": f"{tool} is unavailable; rewriting to its documented fallback",
        }

    def _fix_wrong_cwd(self, plan, signature) -> dict | None:
        if not signature.token:
            return None
        basename = PurePosixPath(signature.token).name
        directory = self._dir_containing(basename)
        if directory is None or directory == ".":
            return None
        plan_stage = TRACE_TO_PLAN_STAGE.get(signature.stage)
        if plan_stage is None:
            return None
        index = 0 if plan_stage in ("minimal_verify", "strongest_verify") else (
            signature.command_index or 0
        )
        return {
            "edits": [{
                "op": "update_field", "field": "cwd", "stage": plan_stage,
                "index": index, "value": directory,
            }],
            "rationale": f"{basename} lives under {directory}/; repointing the command's cwd",
        }

    def _fix_permission(self, plan, signature) -> dict | None:
        token = signature.token
        if not token or ("/" not in token and not token.endswith(".sh")):
            return None
        return {
            "edits": [{
                "op": "insert_commands", "stage": "install",
                "index": len(plan.install_commands),
                "commands": [{
                    "cmd": f"chmod +x {token}", "cwd": ".",
                    "reason": f"make {token} executable with chmod +x",
                    "provenance": "backend-inferred",
                }],
            }],
            "rationale": f"permission denied on {token}",
        }

    def _fix_timeout(self, plan, signature) -> dict | None:
        plan_stage = TRACE_TO_PLAN_STAGE.get(signature.stage)
        if plan_stage is None:
            return None
        if plan_stage in ("minimal_verify", "strongest_verify"):
            index = 0
            current = plan.goals.minimal_verify if plan_stage == "minimal_verify" \
                else plan.goals.strongest_verify
        else:
            index = signature.command_index or 0
            commands = plan.commands_of(plan_stage)
            if index >= len(commands):
                return None
            current = commands[index]
        if current is None:
            return None
        return {
            "edits": [{
                "op": "update_field", "field": "timeout_s", "stage": plan_stage,
                "index": index, "value": min(current.timeout_s * 2, 7200),
            }],
            "rationale": f"{plan_stage} command {index} timed out; doubling its budget",
        }

    def _fix_network(self, plan, signature) -> dict | None:
        return _noop("transient network failure; rerun the same contract")

    def _fix_test_failure(self, plan, signature) -> dict | None:
        return _noop(
            "the test suite itself fails; that is a source issue, not a bootstrap issue"
        )

    # -- discovery lookups --

    def _local_package_dir(self, module: str) -> str | None:
        if self.discovery is None:
            return None
        pattern = re.compile(rf"(?:^|/){re.escape(module)}/(?:setup\.py|pyproject\.toml)$")
        for item in self.discovery.important_files + self.discovery.evidence:
            if pattern.search(item.file_path):
                return str(PurePosixPath(item.file_path).parent)
        return None

    def _dir_containing(self, basename: str) -> str | None:
        if self.discovery is None:
            return None
        candidates = []
        for item in self.discovery.important_files + self.discovery.evidence:
            path = PurePosixPath(item.file_path)
            if path.name == basename:
                candidates.append(str(path.parent))
        tree = self.discovery.structure_summary.get("tree", "")
        if not candidates and basename in tree:
            stack: list[str] = []
            for line in tree.splitlines():
                depth = (len(line) - len(line.lstrip())) // 2
                name = line.strip()
                if name.endswith("/"):
                    stack = stack[:depth] + [name.rstrip("/")]
                elif name == basename:
                    candidates.append("/".join(stack[:depth]) or ".")
        return sorted(candidates)[0] if candidates else None


def _noop(rationale: str) -> dict:
    return {"edits": [], "rationale": rationale}


def _is_python_plan(plan) -> bool:
    for _, _, spec in plan.all_commands():
        if "pip" in spec.cmd or "venv" in spec.cmd or spec.cmd.startswith("python"):
            return True
    return False


def _venv_python(plan) -> str:
    for _, _, spec in plan.all_commands():
        match = _VENV_RE.search(spec.cmd)
        if match:
            return f"{match.group(1)}/bin/python"
    return "python3"


def _rewrite(cmd: str, fallbacks) -> str | None:
    for prefix, replacement in fallbacks:
        if cmd == prefix.rstrip() or cmd.startswith(prefix):
            return replacement + cmd[len(prefix):]
    return None


def _rewritten_spec(spec, new_cmd: str, tool: str) -> dict:
    return {
        "cmd": new_cmd,
        "cwd": spec.cwd,
        "timeout_s": spec.timeout_s,
        "reason": f"{tool} is unavailable; run the equivalent {new_cmd}",
        "provenance": spec.provenance,
    }
