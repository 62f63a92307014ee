"""Pattern tables driving classification, screening, and repair rules.

Every table lives here so reviewers can audit the full rule surface in one
place and so deployments can override it: `load_pattern_config` merges a JSON
document over the defaults without code changes.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

# Non-local CI feature detection. A step (or its enclosing job) matching one
# of these cannot be reproduced in a local verifier environment.
SECRETS_RE = re.compile(r"\$\{\{\s*secrets\.", re.IGNORECASE)
CLOUD_ACTION_PREFIXES = (
    "aws-actions/",
    "azure/",
    "google-github-actions/",
    "gcp-actions/",
    "alibabacloud/",
)
GPU_RUNNER_TOKENS = ("gpu", "self-hosted")
MATRIX_ENTRY_LIMIT = 4
STEP_TIMEOUT_LIMIT_MINUTES = 30

# Commands that cannot evidence repository usability when the checkout is
# non-empty. Compound commands are degenerate only if every segment is.
DEGENERATE_VERSION_RE = re.compile(r"(?:^|\s)(--version|-V|-version)(?:\s|$)")
DEGENERATE_VERSION_SUBCOMMANDS = ("version",)
DEGENERATE_BARE_COMMANDS = ("true", ":")
DEGENERATE_PREFIXES = ("echo", "ls", "dir", "pwd", "printf")
DEGENERATE_CAT_RE = re.compile(r"^cat\s+\S+$")

# Test/validation invocations belong in verification phases only.
TEST_INVOCATION_RES = (
    re.compile(r"\bpytest\b"),
    re.compile(r"\bunittest\b"),
    re.compile(r"\bnpm\s+(?:run\s+)?test\b"),
    re.compile(r"\byarn\s+(?:run\s+)?test\b"),
    re.compile(r"\bcargo\s+test\b"),
    re.compile(r"\bgo\s+test\b"),
    re.compile(r"\bmake\s+(?:test|check)\b"),
    re.compile(r"\bctest\b"),
    re.compile(r"\btox\b"),
)

# Doctor commands must not mutate the environment.
MUTATION_RES = (
    re.compile(r"\bpip3?\s+install\b"),
    re.compile(r"-m\s+pip\s+install\b"),
    re.compile(r"\bnpm\s+(?:install|ci|update)\b"),
    re.compile(r"\byarn\s+(?:install|add)\b"),
    re.compile(r"\bcargo\s+(?:install|add)\b"),
    re.compile(r"\bapt(?:-get)?\s+install\b"),
    re.compile(r"\bgo\s+(?:get|install)\b"),
    re.compile(r"(?:^|[^>])>(?:[^>]|$)"),  # single-redirection file write
    re.compile(r">>"),
    re.compile(r"\brm\b"),
    re.compile(r"\bmkdir\b"),
    re.compile(r"\btouch\b"),
)

# Risky-but-allowed commands: executed and logged, never rejected by policy.
RISK_RES = (
    ("privilege", re.compile(r"^\s*(?:sudo|doas)\b|\bsu\s+-c\b")),
    ("recursive-delete", re.compile(r"\brm\s+(-[a-zA-Z]*r[a-zA-Z]*f|-[a-zA-Z]*f[a-zA-Z]*r)\b")),
    ("remote-installer", re.compile(r"\b(?:curl|wget)\b[^|;&]*\|\s*(?:ba|z|da)?sh\b")),
    ("checkout-mutation", re.compile(r"\bgit\s+(?:reset\s+--hard|clean\s+-[a-zA-Z]*f|checkout\s+--|apply|stash)\b")),
)

# Trace-output classification for the deterministic repairer.
FAILURE_SIGNATURE_RES = (
    ("missing_dependency", re.compile(r"(?:ModuleNotFoundError|ImportError): No module named '([^']+)'")),
    ("missing_dependency", re.compile(r"Cannot find module '([^']+)'")),
    ("command_not_found", re.compile(r"(?:^|\n|:\s)([A-Za-z0-9._+-]+): (?:command )?not found")),
    ("command_not_found", re.compile(r"No such file or directory.*?: '?([A-Za-z0-9._+-]+)'?\s*$")),
    ("wrong_cwd", re.compile(r"can't open file '([^']+)'")),
    ("wrong_cwd", re.compile(r"(?:can't cd to|cannot access|chdir) '?([^':\n]+)'?")),
    ("permission", re.compile(r"[Pp]ermission denied")),
    ("network", re.compile(r"Could not resolve host|Connection refused|Network is unreachable|Temporary failure in name resolution|ReadTimeoutError")),
    ("test_failure", re.compile(r"FAILED \(|AssertionError|failures=[1-9]|test result: FAILED")),
)

# Commands whose absence means a toolchain (not a project tool) is missing.
TOOLCHAIN_COMMANDS = frozenset(
    {"python", "python3", "pip", "pip3", "node", "npm", "cargo", "rustc",
     "go", "make", "cmake", "cc", "gcc", "g++", "javac", "java"}
)

# Python module name -> distribution name, where they differ.
MODULE_DIST_ALIASES = {
    "yaml": "pyyaml",
    "PIL": "Pillow",
    "cv2": "opencv-python-headless",
    "sklearn": "scikit-learn",
    "bs4": "beautifulsoup4",
}

# Rewrites applied when a planned tool is absent from the environment and a
# drop-in substitute exists. Ordered prefix match on the command string.
COMMAND_FALLBACKS = {
    "yarn": (
        ("yarn install", "npm install --no-audit --no-fund"),
        ("yarn test", "npm test --silent"),
        ("yarn run ", "npm run "),
        ("yarn ", "npm run "),
    ),
}

# Verification strength lattice: higher is stronger. Used by the sanity
# check to reject silent downgrades of verification targets.
STRENGTH_TEST_SUITE = 3
STRENGTH_BUILD = 2
STRENGTH_IMPORT_CHECK = 1
STRENGTH_IDENTITY = 0

BUILD_INVOCATION_RES = (
    re.compile(r"\b(?:make|ninja)\b(?!\s+(?:test|check))"),
    re.compile(r"\bcargo\s+build\b"),
    re.compile(r"\bgo\s+build\b"),
    re.compile(r"\bnpm\s+run\s+build\b"),
    re.compile(r"\bcmake\s+--build\b"),
    re.compile(r"pip\s+install\b"),
)
IMPORT_CHECK_RES = (
    re.compile(r"python3?\s+-c\s+[\"']import\s"),
    re.compile(r"-m\s+(?:compileall|py_compile)\b"),
    re.compile(r"node\s+(?:-e\s+[\"']require|--check)\b"),
    re.compile(r"\bgo\s+vet\b"),
    re.compile(r"\btest\s+-[ef]\b"),
)

# Trace text that justifies dropping a CI-derived verification target: the
# strongest command depends on something a local environment cannot provide.
NON_LOCAL_TRACE_RES = (
    re.compile(r"Could not resolve host|Connection refused|Network is unreachable"),
    re.compile(r"secret|credential|unauthorized|401|403", re.IGNORECASE),
    re.compile(r"docker: not found|Cannot connect to the Docker daemon"),
    re.compile(r"no CUDA|GPU .*not (?:found|available)", re.IGNORECASE),
)


@dataclass
class ScanLimits:
    """Caps applied while walking a repository snapshot."""

    max_files: int = 500
    snippet_cap_bytes: int = 4096
    tree_depth: int = 6


@dataclass
class PatternConfig:
    """Override surface for the pattern tables that are plain data."""

    cloud_action_prefixes: tuple[str, ...] = CLOUD_ACTION_PREFIXES
    gpu_runner_tokens: tuple[str, ...] = GPU_RUNNER_TOKENS
    matrix_entry_limit: int = MATRIX_ENTRY_LIMIT
    step_timeout_limit_minutes: int = STEP_TIMEOUT_LIMIT_MINUTES
    degenerate_prefixes: tuple[str, ...] = DEGENERATE_PREFIXES
    module_dist_aliases: dict = field(default_factory=lambda: dict(MODULE_DIST_ALIASES))


def load_pattern_config(path: str | Path | None = None) -> PatternConfig:
    """Return pattern configuration, merging a JSON override file when given."""
    config = PatternConfig()
    if path is None:
        return config
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    valid = {f.name for f in fields(PatternConfig)}
    for key, value in raw.items():
        if key not in valid:
            raise ValueError(f"unknown pattern config key: {key}")
        if isinstance(getattr(config, key), tuple):
            value = tuple(value)
        setattr(config, key, value)
    return config
