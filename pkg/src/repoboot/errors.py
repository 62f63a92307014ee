"""Exception types shared across the pipeline."""

from __future__ import annotations


class RepobootError(Exception):
    """Base class for all repoboot errors."""


class ConfigError(RepobootError):
    """Invalid or out-of-range configuration."""


# --- evidence acquisition ---


class SourceUnreachable(RepobootError):
    """A repository URL could not be fetched."""


class NotARepository(RepobootError):
    """The source path is missing, empty, or not a directory."""


# --- backends ---


class StructuredOutputExhausted(RepobootError):
    """Every attempt within the retry budget produced a schema-invalid document."""

    def __init__(self, message: str, attempts: int) -> None:
        super().__init__(message)
        self.attempts = attempts


class BackendUnavailable(RepobootError):
    """The backend handle cannot serve requests at all."""


class TransportError(RepobootError):
    """Non-retryable backend configuration or transport fault."""


class SchemaError(RepobootError):
    """A structured document does not match its expected schema."""


# --- plan / contract ---


class PlanRejected(RepobootError):
    """The plan carries reject-severity constraint violations."""

    def __init__(self, message: str, violations: list | None = None) -> None:
        super().__init__(message)
        self.violations = violations or []


class OutputDirNotWritable(RepobootError):
    """The contract output directory cannot be created or written."""


class MissingFile(RepobootError):
    """A mandatory contract file is absent."""

    def __init__(self, name: str) -> None:
        super().__init__(f"missing contract file: {name}")
        self.name = name


class MalformedManifest(RepobootError):
    """commands.json is unreadable or has an unsupported schema."""


# --- verifier ---


class ExecutorUnavailable(RepobootError):
    """The requested execution backend is not usable on this host."""


class ImageUnavailable(RepobootError):
    """The container base image cannot be obtained."""


class SessionClosed(RepobootError):
    """A stage was dispatched to a session that is no longer open."""


class WarmTraceRejected(RepobootError):
    """Contract validity may only be computed from clean-replay traces."""


# --- repair ---


class NoFailure(RepobootError):
    """Repair was requested for a trace whose gated stages all passed."""


class IndexOutOfBounds(RepobootError):
    """A delta edit addresses a command index the plan does not have."""


class ResultingPlanRejected(RepobootError):
    """Applying the delta produced a plan with reject-severity violations."""

    def __init__(self, message: str, violations: list | None = None) -> None:
        super().__init__(message)
        self.violations = violations or []
