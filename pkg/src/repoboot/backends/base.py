"""Uniform structured-output interface for planner and repair intelligence.

A backend receives a BackendRequest (serialized evidence/plan/trace documents
plus the command-constraint policy text) and answers with one raw document.
``request_structured`` owns the retry loop: schema-invalid or timed-out
responses consume retries, token usage is accounted regardless of validity,
and transport-level configuration faults abort immediately.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

from ..errors import SchemaError, StructuredOutputExhausted, TransportError
from ..serialize import dumps_compact

PLAN_SCHEMA_ID = "bootstrap_plan.v1"
REPAIR_SCHEMA_ID = "repair_delta.v1"

PLAN_REQUEST_TIMEOUT_S = 300
REPAIR_REQUEST_TIMEOUT_S = 180

# Policy text sent with every request. Backends that plan or repair must obey
# these rules; the deterministic validator enforces the same table.
COMMAND_CONSTRAINTS = """\
Command policy:
- Assume a fresh, minimal environment: install any required language runtime,
  package manager, or build tool in the install phase before first use.
- Doctor commands run after setup and must be read-only health checks; all
  environment mutation belongs in install commands.
- Every command's reason must mention the command it justifies.
- Validation, import, and test invocations belong only in minimal_verify,
  strongest_verify, or run_probes.
- minimal_verify is the hard gate: the cheapest command that genuinely proves
  the checkout is usable. A bare runtime version query is not acceptable for
  a non-empty repository.
- strongest_verify is advisory: the strongest locally reproducible check
  derived from CI or build evidence.
- Prefer the repository's own development workflow and cwd "."; never use
  absolute host paths.
- Risky commands (privilege escalation, recursive deletion, remote installers,
  checkout mutation) are allowed when necessary; they are logged as safety
  warnings rather than rejected.
- Repairs must be minimal deltas over the current plan: use zero-based
  indices, prefer replace_commands for one-command fixes, and never touch
  commands the trace does not implicate.
"""


@dataclass
class BackendRequest:
    kind: str  # "plan" | "repair"
    schema_id: str
    context_documents: list[str]
    constraint_block: str = COMMAND_CONSTRAINTS
    timeout_s: int = PLAN_REQUEST_TIMEOUT_S


@dataclass
class BackendResponse:
    document: str
    parse_status: str  # "valid" | "schema_invalid" | "timeout" | "transport_error"
    token_usage: tuple[int, int] | None = None


class TokenLedger:
    """Run-level token accounting; tolerates concurrent additive updates."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.input_tokens = 0
        self.output_tokens = 0

    def add(self, usage: tuple[int, int] | None) -> None:
        if usage is None:
            return
        with self._lock:
            self.input_tokens += usage[0]
            self.output_tokens += usage[1]

    @property
    def total(self) -> int:
        return self.input_tokens + self.output_tokens

    def to_json_dict(self) -> dict:
        return {
            "input": self.input_tokens,
            "output": self.output_tokens,
            "total": self.total,
        }


def build_plan_request(discovery, ci) -> BackendRequest:
    """Plan request: discovery document first, CI evidence second, always both."""
    return BackendRequest(
        kind="plan",
        schema_id=PLAN_SCHEMA_ID,
        context_documents=[
            dumps_compact(discovery.to_json_dict()),
            dumps_compact(ci.to_json_dict()),
        ],
        timeout_s=PLAN_REQUEST_TIMEOUT_S,
    )


def build_repair_request(plan, trace) -> BackendRequest:
    """Repair request: current plan first, then the verifier result."""
    return BackendRequest(
        kind="repair",
        schema_id=REPAIR_SCHEMA_ID,
        context_documents=[
            dumps_compact(plan.to_json_dict()),
            dumps_compact(trace.to_json_dict()),
        ],
        timeout_s=REPAIR_REQUEST_TIMEOUT_S,
    )


def request_structured(backend, request: BackendRequest, retry_budget: int,
                       validator, token_ledger: TokenLedger | None = None):
    """Return the first response that parses and validates against the schema.

    Every invalid or timed-out response consumes one retry; after
    ``retry_budget`` attempts the operation fails with
    StructuredOutputExhausted. Transport-level faults are not retried.
    """
    if retry_budget < 1:
        raise StructuredOutputExhausted("retry budget must be at least 1", attempts=0)

    attempts = 0
    last_error = ""
    while attempts < retry_budget:
        response: BackendResponse = backend.complete(request)
        attempts += 1
        if token_ledger is not None:
            token_ledger.add(response.token_usage)

        if response.parse_status == "transport_error":
            raise TransportError(response.document or "backend transport error")
        if response.parse_status == "timeout":
            last_error = "backend timed out"
            continue

        try:
            raw = json.loads(response.document)
        except json.JSONDecodeError as exc:
            response.parse_status = "schema_invalid"
            last_error = f"response is not JSON: {exc}"
            continue
        try:
            validated = validator(raw)
        except SchemaError as exc:
            response.parse_status = "schema_invalid"
            last_error = str(exc)
            continue
        response.parse_status = "valid"
        return validated

    raise StructuredOutputExhausted(
        f"no schema-valid {request.kind} document after {attempts} attempts "
        f"(last error: {last_error})",
        attempts=attempts,
    )
