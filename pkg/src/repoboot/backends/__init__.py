from .base import (
    COMMAND_CONSTRAINTS,
    PLAN_SCHEMA_ID,
    REPAIR_SCHEMA_ID,
    BackendRequest,
    BackendResponse,
    TokenLedger,
    build_plan_request,
    build_repair_request,
    request_structured,
)
from .llm import LlmBackend
from .rule import RulePlannerBackend, RuleRepairBackend
from .scripted import ScriptedBackend

__all__ = [
    "COMMAND_CONSTRAINTS",
    "PLAN_SCHEMA_ID",
    "REPAIR_SCHEMA_ID",
    "BackendRequest",
    "BackendResponse",
    "TokenLedger",
    "build_plan_request",
    "build_repair_request",
    "request_structured",
    "LlmBackend",
    "RulePlannerBackend",
    "RuleRepairBackend",
    "ScriptedBackend",
]
