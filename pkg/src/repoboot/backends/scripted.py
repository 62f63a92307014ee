"""Canned-response backend for byte-reproducible end-to-end tests.

Responses are keyed by request ordinal: the first request gets response 0,
the second response 1, and so on, regardless of request kind. A response is
either a raw document string or a status marker like ``{"__status__":
"timeout"}``. When the list is exhausted the last response repeats (so an
adversarial backend can keep proposing the same bad delta forever).
"""

from __future__ import annotations

import json
from pathlib import Path

from ..errors import BackendUnavailable
from .base import BackendRequest, BackendResponse


class ScriptedBackend:
    name = "scripted"

    def __init__(self, responses: list[str], repeat_last: bool = True) -> None:
        if not responses:
            raise BackendUnavailable("scripted backend needs at least one response")
        self.responses = list(responses)
        self.repeat_last = repeat_last
        self.calls: list[BackendRequest] = []

    @classmethod
    def from_dir(cls, directory: str | Path, repeat_last: bool = True) -> "ScriptedBackend":
        root = Path(directory)
        if not root.is_dir():
            raise BackendUnavailable(f"scripted response directory missing: {root}")
        files = sorted(p for p in root.iterdir() if p.is_file())
        return cls([p.read_text(encoding="utf-8") for p in files], repeat_last=repeat_last)

    def complete(self, request: BackendRequest) -> BackendResponse:
        ordinal = len(self.calls)
        self.calls.append(request)
        if ordinal >= len(self.responses):
            if not self.repeat_last:
                return BackendResponse(document="", parse_status="transport_error")
            ordinal = len(self.responses) - 1
        document = self.responses[ordinal]

        status = _status_marker(document)
        if status is not None:
            return BackendResponse(document="", parse_status=status)
        return BackendResponse(document=document, parse_status="valid", token_usage=None)


def _status_marker(document: str) -> str | None:
    try:
        raw = json.loads(document)
    except (json.JSONDecodeError, TypeError):
        return None
    if isinstance(raw, dict) and "__status__" in raw:
        return str(raw["__status__"])
    return None
