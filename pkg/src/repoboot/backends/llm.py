"""Provider-agnostic chat-completion adapter.

Speaks the common chat-completions wire format over HTTPS; the provider,
model, and credential are configuration. The adapter never interprets the
response beyond extracting the assistant text and token usage, so any
endpoint implementing the same shape plugs in.
"""

from __future__ import annotations

import json
import os
import re

import requests

from ..errors import BackendUnavailable
from .base import BackendRequest, BackendResponse

_DOC_LABELS = {
    "plan": ("DiscoveryReport", "CIEvidenceReport"),
    "repair": ("Current bootstrap plan", "Verifier result"),
}

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)

ENV_ENDPOINT = "REPOBOOT_LLM_ENDPOINT"
ENV_MODEL = "REPOBOOT_LLM_MODEL"
ENV_API_KEY = "REPOBOOT_LLM_API_KEY"
ENV_TEMPERATURE = "REPOBOOT_LLM_TEMPERATURE"


class LlmBackend:
    name = "llm"

    def __init__(self, endpoint: str, model: str, api_key: str = "",
                 temperature: float = 1.0) -> None:
        if not endpoint or not model:
            raise BackendUnavailable("llm backend needs an endpoint and a model")
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.calls: list[BackendRequest] = []

    @classmethod
    def from_env(cls) -> "LlmBackend":
        endpoint = os.environ.get(ENV_ENDPOINT, "")
        model = os.environ.get(ENV_MODEL, "")
        if not endpoint or not model:
            raise BackendUnavailable(
                f"set {ENV_ENDPOINT} and {ENV_MODEL} to use the llm backend"
            )
        return cls(
            endpoint=endpoint,
            model=model,
            api_key=os.environ.get(ENV_API_KEY, ""),
            temperature=float(os.environ.get(ENV_TEMPERATURE, "1.0")),
        )

    def complete(self, request: BackendRequest) -> BackendResponse:
        self.calls.append(request)
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": request.constraint_block},
                {"role": "user", "content": self._user_prompt(request)},
            ],
        }
        try:
            response = requests.post(
                self.endpoint, headers=headers, json=payload, timeout=request.timeout_s
            )
        except requests.Timeout:
            return BackendResponse(document="", parse_status="timeout")
        except requests.RequestException as exc:
            return BackendResponse(document=str(exc), parse_status="transport_error")

        if response.status_code != 200:
            return BackendResponse(
                document=f"HTTP {response.status_code}: {response.text[:500]}",
                parse_status="transport_error",
            )
        try:
            body = response.json()
            content = body["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError):
            return BackendResponse(document=response.text[:2000], parse_status="schema_invalid")

        usage = body.get("usage") or {}
        token_usage = None
        if "prompt_tokens" in usage or "completion_tokens" in usage:
            token_usage = (
                int(usage.get("prompt_tokens", 0)),
                int(usage.get("completion_tokens", 0)),
            )
        return BackendResponse(
            document=_extract_document(content),
            parse_status="valid",
            token_usage=token_usage,
        )

    def _user_prompt(self, request: BackendRequest) -> str:
        labels = _DOC_LABELS.get(request.kind, ())
        parts = []
        if request.kind == "plan":
            parts.append(
                "Produce a bootstrap plan JSON document for this repository, "
                "derived only from the evidence below."
            )
        else:
            parts.append(
                "Produce the smallest repair delta JSON document that fixes the "
                "failure shown by the verifier result; unnamed plan aspects are "
                "copied through unchanged."
            )
        parts.append(f"Respond with a single JSON document ({request.schema_id}).")
        for index, doc in enumerate(request.context_documents):
            label = labels[index] if index < len(labels) else f"Document {index}"
            parts.append(f"{label}:\n{doc}")
        return "\n\n".join(parts)


def _extract_document(content: str) -> str:
    fence = _FENCE_RE.search(content)
    if fence:
        return fence.group(1).strip()
    return content.strip()
