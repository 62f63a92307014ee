"""Stable JSON helpers: every machine-readable artifact goes through these."""

from __future__ import annotations

import json
from pathlib import Path


def dumps_stable(payload) -> str:
    """Serialize with sorted keys and a trailing newline for byte-stable files."""
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def dumps_compact(payload) -> str:
    """One-line form used inside backend request documents."""
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path: str | Path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_stable(payload), encoding="utf-8")
    return path


def read_json(path: str | Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))
