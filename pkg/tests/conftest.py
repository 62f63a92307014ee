from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fixture_repos import ALL_BUILDERS  # noqa: E402

from repoboot.evidence import RepoSnapshot, snapshot_repository  # noqa: E402


@pytest.fixture
def build_repo(tmp_path):
    """Build a named corpus repository under tmp_path; returns (path, truth)."""

    def _build(name: str) -> tuple[Path, dict]:
        dest = tmp_path / name
        dest.mkdir(parents=True, exist_ok=True)
        truth = ALL_BUILDERS[name](dest)
        return dest, truth

    return _build


@pytest.fixture
def snapshot_of(tmp_path):
    """Snapshot a repository directory into an isolated workdir."""

    def _snap(source: Path) -> RepoSnapshot:
        return snapshot_repository(str(source), tmp_path / "snapshots")

    return _snap
