from __future__ import annotations

from pathlib import Path

import pytest

from emoflow.backends import connect
from emoflow.backends.client import BackendProfile
from emoflow.backends.mock import MockScript
from emoflow.images import ImageStore, blank_png

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def store(tmp_path) -> ImageStore:
    return ImageStore(tmp_path / "blobs")


@pytest.fixture
def source(store):
    return store.put(blank_png())


@pytest.fixture
def make_backends(store):
    """Factory: ``make_backends(script=None, **profile_fields) -> (backends, mock)``."""

    def make(script: MockScript | None = None, **profile):
        return connect(BackendProfile(**profile), store, script or MockScript())

    return make


@pytest.fixture
def backends(make_backends):
    return make_backends()[0]


# Acceptance verdicts, echoed in the terminal summary so they show without -s.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
