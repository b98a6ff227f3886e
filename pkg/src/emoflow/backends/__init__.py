"""Backend wire protocol, HTTP client and deterministic mocks."""

from __future__ import annotations

from ..images import ImageStore
from .client import (
    BACKEND_URL_ENV,
    INPROCESS_URL,
    BackendClient,
    BackendProfile,
    Backends,
    HttpTransport,
)
from .mock import MockBackend, MockScript, ScriptEntry, InProcessTransport
from .protocol import ALL_ROUTES, PROTOCOL_VERSION, ROUTES
from .server import mock_server


def connect(profile: BackendProfile, store: ImageStore, script: MockScript | None = None) -> tuple[Backends, MockBackend | None]:
    """Backends for ``profile``; the in-process URL gets a fresh MockBackend."""
    profile = profile.with_env_override()
    if profile.base_url == INPROCESS_URL:
        mock = MockBackend(script or MockScript(dimension=profile.dimension), store)
        return Backends(BackendClient(profile, InProcessTransport(mock))), mock
    return Backends(BackendClient(profile, HttpTransport(profile.base_url))), None


__all__ = [
    "ALL_ROUTES",
    "BACKEND_URL_ENV",
    "PROTOCOL_VERSION",
    "ROUTES",
    "BackendClient",
    "BackendProfile",
    "Backends",
    "HttpTransport",
    "InProcessTransport",
    "MockBackend",
    "MockScript",
    "ScriptEntry",
    "connect",
    "mock_server",
]
