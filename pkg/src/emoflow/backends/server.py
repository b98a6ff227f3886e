"""HTTP front end for :class:`MockBackend`."""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..errors import BindFailure
from ..images import ImageStore
from .mock import MockBackend, MockScript
from .protocol import canonical_json, error_body

logger = logging.getLogger(__name__)

LOG_PATH = "/_log"


class _Handler(BaseHTTPRequestHandler):
    server: _MockHTTPServer
    protocol_version = "HTTP/1.1"
    # Headers and body leave in one write; otherwise delayed ACKs add ~40 ms per request.
    wbufsize = -1
    disable_nagle_algorithm = True

    def do_POST(self) -> None:  # noqa: N802
        length = int(self.headers.get("Content-Length", 0))
        raw = self.rfile.read(length)
        reply = self.server.backend.handle(self.path, raw)
        if reply.delay_ms:
            time.sleep(reply.delay_ms / 1000.0)
        self._send(reply.status, reply.body)

    def do_GET(self) -> None:  # noqa: N802
        if self.path != LOG_PATH:
            self._send(404, canonical_json(error_body("unknown_route", self.path)))
            return
        entries = [
            {"route": r.route, "key": r.key, "status": r.status, "body": r.body}
            for r in self.server.backend.request_log
        ]
        self._send(200, canonical_json({"requests": entries}))

    def _send(self, status: int, body: bytes) -> None:
        try:
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)
        except (BrokenPipeError, ConnectionResetError):
            # Client gave up (timeout); nothing left to do.
            pass

    def log_message(self, fmt: str, *args) -> None:
        logger.debug("mock-server: " + fmt, *args)


class _MockHTTPServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address, backend: MockBackend) -> None:
        self.backend = backend
        super().__init__(address, _Handler)


class MockServerHandle:
    def __init__(self, server: _MockHTTPServer, thread: threading.Thread) -> None:
        self._server = server
        self._thread = thread

    @property
    def backend(self) -> MockBackend:
        return self._server.backend

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def request_log(self) -> list[dict]:
        return [json.loads(canonical_json(r.__dict__)) for r in self.backend.request_log]

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join(timeout=5)

    def __enter__(self) -> MockServerHandle:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def mock_server(script: MockScript, store: ImageStore, port: int = 0, host: str = "127.0.0.1") -> MockServerHandle:
    """Start serving in a background thread. ``port=0`` picks a free port."""
    try:
        server = _MockHTTPServer((host, port), MockBackend(script, store))
    except OSError as exc:
        raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
    thread = threading.Thread(target=server.serve_forever, kwargs={"poll_interval": 0.05}, name=f"mock-server-{port}", daemon=True)
    thread.start()
    return MockServerHandle(server, thread)
