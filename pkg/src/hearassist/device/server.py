"""HTTP stand-in for the ESP8266 display board.

Endpoints::

    POST /display      text/plain body (<= 4096 bytes) -> 200 "OK"
    GET  /framebuffer  current framebuffer as P1 PBM
    GET  /health       200 "UP"
"""

from __future__ import annotations

import logging
import threading
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .display import Font, FrameBuffer, builtin_font, pbm_text, render_text

MAX_BODY = 4096
log = logging.getLogger(__name__)


class DeviceStartError(OSError):
    pass


class DisplayState:
    """Framebuffer guarded by a lock; every mutation is a full render."""

    def __init__(self, font: Font | None = None, mirrored: bool = True):
        self.font = font or builtin_font()
        self.mirrored = mirrored
        self._fb = FrameBuffer()
        self._lock = threading.Lock()
        self.history: list[str] = []

    def show(self, text: str) -> None:
        fb = FrameBuffer()
        render_text(fb, text, self.font, self.mirrored)
        with self._lock:
            self._fb = fb
            self.history.append(text)

    def snapshot(self) -> FrameBuffer:
        with self._lock:
            return self._fb.copy()


class _Handler(BaseHTTPRequestHandler):
    server_version = "hearassist-device/1.0"
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _reply(self, status: int, body: bytes, content_type: str = "text/plain; charset=utf-8"):
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _discard_body(self):
        length = int(self.headers.get("Content-Length") or 0)
        if 0 < length <= MAX_BODY:
            self.rfile.read(length)
        elif length > MAX_BODY:
            self.close_connection = True

    def do_POST(self):
        if self.path != "/display":
            self._discard_body()
            return self._reply(HTTPStatus.NOT_FOUND, b"not found")
        try:
            length = int(self.headers.get("Content-Length") or 0)
        except ValueError:
            self.close_connection = True
            return self._reply(HTTPStatus.BAD_REQUEST, b"bad content-length")
        if length > MAX_BODY:
            self.close_connection = True
            return self._reply(HTTPStatus.REQUEST_ENTITY_TOO_LARGE, b"body too large")
        body = self.rfile.read(length) if length else b""
        self.server.state.show(body.decode("utf-8", errors="replace"))
        self._reply(HTTPStatus.OK, b"OK")

    def do_GET(self):
        if self.path == "/display":
            return self._reply(HTTPStatus.METHOD_NOT_ALLOWED, b"method not allowed")
        if self.path == "/health":
            return self._reply(HTTPStatus.OK, b"UP")
        if self.path == "/framebuffer":
            body = pbm_text(self.server.state.snapshot()).encode("ascii")
            return self._reply(HTTPStatus.OK, body, "image/x-portable-bitmap")
        self._reply(HTTPStatus.NOT_FOUND, b"not found")

    def _not_allowed(self):
        self._discard_body()
        if self.path == "/display":
            return self._reply(HTTPStatus.METHOD_NOT_ALLOWED, b"method not allowed")
        self._reply(HTTPStatus.NOT_FOUND, b"not found")

    do_PUT = do_DELETE = do_PATCH = _not_allowed


class DeviceServer(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = False

    def __init__(self, address, state: DisplayState):
        self.state = state
        super().__init__(address, _Handler)
        self._thread: threading.Thread | None = None

    @property
    def host(self) -> str:
        return self.server_address[0]

    @property
    def port(self) -> int:
        return self.server_address[1]

    @property
    def endpoint(self) -> str:
        return f"{self.host}:{self.port}"

    @property
    def url(self) -> str:
        return f"http://{self.endpoint}"

    @property
    def framebuffer(self) -> FrameBuffer:
        return self.state.snapshot()

    def start_background(self) -> "DeviceServer":
        self._thread = threading.Thread(target=self.serve_forever, name="device-sim", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def start_server(
    port: int = 8080,
    host: str = "127.0.0.1",
    font: Font | None = None,
    mirrored: bool = True,
    announce=print,
    background: bool = True,
) -> DeviceServer:
    """Bind and (by default) serve on a daemon thread.  ``port=0`` picks a free port."""
    try:
        server = DeviceServer((host, port), DisplayState(font, mirrored))
    except OSError as exc:
        raise DeviceStartError(f"cannot bind device-sim to {host}:{port}: {exc}") from exc
    if announce:
        announce(f"device-sim listening on http://{server.endpoint}")
    return server.start_background() if background else server
