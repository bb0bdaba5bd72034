"""HTTP binding for a service, with an optional wall-clock driver for demos."""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional

from .gateway import ApiRequest

logger = logging.getLogger(__name__)


def _handler_for(service):
    class Handler(BaseHTTPRequestHandler):
        server_version = "cacs/0.1"

        def _serve(self, method: str) -> None:
            length = int(self.headers.get("Content-Length") or 0)
            body = None
            if length:
                raw = self.rfile.read(length)
                try:
                    body = json.loads(raw)
                except json.JSONDecodeError:
                    self._reply(400, {"error": "InvalidBody", "message": "body is not JSON"})
                    return
            resp = service.handle(ApiRequest(method, self.path, body))
            self._reply(resp.status, resp.body)

        def _reply(self, status: int, doc) -> None:
            data = json.dumps(doc).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)

        def do_GET(self):
            self._serve("GET")

        def do_POST(self):
            self._serve("POST")

        def do_DELETE(self):
            self._serve("DELETE")

        def log_message(self, fmt, *args):
            logger.info("%s %s", self.address_string(), fmt % args)

    return Handler


class ClockDriver(threading.Thread):
    """Advances a service's virtual clock in step with wall time."""

    def __init__(self, service, speed: float = 1.0, tick: float = 0.05):
        super().__init__(daemon=True, name="clock-driver")
        self.service = service
        self.speed = speed
        self.tick = tick
        self._stop = threading.Event()

    def run(self) -> None:
        wall0, virt0 = time.monotonic(), self.service.clock.now
        while not self._stop.wait(self.tick):
            target = virt0 + (time.monotonic() - wall0) * self.speed
            self.service.advance_to(max(target, self.service.clock.now))

    def stop(self) -> None:
        self._stop.set()


class ApiServer:
    def __init__(self, service, host: str = "127.0.0.1", port: int = 8080,
                 speed: Optional[float] = 1.0):
        self.service = service
        self.httpd = ThreadingHTTPServer((host, port), _handler_for(service))
        self.driver = ClockDriver(service, speed) if speed else None
        self._thread: Optional[threading.Thread] = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ApiServer":
        if self.driver is not None:
            self.driver.start()
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True,
                                        name="api-server")
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        if self.driver is not None:
            self.driver.start()
        self.httpd.serve_forever()

    def stop(self) -> None:
        if self.driver is not None:
            self.driver.stop()
        self.httpd.shutdown()
        self.httpd.server_close()
