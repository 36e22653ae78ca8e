"""Scripted chat-completions server for offline integration tests."""
from __future__ import annotations

import json
import re
import sys
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

_QUESTION_RE = re.compile(r"^Question: (.*)$", re.MULTILINE)


@dataclass
class MockReply:
    status: int = 200
    text: str | None = None
    raw: bytes | None = None


def request_question(request: dict) -> str | None:
    """The question embedded in the first user prompt of a request."""
    for part in request["messages"][0]["content"]:
        if part.get("type") == "text":
            m = _QUESTION_RE.search(part["text"])
            return m.group(1) if m else part["text"]
    return None


def assistant_turns(request: dict) -> int:
    return sum(1 for m in request["messages"] if m["role"] == "assistant")


class ScriptedReplies:
    """Reply with ``script[question][turn]``; falls back to ``default``."""

    def __init__(self, script: dict[str, list], default: str = "<think>ok</think><answer>none</answer>"):
        self.script = script
        self.default = default

    def __call__(self, request: dict):
        replies = self.script.get(request_question(request))
        turn = assistant_turns(request)
        if not replies:
            return self.default
        return replies[min(turn, len(replies) - 1)]


class _Gauge:
    def __init__(self):
        self._lock = threading.Lock()
        self.current = 0
        self.peak = 0

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.peak = max(self.peak, self.current)

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1


class _QuietServer(ThreadingHTTPServer):
    daemon_threads = True

    def handle_error(self, request, client_address):
        # clients that time out hang up mid-reply; that is expected here
        if not isinstance(sys.exc_info()[1], ConnectionError):
            super().handle_error(request, client_address)


class MockChatServer:
    """HTTP server on localhost; use as a context manager.

    ``responder(request_dict)`` returns reply text or a :class:`MockReply`.
    Every raw request body is kept in ``received`` (arrival order).
    """

    def __init__(self, responder, delay_s: float = 0.0):
        self.responder = responder
        self.delay_s = delay_s
        self.received: list[bytes] = []
        self.in_flight = _Gauge()
        self._lock = threading.Lock()
        server = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = self.rfile.read(int(self.headers.get("Content-Length", 0)))
                with server.in_flight:
                    with server._lock:
                        server.received.append(body)
                    if server.delay_s:
                        time.sleep(server.delay_s)
                    reply = server.responder(json.loads(body))
                if not isinstance(reply, MockReply):
                    reply = MockReply(text=reply)
                if reply.raw is not None:
                    payload = reply.raw
                else:
                    payload = json.dumps({"choices": [{"index": 0, "message": {
                        "role": "assistant", "content": reply.text}}]}).encode()
                self.send_response(reply.status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

        self._httpd = _QuietServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._httpd.serve_forever, daemon=True)

    @property
    def url(self) -> str:
        host, port = self._httpd.server_address[:2]
        return f"http://{host}:{port}/v1"

    def requests_for(self, question: str) -> list[bytes]:
        with self._lock:
            bodies = list(self.received)
        return [b for b in bodies if request_question(json.loads(b)) == question]

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self._httpd.shutdown()
        self._httpd.server_close()
