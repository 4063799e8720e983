"""HTTP facade over a live run: pending clip pairs out, ratings in, status.

The server never touches run internals directly; it talks to a runner object
(SyncRun or AsyncRun) through three calls: the pending-pair exchange,
submit_rating, and status. Clip frames travel as base64 PNG so a browser can
animate them without any video codec, and because each pair's frames are
encoded once at enqueue time, repeated serves of a pair are byte-identical.
"""

from __future__ import annotations

import base64
import json
import os
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlparse

from .feedback import UnknownPairError

DEFAULT_PORT = 8321

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".mjs": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json; charset=utf-8",
    ".map": "application/json; charset=utf-8",
    ".png": "image/png",
    ".svg": "image/svg+xml",
    ".ico": "image/x-icon",
}

_PLACEHOLDER_PAGE = b"""<!doctype html>
<html><head><meta charset="utf-8"><title>rating service</title></head>
<body><p>The rating service is running, but no UI bundle is installed.
Use the HTTP endpoints under /api directly.</p></body></html>
"""


def pair_view(pair, payload) -> dict:
    """JSON-serializable view of one pending pair for the rating UI."""
    return {
        "pair_id": pair.pair_id,
        "length": pair.length,
        "fps": int(payload["fps"]),
        "demo_frames": [base64.b64encode(png).decode("ascii") for png in payload["demo_png"]],
        "agent_frames": [base64.b64encode(png).decode("ascii") for png in payload["agent_png"]],
    }


class RunService:
    """Glue between the HTTP handler and a live runner."""

    def __init__(self, runner, ui_dir: str | None = None):
        self.runner = runner
        self.ui_dir = os.path.realpath(ui_dir) if ui_dir else None

    # - API operations; each returns (status_code, body_dict_or_None) -

    def next_pair(self):
        if not self.runner.human_mode:
            return 409, {"error": "run is not in human-rating mode"}
        item = self.runner.exchange.next_pending()
        if item is None:
            return 204, None
        pair, payload = item
        return 200, pair_view(pair, payload)

    def submit(self, body: bytes):
        try:
            data = json.loads(body)
        except (ValueError, UnicodeDecodeError):
            return 400, {"error": "body must be JSON"}
        if not isinstance(data, dict) or "pair_id" not in data or "rating" not in data:
            return 400, {"error": "body needs pair_id and rating"}
        pair_id, rating = data["pair_id"], data["rating"]
        if not isinstance(rating, int) or isinstance(rating, bool) or not 1 <= rating <= 5:
            return 400, {"error": f"rating {rating!r} outside 1..5"}
        if not isinstance(pair_id, str):
            return 400, {"error": "pair_id must be a string"}
        try:
            self.runner.submit_rating(pair_id, rating)
        except UnknownPairError as exc:
            return 410, {"error": str(exc)}
        except ValueError as exc:
            return 400, {"error": str(exc)}
        return 200, {"ok": True, "pair_id": pair_id, "rating": rating}

    def status(self):
        return 200, self.runner.status()

    # - static UI bundle -

    def static_file(self, path: str):
        """(code, content_type, body) for a bundle file; / maps to index.html."""
        rel = path.lstrip("/") or "index.html"
        if self.ui_dir is None:
            if rel == "index.html":
                return 200, _CONTENT_TYPES[".html"], _PLACEHOLDER_PAGE
            return 404, _CONTENT_TYPES[".html"], b"not found"
        full = os.path.realpath(os.path.join(self.ui_dir, rel))
        # realpath collapses any ../ tricks; anything outside the bundle is refused
        if full != self.ui_dir and not full.startswith(self.ui_dir + os.sep):
            return 404, _CONTENT_TYPES[".html"], b"not found"
        if not os.path.isfile(full):
            return 404, _CONTENT_TYPES[".html"], b"not found"
        ctype = _CONTENT_TYPES.get(os.path.splitext(full)[1], "application/octet-stream")
        with open(full, "rb") as fh:
            return 200, ctype, fh.read()


class _Handler(BaseHTTPRequestHandler):
    service: RunService  # injected by make_server

    def log_message(self, *args):  # keep test output quiet
        pass

    def _send_json(self, code: int, obj) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(code)
        self.send_header("Content-Type", "application/json; charset=utf-8")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_no_content(self) -> None:
        self.send_response(204)
        self.send_header("Content-Length", "0")
        self.end_headers()

    def do_GET(self):
        route = urlparse(self.path).path
        if route == "/api/pairs/next":
            code, body = self.service.next_pair()
            if code == 204:
                self._send_no_content()
            else:
                self._send_json(code, body)
        elif route == "/api/status":
            code, body = self.service.status()
            self._send_json(code, body)
        elif route.startswith("/api/"):
            self._send_json(404, {"error": f"unknown endpoint {route}"})
        else:
            code, ctype, body = self.service.static_file(route)
            self.send_response(code)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

    def do_POST(self):
        route = urlparse(self.path).path
        if route != "/api/ratings":
            self._send_json(404, {"error": f"unknown endpoint {route}"})
            return
        length = int(self.headers.get("Content-Length") or 0)
        code, body = self.service.submit(self.rfile.read(length))
        self._send_json(code, body)


def make_server(runner, host: str = "127.0.0.1", port: int = 0, ui_dir: str | None = None):
    """ThreadingHTTPServer bound to (host, port); port 0 picks a free one."""
    service = RunService(runner, ui_dir=ui_dir)
    handler = type("BoundHandler", (_Handler,), {"service": service})
    server = ThreadingHTTPServer((host, port), handler)
    server.daemon_threads = True
    return server


def serve_in_thread(server) -> threading.Thread:
    """Run the server loop on a daemon thread; stop it with server.shutdown()."""
    thread = threading.Thread(target=server.serve_forever, name="rating-http", daemon=True)
    thread.start()
    return thread
