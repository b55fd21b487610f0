"""HTTP query endpoint over a read-only ``Recommender``.

Endpoints::

    POST /recommend   raw image body (any content type) or multipart/form-data
                      with an image part; ``k`` and ``exclude_self`` come from the
                      query string or from form fields
    GET  /health      {"status", "items_indexed", "feature_dim"}
    GET  /stats       request counters and uptime

The recommender is built once before the socket opens and never modified;
request handlers only read it.  The counters are the only mutable state and
are updated under a lock.
"""

from __future__ import annotations

import email.parser
import email.policy
import json
import logging
import signal
import threading
import time
import uuid
from dataclasses import dataclass
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import parse_qs, urlsplit

from .dataset import DatasetError
from .pipeline import Recommender

log = logging.getLogger("stylerank.service")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


@dataclass(frozen=True)
class ServiceConfig:
    host: str = "127.0.0.1"
    port: int = 8470
    k_default: int = 5
    k_max: int = 100
    max_body_bytes: int = 8 * 1024 * 1024

    def __post_init__(self):
        if not 1 <= self.k_default <= self.k_max:
            raise ValueError("need 1 <= k_default <= k_max")
        if self.max_body_bytes < 1:
            raise ValueError("max_body_bytes must be positive")


class BadRequest(Exception):
    def __init__(self, status: HTTPStatus, message: str):
        super().__init__(message)
        self.status = status


class Counters:
    FIELDS = ("requests", "recommend_ok", "bad_request", "too_large", "not_found", "internal_error")

    def __init__(self):
        self._lock = threading.Lock()
        self._values = dict.fromkeys(self.FIELDS, 0)
        self._query_ms_total = 0.0

    def add(self, name: str, query_ms: float | None = None) -> None:
        with self._lock:
            self._values[name] += 1
            if query_ms is not None:
                self._query_ms_total += query_ms

    def snapshot(self) -> dict:
        with self._lock:
            out = dict(self._values)
            ok = out["recommend_ok"]
            out["mean_query_ms"] = round(self._query_ms_total / ok, 3) if ok else None
        return out


class ServiceState:
    """Immutable serving state plus monotonic counters."""

    def __init__(self, recommender: Recommender, config: ServiceConfig):
        self.recommender = recommender
        self.config = config
        self.started_at = time.time()
        self.counters = Counters()

    def health(self) -> dict:
        return {"status": "ok", "items_indexed": len(self.recommender.matrix),
                "feature_dim": self.recommender.feature_dim}

    def stats(self) -> dict:
        return {"uptime_s": round(time.time() - self.started_at, 3), **self.counters.snapshot()}


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise BadRequest(HTTPStatus.BAD_REQUEST, f"exclude_self must be a boolean, got {value!r}")


def parse_multipart(body: bytes, content_type: str) -> tuple[bytes | None, dict[str, str]]:
    """Return (first file/non-text part payload, text form fields)."""
    msg = email.parser.BytesParser(policy=email.policy.HTTP).parsebytes(
        b"Content-Type: " + content_type.encode("latin-1") + b"\r\n\r\n" + body)
    if not msg.is_multipart():
        raise BadRequest(HTTPStatus.BAD_REQUEST, "malformed multipart body")
    image, fields = None, {}
    for part in msg.iter_parts():
        name = part.get_param("name", header="content-disposition")
        payload = part.get_payload(decode=True) or b""
        if part.get_filename() is None and name in ("k", "exclude_self"):
            fields[name] = payload.decode("utf-8", "replace")
        elif image is None:
            image = payload
    return image, fields


def parse_recommend(state: ServiceState, query: str, content_type: str, body: bytes) -> tuple[bytes, int, bool]:
    params = {k: v[-1] for k, v in parse_qs(query, keep_blank_values=True).items()}
    image = body
    if content_type.lower().startswith("multipart/"):
        image, fields = parse_multipart(body, content_type)
        params.update(fields)
        if image is None:
            raise BadRequest(HTTPStatus.BAD_REQUEST, "multipart body has no image part")
    k_text = params.get("k")
    try:
        k = state.config.k_default if k_text in (None, "") else int(k_text)
    except ValueError:
        raise BadRequest(HTTPStatus.BAD_REQUEST, f"k must be an integer, got {k_text!r}") from None
    if not 1 <= k <= state.config.k_max:
        raise BadRequest(HTTPStatus.BAD_REQUEST, f"k must be in [1, {state.config.k_max}]")
    exclude_self = _parse_bool(params.get("exclude_self", "false"))
    return image, k, exclude_self


class Handler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server_version = "stylerank"
    state: ServiceState  # set on the subclass made by make_server

    def log_message(self, fmt, *args):  # route access log through logging
        log.debug("%s %s", self.address_string(), fmt % args)

    def _send(self, status: int, obj) -> None:
        body = json.dumps(obj).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: HTTPStatus, message: str, counter: str) -> None:
        self.state.counters.add(counter)
        self._send(status, {"error": message})

    def do_GET(self):
        self.state.counters.add("requests")
        path = urlsplit(self.path).path
        if path == "/health":
            self._send(200, self.state.health())
        elif path == "/stats":
            self._send(200, self.state.stats())
        else:
            self._error(HTTPStatus.NOT_FOUND, f"no route {path}", "not_found")

    def do_POST(self):
        self.state.counters.add("requests")
        url = urlsplit(self.path)
        if url.path != "/recommend":
            self._drain()
            self._error(HTTPStatus.NOT_FOUND, f"no route {url.path}", "not_found")
            return
        try:
            length = int(self.headers.get("Content-Length", ""))
        except ValueError:
            self.close_connection = True
            self._error(HTTPStatus.LENGTH_REQUIRED, "Content-Length required", "bad_request")
            return
        if length > self.state.config.max_body_bytes:
            # refuse without reading the body; the connection can't be reused
            self.close_connection = True
            self._error(HTTPStatus.REQUEST_ENTITY_TOO_LARGE,
                        f"body exceeds {self.state.config.max_body_bytes} bytes", "too_large")
            return
        body = self.rfile.read(length)
        try:
            image, k, exclude_self = parse_recommend(self.state, url.query, self.headers.get("Content-Type", ""), body)
            t0 = time.perf_counter()
            try:
                result = self.state.recommender.recommend_bytes(image, k, exclude_self)
            except DatasetError as exc:
                raise BadRequest(HTTPStatus.BAD_REQUEST, str(exc)) from None
            query_ms = (time.perf_counter() - t0) * 1000.0
        except BadRequest as exc:
            self._error(exc.status, str(exc), "bad_request")
            return
        except Exception:  # noqa: BLE001 - opaque 500, details only in the log
            error_id = uuid.uuid4().hex[:12]
            log.exception("internal error %s", error_id)
            self._error(HTTPStatus.INTERNAL_SERVER_ERROR, f"internal error {error_id}", "internal_error")
            return
        self.state.counters.add("recommend_ok", query_ms)
        self._send(200, {"query_ms": round(query_ms, 3), "k": k, "results": result.to_json()})

    def _drain(self):
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = 0
        if 0 < length <= self.state.config.max_body_bytes:
            self.rfile.read(length)
        elif length:
            self.close_connection = True


class Server(ThreadingHTTPServer):
    # non-daemon handler threads: server_close() joins them, so in-flight
    # requests finish before the process exits
    daemon_threads = False
    block_on_close = True
    allow_reuse_address = True
    # the socketserver default backlog of 5 resets bursts of concurrent connects
    request_queue_size = 128


def make_server(recommender: Recommender, config: ServiceConfig = ServiceConfig()) -> Server:
    state = ServiceState(recommender, config)
    handler = type("BoundHandler", (Handler,), {"state": state})
    server = Server((config.host, config.port), handler)
    server.state = state
    return server


def serve(recommender: Recommender, config: ServiceConfig = ServiceConfig()) -> None:
    """Serve until SIGTERM/SIGINT, then finish in-flight requests and return."""
    server = make_server(recommender, config)
    host, port = server.server_address[:2]

    def stop(signum, frame):
        log.info("signal %d: shutting down", signum)
        threading.Thread(target=server.shutdown, daemon=True).start()

    previous = {s: signal.signal(s, stop) for s in (signal.SIGTERM, signal.SIGINT)}
    log.info("serving %d items on http://%s:%d", len(recommender.matrix), host, port)
    try:
        server.serve_forever(poll_interval=0.2)
    finally:
        server.server_close()
        for s, h in previous.items():
            signal.signal(s, h)
        log.info("stopped")
