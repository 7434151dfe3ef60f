"""Minimal HTTP classification service wrapping the pipeline.

POST /classify with {"subject", "sender", "body"} returns the full
classification result; GET /healthz reports index size, model and
backend kind. One process serves one user profile (one index), matching
the per-user personalization model. Responses are JSON on every path,
including errors.
"""
from __future__ import annotations

import hashlib
import json
import logging
import signal
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .emailcore import clean_record
from .errors import PhishGuardError
from .pipeline import ClassifyOptions, Engine, classify

logger = logging.getLogger(__name__)


def _query_id(subject: str, sender: str, body: str) -> str:
    digest = hashlib.sha256(
        "\x1f".join((subject, sender, body)).encode("utf-8")).hexdigest()
    return f"query-{digest[:12]}"


class ClassifyHandler(BaseHTTPRequestHandler):
    server_version = "phishguard"

    # set per-server via functools.partial in make_server
    engine: Engine = None
    options: ClassifyOptions = None

    def log_message(self, fmt, *args):
        logger.info("%s " + fmt, self.client_address[0], *args)

    def _reply(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/healthz":
            self._reply(404, {"error": "not found"})
            return
        engine = self.engine
        self._reply(200, {
            "index_size": len(engine.index),
            "model_key": engine.model_spec.key,
            "backend": getattr(engine.backend, "kind", "unknown"),
            "rag": self.options.rag,
            "threat": self.options.threat,
        })

    def do_POST(self):
        if self.path != "/classify":
            self._reply(404, {"error": "not found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
        except (ValueError, OSError):
            self._reply(400, {"error": "body is not valid JSON"})
            return
        if not isinstance(payload, dict):
            self._reply(400, {"error": "body must be a JSON object"})
            return
        for required in ("sender", "body"):
            if required not in payload or not isinstance(payload[required], str):
                self._reply(400, {"error": f"missing field: {required}"})
                return
        subject = payload.get("subject", "")
        if not isinstance(subject, str):
            self._reply(400, {"error": "field subject must be a string"})
            return
        cleaned = clean_record(
            _query_id(subject, payload["sender"], payload["body"]),
            subject, payload["sender"], payload["body"])
        if cleaned is None:
            self._reply(400, {"error": "field sender must contain '@'"})
            return
        if not cleaned.body:
            self._reply(400, {"error": "field body is empty after normalization"})
            return
        try:
            result = classify(self.engine, cleaned, self.options)
        except PhishGuardError as exc:
            self._reply(502, {"error": str(exc), "kind": type(exc).__name__})
            return
        self._reply(200, result.to_dict(include_timings=True))


def make_server(engine: Engine, options: ClassifyOptions,
                host: str = "127.0.0.1", port: int = 0) -> ThreadingHTTPServer:
    handler = type("BoundClassifyHandler", (ClassifyHandler,),
                   {"engine": engine, "options": options})
    return ThreadingHTTPServer((host, port), handler)


def serve(engine: Engine, options: ClassifyOptions, host: str,
          port: int) -> None:
    """Run until SIGTERM/SIGINT; in-flight requests finish before exit."""
    server = make_server(engine, options, host, port)

    def _shutdown(signum, frame):
        logger.info("signal %d: shutting down", signum)
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, _shutdown)
    signal.signal(signal.SIGINT, _shutdown)
    logger.info("listening on %s:%d (index size %d, model %s)",
                host, server.server_address[1], len(engine.index),
                engine.model_spec.key)
    try:
        server.serve_forever()
    finally:
        server.server_close()
