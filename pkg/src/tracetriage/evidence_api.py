"""Read-only evidence tools over a sealed bundle and their wire protocol.

Three tools are exposed: ``get_session``, ``get_screenshot`` and
``retrieve_resource``. Messages are canonical JSON objects framed with a
4-byte big-endian length prefix, carried over standard streams or TCP.
"""
from __future__ import annotations

import base64
import json
import socket
import socketserver
import struct
import sys
import threading
from dataclasses import dataclass, field
from typing import Optional

from .bundle import EvidenceBundle, NetworkRecord, canonical_json, find_secrets, fmt_time, short_time
from .errors import (
    BadPrefixError,
    FilterParseError,
    NoFrameError,
    OutOfSessionError,
    ToolError,
)
from .timeline import EvidenceWindow, dual_seek, seek_frame, to_micros

TOOL_METHODS = ("get_session", "get_screenshot", "retrieve_resource")
RECORD_PAGE_CAP = 50
RESOURCE_PAGE_CAP = 20
CONTENT_CAP = 32 * 1024

METHOD_NOT_FOUND = 1
BAD_PARAMS = 2
OUT_OF_SESSION = 3
NO_FRAME = 4
FILTER_PARSE = 5

FILTER_KEYS = ("host", "url", "method", "status", "mime")


# -- filter expressions ------------------------------------------------------

@dataclass(frozen=True)
class FilterExpr:
    """Conjunction of ``key:value`` clauses."""

    clauses: tuple = ()

    def matches(self, rec: NetworkRecord) -> bool:
        return all(_clause_matches(key, value, rec) for key, value in self.clauses)

    def __str__(self) -> str:
        return " ".join(f"{k}:{v}" for k, v in self.clauses)


def _clause_matches(key: str, value: str, rec: NetworkRecord) -> bool:
    if key == "status":
        if value.endswith("xx"):
            return rec.status // 100 == int(value[0])
        return rec.status == int(value)
    field_value = {
        "host": rec.host,
        "url": rec.url,
        "method": rec.method,
        "mime": rec.mime_type or "",
    }[key]
    return value.lower() in field_value.lower()


def parse_filter(text) -> Optional[FilterExpr]:
    """Parse whitespace-separated ``key:value`` clauses; None for an empty filter.

    ``status`` takes an exact code (``404``) or a class (``4xx``); every other
    key is a case-insensitive substring match.
    """
    if text is None:
        return None
    if isinstance(text, FilterExpr):
        return text
    if not isinstance(text, str):
        raise FilterParseError(repr(text), "filter must be a string")
    clauses = []
    for clause in text.split():
        key, sep, value = clause.partition(":")
        if not sep or not value:
            raise FilterParseError(clause, "expected key:value")
        key = key.lower()
        if key not in FILTER_KEYS:
            raise FilterParseError(clause, f"unknown key {key!r}")
        if key == "status":
            ok = (len(value) == 3 and value[0] in "12345" and value[1:].lower() == "xx") or value.isdigit()
            if not ok:
                raise FilterParseError(clause, "status must be a code or a class like 4xx")
            value = value.lower()
        clauses.append((key, value))
    return FilterExpr(tuple(clauses)) if clauses else None


# -- result shapes -----------------------------------------------------------

@dataclass
class SessionSlice:
    records: list
    window: Optional[EvidenceWindow]
    total_matched: int
    truncated: bool
    next_cursor: Optional[int] = None

    def to_dict(self) -> dict:
        window = None
        if self.window is not None:
            window = {
                "center": fmt_time(self.window.center),
                "start": fmt_time(self.window.start),
                "end": fmt_time(self.window.end),
            }
        return {
            "records": self.records,
            "window": window,
            "total_matched": self.total_matched,
            "truncated": self.truncated,
            "next_cursor": self.next_cursor,
        }


@dataclass
class ResourcePage:
    items: list = field(default_factory=list)
    total_matched: int = 0
    next_cursor: Optional[int] = None

    def to_dict(self) -> dict:
        return {"items": self.items, "total_matched": self.total_matched, "next_cursor": self.next_cursor}

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


def record_view(rec: NetworkRecord, bundle: EvidenceBundle) -> dict:
    """Wire view of a network record; persona secrets are kept but flagged."""
    view = rec.to_dict()
    view["t_rel"] = fmt_time(bundle.rel(rec.started_at))
    persona = bundle.context.persona
    hit = find_secrets(rec.request_body, persona) or find_secrets(rec.url, persona)
    view["secret_match"] = bool(hit)
    return view


def _decode_content(kind: str, content: bytes) -> tuple[str, str, bool]:
    truncated = len(content) > CONTENT_CAP
    if kind in ("html", "script", "other"):
        try:
            text = content.decode("utf-8")
        except UnicodeDecodeError:
            pass
        else:
            raw = text.encode("utf-8")[:CONTENT_CAP]
            return raw.decode("utf-8", errors="ignore"), "utf-8", truncated
    return base64.b64encode(content[:CONTENT_CAP]).decode("ascii"), "base64", truncated


# -- in-process service -------------------------------------------------------

class EvidenceService:
    """The three read-only tools bound to one sealed bundle."""

    def __init__(self, bundle: EvidenceBundle, *, record_cap: int = RECORD_PAGE_CAP,
                 resource_cap: int = RESOURCE_PAGE_CAP):
        if not bundle.sealed:
            raise ValueError("evidence tools require a sealed bundle")
        self.bundle = bundle
        self.record_cap = record_cap
        self.resource_cap = resource_cap

    def _check_time(self, time) -> float:
        if isinstance(time, bool) or not isinstance(time, (int, float)):
            raise TypeError("time must be a number")
        if time < 0 or to_micros(time) > to_micros(self.bundle.session_end):
            raise OutOfSessionError(f"time {time} outside session [0, {self.bundle.session_end}]")
        return float(time)

    def get_session(self, time=None, filter=None, cursor: int = 0) -> SessionSlice:
        expr = parse_filter(filter)
        window = None
        if time is None:
            records = list(self.bundle.network)
        else:
            seek = dual_seek(self.bundle, self._check_time(time))
            records, window = seek.network_burst, seek.window
        if expr is not None:
            records = [rec for rec in records if expr.matches(rec)]
        cursor = _check_cursor(cursor)
        page = records[cursor:cursor + self.record_cap]
        more = cursor + len(page) < len(records)
        return SessionSlice(
            records=[record_view(rec, self.bundle) for rec in page],
            window=window,
            total_matched=len(records),
            truncated=more,
            next_cursor=cursor + len(page) if more else None,
        )

    def get_screenshot(self, time) -> dict:
        t = self._check_time(time)
        frame = seek_frame(self.bundle.frames, t)
        if frame is None:
            raise NoFrameError(f"no frame at or before t={short_time(t)}")
        return {"image_ref": frame.image_ref, "frame_no": frame.frame_no, "t_rel": fmt_time(frame.t_rel)}

    def retrieve_resource(self, prefix, cursor: int = 0) -> ResourcePage:
        if not isinstance(prefix, str) or not prefix:
            raise BadPrefixError("prefix must be a non-empty string")
        ids = self.bundle.resources.with_prefix(prefix)
        cursor = _check_cursor(cursor)
        page = ids[cursor:cursor + self.resource_cap]
        items = []
        for rid in page:
            res = self.bundle.resources.get(rid)
            content, encoding, truncated = _decode_content(res.kind, res.content)
            items.append({
                "resource_id": rid,
                "kind": res.kind,
                "size": len(res.content),
                "sha256": res.sha256,
                "content": content,
                "encoding": encoding,
                "truncated": truncated,
            })
        more = cursor + len(page) < len(ids)
        return ResourcePage(items, len(ids), cursor + len(page) if more else None)


def _check_cursor(cursor) -> int:
    if isinstance(cursor, bool) or not isinstance(cursor, int) or cursor < 0:
        raise TypeError("cursor must be a non-negative integer")
    return cursor


def get_session(bundle, time=None, filter=None, cursor=0) -> SessionSlice:
    return EvidenceService(bundle).get_session(time, filter, cursor)


def get_screenshot(bundle, time) -> dict:
    return EvidenceService(bundle).get_screenshot(time)


def retrieve_resource(bundle, prefix, cursor=0) -> ResourcePage:
    return EvidenceService(bundle).retrieve_resource(prefix, cursor)


# -- protocol ----------------------------------------------------------------

def encode_message(obj) -> bytes:
    body = canonical_json(obj)
    return struct.pack(">I", len(body)) + body


def _read_exact(stream, n: int) -> Optional[bytes]:
    chunks = []
    while n:
        chunk = stream.read(n) if hasattr(stream, "read") else stream.recv(n)
        if not chunk:
            if chunks:
                raise ConnectionError("stream closed mid-message")
            return None
        chunks.append(chunk)
        n -= len(chunk)
    return b"".join(chunks)


def read_message(stream):
    """Next framed message from a binary stream or socket; None at clean EOF."""
    header = _read_exact(stream, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    body = _read_exact(stream, length) if length else b""
    if body is None:
        raise ConnectionError("stream closed mid-message")
    return json.loads(body.decode("utf-8"))


class ToolServer:
    """Dispatches tool requests to an :class:`EvidenceService`."""

    def __init__(self, bundle: EvidenceBundle):
        self.service = EvidenceService(bundle)

    @property
    def bundle(self) -> EvidenceBundle:
        return self.service.bundle

    def handle(self, request) -> dict:
        request_id = request.get("request_id") if isinstance(request, dict) else None
        try:
            if not isinstance(request, dict):
                raise TypeError("request must be an object")
            method = request.get("method")
            params = request.get("params") or {}
            if method not in TOOL_METHODS:
                return _error(request_id, METHOD_NOT_FOUND, f"unknown method {method!r}")
            if not isinstance(params, dict):
                raise TypeError("params must be an object")
            result = self._dispatch(method, params)
        except OutOfSessionError as exc:
            return _error(request_id, OUT_OF_SESSION, str(exc))
        except NoFrameError as exc:
            return _error(request_id, NO_FRAME, str(exc))
        except FilterParseError as exc:
            return _error(request_id, FILTER_PARSE, str(exc))
        except (BadPrefixError, TypeError, ValueError, KeyError) as exc:
            return _error(request_id, BAD_PARAMS, str(exc))
        return {"request_id": request_id, "result": result}

    def _dispatch(self, method: str, params: dict):
        allowed = {
            "get_session": {"time", "filter", "cursor"},
            "get_screenshot": {"time"},
            "retrieve_resource": {"prefix", "cursor"},
        }[method]
        extra = set(params) - allowed
        if extra:
            raise TypeError(f"unexpected params for {method}: {sorted(extra)}")
        if method == "get_session":
            return self.service.get_session(**params).to_dict()
        if method == "get_screenshot":
            if "time" not in params:
                raise TypeError("get_screenshot requires time")
            return self.service.get_screenshot(params["time"])
        if "prefix" not in params:
            raise TypeError("retrieve_resource requires prefix")
        return self.service.retrieve_resource(**params).to_dict()

    def handle_bytes(self, body: bytes) -> bytes:
        try:
            request = json.loads(body.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            return canonical_json(_error(None, BAD_PARAMS, f"malformed request: {exc}"))
        return canonical_json(self.handle(request))

    def serve_stream(self, rfile, wfile) -> None:
        """Answer framed requests from ``rfile`` until EOF, in order."""
        while True:
            request = read_message(rfile)
            if request is None:
                return
            wfile.write(encode_message(self.handle(request)))
            wfile.flush()


def _error(request_id, code: int, message: str) -> dict:
    return {"request_id": request_id, "error": {"code": code, "message": message}}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        self.server.tool_server.serve_stream(self.rfile, self.wfile)


class _TCPServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class ServerHandle:
    """Background TCP server; use as a context manager or call :meth:`shutdown`."""

    def __init__(self, tool_server: ToolServer, host: str = "127.0.0.1", port: int = 0):
        self._server = _TCPServer((host, port), _Handler)
        self._server.tool_server = tool_server
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    @property
    def address(self) -> tuple[str, int]:
        return self._server.server_address[:2]

    def wait(self) -> None:
        """Block until the server thread exits."""
        self._thread.join()

    def shutdown(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        self._thread.join()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.shutdown()


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or "127.0.0.1", int(port)


def serve(bundle: EvidenceBundle, transport="127.0.0.1:0"):
    """Serve ``bundle`` over ``transport``.

    ``"stdio"`` blocks answering framed requests on stdin/stdout and returns
    None at EOF. Anything else is a ``host:port`` (or tuple) to listen on in
    a background thread; the returned :class:`ServerHandle` owns it.
    """
    tool_server = ToolServer(bundle)
    if transport == "stdio":
        tool_server.serve_stream(sys.stdin.buffer, sys.stdout.buffer)
        return None
    host, port = parse_address(transport) if isinstance(transport, str) else transport
    return ServerHandle(tool_server, host, port)


# -- clients -----------------------------------------------------------------

class _ClientBase:
    def __init__(self):
        self._next_id = 0
        self._id_lock = threading.Lock()

    def _new_id(self) -> str:
        with self._id_lock:
            self._next_id += 1
            return f"req-{self._next_id}"

    def request(self, method: str, params: Optional[dict] = None, request_id=None) -> dict:
        """Send one request and return the raw response object."""
        raise NotImplementedError

    def call(self, method: str, **params):
        response = self.request(method, params)
        if "error" in response:
            raise ToolError(response["error"]["code"], response["error"]["message"])
        return response["result"]


class LocalClient(_ClientBase):
    """In-process client; requests still pass through the wire encoding."""

    def __init__(self, bundle_or_server):
        super().__init__()
        if isinstance(bundle_or_server, ToolServer):
            self.server = bundle_or_server
        else:
            self.server = ToolServer(bundle_or_server)

    def request(self, method, params=None, request_id=None):
        request_id = request_id if request_id is not None else self._new_id()
        frame = encode_message({"request_id": request_id, "method": method, "params": params or {}})
        reply = self.server.handle_bytes(frame[4:])
        return json.loads(reply.decode("utf-8"))


class SocketClient(_ClientBase):
    """Client over one TCP connection; calls are serialized per connection."""

    def __init__(self, address, timeout: float = 10.0):
        super().__init__()
        if isinstance(address, str):
            address = parse_address(address)
        self._sock = socket.create_connection(address, timeout=timeout)
        self._file = self._sock.makefile("rb")
        self._lock = threading.Lock()

    def request(self, method, params=None, request_id=None):
        request_id = request_id if request_id is not None else self._new_id()
        frame = encode_message({"request_id": request_id, "method": method, "params": params or {}})
        with self._lock:
            self._sock.sendall(frame)
            response = read_message(self._file)
        if response is None:
            raise ConnectionError("server closed the connection")
        return response

    def close(self) -> None:
        self._file.close()
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class StreamClient(_ClientBase):
    """Client over a pair of binary streams (e.g. a child process's stdio)."""

    def __init__(self, rfile, wfile):
        super().__init__()
        self._rfile, self._wfile = rfile, wfile
        self._lock = threading.Lock()

    def request(self, method, params=None, request_id=None):
        request_id = request_id if request_id is not None else self._new_id()
        with self._lock:
            self._wfile.write(encode_message({"request_id": request_id, "method": method,
                                              "params": params or {}}))
            self._wfile.flush()
            response = read_message(self._rfile)
        if response is None:
            raise ConnectionError("server closed the stream")
        return response
