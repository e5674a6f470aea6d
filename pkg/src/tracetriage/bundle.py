"""Evidence bundle data model, capture-artifact ingestion and sealing.

A bundle is assembled once from its capture artifacts (HTTP archive, frame
manifest, action log, resources and session context), sealed with a SHA-256
manifest digest and from then on treated as read-only evidence.
"""
from __future__ import annotations

import base64
import calendar
import hashlib
import json
import re
import threading
import warnings
from dataclasses import dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional
from urllib.parse import unquote_plus, urlsplit

from .errors import (
    IntegrityError,
    MissingResourceError,
    MonotonicityError,
    ParseError,
    SealedError,
    SkippedEntry,
)

BODY_CAP = 64 * 1024
BUNDLE_FORMAT = "bundle.v1"
ACTION_KINDS = ("click", "type", "scroll", "key", "navigate", "note")
RESOURCE_KINDS = ("html", "script", "image", "other")
SECRET_FIELDS = ("password", "card_number")

_RESOURCE_ID = re.compile(r"[A-Za-z0-9_-][A-Za-z0-9._-]*")
_MICRO = 1_000_000


# -- number formatting -------------------------------------------------------

def to_micros(seconds: float) -> int:
    """Seconds as an integer count of microseconds (the canonical resolution)."""
    return round(seconds * _MICRO)


def from_micros(us: int) -> float:
    return us / _MICRO


def fmt_time(seconds: float) -> str:
    """Canonical decimal form: exactly six fractional digits."""
    us = to_micros(seconds)
    sign = "-" if us < 0 else ""
    whole, frac = divmod(abs(us), _MICRO)
    return f"{sign}{whole}.{frac:06d}"


def short_time(seconds: float) -> str:
    """Shortest decimal form of a microsecond-resolution time (``8.1``)."""
    text = fmt_time(seconds).rstrip("0")
    return text + "0" if text.endswith(".") else text


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def host_of(url: str) -> str:
    try:
        return (urlsplit(url).hostname or "").lower()
    except ValueError:
        return ""


# -- persona / context -------------------------------------------------------

@dataclass(frozen=True)
class Persona:
    full_name: str = "Bob Alice"
    username: str = "randombob"
    password: str = "ZK29YcCITMb!"
    email: str = "boba@demo.com"
    phone: str = "+1-555-0199"
    address: str = "123 Maple Ave, Springfield, IL 62704, US"
    card_number: str = "1234 5678 9012 3456"
    card_exp: str = "12/29"
    card_cvc: str = "000"
    user_agent: str = "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7)"

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, str) or not value.strip():
                raise ValueError(f"persona field {f.name!r} must be a non-empty string")

    def secrets(self) -> dict[str, str]:
        return {name: getattr(self, name) for name in SECRET_FIELDS}

    def identifiers(self) -> dict[str, str]:
        return {
            name: getattr(self, name)
            for name in ("username", "email", "phone", "full_name", "address")
        }

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "Persona":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown persona fields: {sorted(unknown)}")
        return cls(**dict(data))


def _value_variants(value: str) -> set[str]:
    variants = {value}
    compact = "".join(value.split())
    if compact:
        variants.add(compact)
    return variants


def text_contains(haystack: Optional[str], value: str) -> bool:
    """Match ``value`` in ``haystack`` as typed, url-decoded or space-stripped."""
    if not haystack or not value:
        return False
    candidates = {haystack}
    try:
        candidates.add(unquote_plus(haystack))
    except Exception:  # pragma: no cover - unquote_plus is total on str
        pass
    variants = _value_variants(value)
    for text in list(candidates):
        candidates.add("".join(text.split()))
    return any(v in text for v in variants for text in candidates)


def find_secrets(text: Optional[str], persona: Persona) -> list[str]:
    """Names of persona secret fields that occur in ``text``."""
    return [name for name, value in persona.secrets().items() if text_contains(text, value)]


@dataclass(frozen=True)
class SessionContext:
    lure_subject: str
    lure_body_text: str
    lure_from: str
    target_url: str
    persona: Persona = field(default_factory=Persona)
    time_budget_s: float = 60.0

    def __post_init__(self):
        if not self.time_budget_s > 0:
            raise ValueError("time_budget_s must be positive")

    def to_dict(self) -> dict:
        return {
            "lure_subject": self.lure_subject,
            "lure_body_text": self.lure_body_text,
            "lure_from": self.lure_from,
            "target_url": self.target_url,
            "persona": self.persona.to_dict(),
            "time_budget_s": fmt_time(self.time_budget_s),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "SessionContext":
        return cls(
            lure_subject=data["lure_subject"],
            lure_body_text=data["lure_body_text"],
            lure_from=data["lure_from"],
            target_url=data["target_url"],
            persona=Persona.from_dict(data["persona"]),
            time_budget_s=float(data.get("time_budget_s", 60.0)),
        )


# -- stream records ----------------------------------------------------------

@dataclass(frozen=True)
class NetworkRecord:
    seq: int
    started_at: float
    duration_ms: float
    method: str
    url: str
    host: str
    status: int
    request_headers: tuple = ()
    response_headers: tuple = ()
    request_body: Optional[str] = None
    request_body_truncated: bool = False
    request_body_ref: Optional[str] = None
    response_body_ref: Optional[str] = None
    mime_type: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "seq": self.seq,
            "started_at": fmt_time(self.started_at),
            "duration_ms": f"{self.duration_ms:.3f}",
            "method": self.method,
            "url": self.url,
            "host": self.host,
            "status": self.status,
            "request_headers": [list(h) for h in self.request_headers],
            "response_headers": [list(h) for h in self.response_headers],
            "request_body": self.request_body,
            "request_body_truncated": self.request_body_truncated,
            "request_body_ref": self.request_body_ref,
            "response_body_ref": self.response_body_ref,
            "mime_type": self.mime_type,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "NetworkRecord":
        return cls(
            seq=int(data["seq"]),
            started_at=float(data["started_at"]),
            duration_ms=float(data["duration_ms"]),
            method=data["method"],
            url=data["url"],
            host=data["host"],
            status=int(data["status"]),
            request_headers=tuple(tuple(h) for h in data.get("request_headers", ())),
            response_headers=tuple(tuple(h) for h in data.get("response_headers", ())),
            request_body=data.get("request_body"),
            request_body_truncated=bool(data.get("request_body_truncated", False)),
            request_body_ref=data.get("request_body_ref"),
            response_body_ref=data.get("response_body_ref"),
            mime_type=data.get("mime_type"),
        )


@dataclass(frozen=True)
class FrameRecord:
    frame_no: int
    t_rel: float
    image_ref: str


@dataclass(frozen=True)
class ActionEvent:
    t_rel: float
    kind: str
    payload: dict = field(default_factory=dict)
    annotation: str = ""

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValueError(f"unknown action kind {self.kind!r}")
        if "\t" in self.annotation or "\n" in self.annotation:
            object.__setattr__(self, "annotation", " ".join(self.annotation.split()))


@dataclass(frozen=True)
class Resource:
    kind: str
    content: bytes
    sha256: str


class ResourceStore:
    """Resources keyed by prefix-addressable string ids."""

    def __init__(self, entries: Optional[Mapping[str, Resource]] = None):
        self._entries: dict[str, Resource] = {}
        self._frozen = False
        for rid, res in (entries or {}).items():
            self.add(rid, res.kind, res.content)

    def add(self, resource_id: str, kind: str, content: bytes) -> Resource:
        if self._frozen:
            raise SealedError("resource store is sealed")
        if not _RESOURCE_ID.fullmatch(resource_id):
            raise ValueError(f"invalid resource id {resource_id!r}")
        if resource_id in self._entries:
            raise ValueError(f"duplicate resource id {resource_id!r}")
        if kind not in RESOURCE_KINDS:
            raise ValueError(f"unknown resource kind {kind!r}")
        res = Resource(kind, bytes(content), sha256_hex(bytes(content)))
        self._entries[resource_id] = res
        return res

    def freeze(self) -> None:
        self._frozen = True

    @property
    def frozen(self) -> bool:
        return self._frozen

    def get(self, resource_id: str) -> Resource:
        try:
            return self._entries[resource_id]
        except KeyError:
            raise MissingResourceError(resource_id) from None

    def ids(self) -> list[str]:
        return sorted(self._entries)

    def with_prefix(self, prefix: str) -> list[str]:
        return [rid for rid in self.ids() if rid.startswith(prefix)]

    def items(self) -> Iterator[tuple[str, Resource]]:
        for rid in self.ids():
            yield rid, self._entries[rid]

    def __contains__(self, resource_id) -> bool:
        return resource_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ResourceStore):
            return NotImplemented
        return self._entries == other._entries

    def __repr__(self) -> str:
        return f"ResourceStore({len(self)} entries)"


# -- the bundle --------------------------------------------------------------

class EvidenceBundle:
    """One captured session. Becomes read-only once :func:`seal` runs."""

    _slots = (
        "bundle_id", "epoch_t0", "network", "frames", "actions",
        "resources", "context", "session_end", "manifest_hash",
    )

    def __init__(self, bundle_id, epoch_t0, network, frames, actions, resources, context,
                 session_end, manifest_hash=None):
        object.__setattr__(self, "_sealed", False)
        self.bundle_id = str(bundle_id)
        self.epoch_t0 = float(epoch_t0)
        self.network = tuple(network)
        self.frames = tuple(frames)
        self.actions = tuple(actions)
        self.resources = resources
        self.context = context
        self.session_end = float(session_end)
        self.manifest_hash = manifest_hash

    def __setattr__(self, name, value):
        if self._sealed:
            raise SealedError(f"bundle {self.bundle_id} is sealed; cannot set {name}")
        object.__setattr__(self, name, value)

    @property
    def sealed(self) -> bool:
        return self._sealed

    def __eq__(self, other) -> bool:
        if not isinstance(other, EvidenceBundle):
            return NotImplemented
        return all(getattr(self, s) == getattr(other, s) for s in self._slots)

    def __repr__(self) -> str:
        state = "sealed" if self._sealed else "open"
        return (f"EvidenceBundle({self.bundle_id!r}, {len(self.network)} net, "
                f"{len(self.frames)} frames, {len(self.actions)} actions, {state})")

    def record(self, seq: int) -> Optional[NetworkRecord]:
        for rec in self.network:
            if rec.seq == seq:
                return rec
        return None

    def rel(self, t_abs: float) -> float:
        return from_micros(to_micros(t_abs) - to_micros(self.epoch_t0))

    @property
    def outcome(self) -> str:
        """Operator-declared session outcome (``completed`` unless noted)."""
        for ev in reversed(self.actions):
            if ev.kind == "note" and "outcome" in ev.payload:
                return str(ev.payload["outcome"])
        return "completed"


def assemble_bundle(bundle_id: str, network: Iterable[NetworkRecord], frames: Iterable[FrameRecord],
                    actions: Iterable[ActionEvent], resources: ResourceStore, context: SessionContext,
                    *, epoch_t0: Optional[float] = None, session_end: Optional[float] = None) -> EvidenceBundle:
    """Build an unsealed bundle and check the stream ordering invariants."""
    network = tuple(network)
    frames = tuple(frames)
    actions = tuple(actions)
    if epoch_t0 is None:
        from .timeline import establish_epoch

        epoch_t0 = establish_epoch(network)
    t0 = to_micros(epoch_t0)

    prev = None
    for rec in network:
        us = to_micros(rec.started_at)
        if us < t0:
            raise IntegrityError(f"network record {rec.seq} starts before the epoch")
        if prev is not None and us < prev:
            raise IntegrityError(f"network record {rec.seq} is out of order")
        prev = us
    if len({rec.seq for rec in network}) != len(network):
        raise IntegrityError("duplicate network seq")
    _check_frames(frames)
    for a, b in zip(actions, actions[1:]):
        if to_micros(b.t_rel) < to_micros(a.t_rel):
            raise IntegrityError("action events are not ordered by t_rel")

    latest = 0
    if network:
        latest = max(latest, to_micros(network[-1].started_at) - t0)
    if frames:
        latest = max(latest, to_micros(frames[-1].t_rel))
    if actions:
        latest = max(latest, to_micros(actions[-1].t_rel))
    if session_end is None:
        end_us = latest
    else:
        end_us = to_micros(session_end)
        if end_us < latest:
            raise IntegrityError("session_end precedes the last recorded event")
    return EvidenceBundle(bundle_id, from_micros(t0), network, frames, actions, resources, context,
                          from_micros(end_us))


def _check_frames(frames):
    prev = None
    for fr in frames:
        if to_micros(fr.t_rel) < 0:
            raise MonotonicityError(fr.frame_no, f"frame {fr.frame_no} has negative t_rel")
        if prev is not None and (fr.frame_no <= prev.frame_no or to_micros(fr.t_rel) <= to_micros(prev.t_rel)):
            raise MonotonicityError(fr.frame_no)
        prev = fr


# -- ingestion ---------------------------------------------------------------

_RFC3339 = re.compile(
    r"(\d{4})-(\d{2})-(\d{2})[Tt ](\d{2}):(\d{2}):(\d{2})(\.\d+)?"
    r"(?:([Zz])|([+-])(\d{2}):?(\d{2}))?"
)


def parse_rfc3339(text: str) -> float:
    """Seconds since the Unix epoch, rounded to microseconds. Naive times are UTC."""
    m = _RFC3339.fullmatch(text.strip())
    if not m:
        raise ValueError(f"not an RFC 3339 timestamp: {text!r}")
    y, mo, d, h, mi, s = (int(g) for g in m.groups()[:6])
    whole = calendar.timegm((y, mo, d, h, mi, s, 0, 0, 0))
    if m.group(9):
        offset = (int(m.group(10)) * 60 + int(m.group(11))) * 60
        whole -= offset if m.group(9) == "+" else -offset
    frac = Decimal(m.group(7) or "0")
    return float(round(Decimal(whole) + frac, 6))


def _resource_kind(mime: Optional[str]) -> str:
    mime = (mime or "").lower()
    if "html" in mime:
        return "html"
    if "javascript" in mime or "ecmascript" in mime:
        return "script"
    if mime.startswith("image/"):
        return "image"
    return "other"


def cap_text(text: str, cap: int = BODY_CAP) -> tuple[str, bool]:
    """Cut ``text`` so its UTF-8 encoding fits in ``cap`` bytes."""
    raw = text.encode("utf-8")
    if len(raw) <= cap:
        return text, False
    return raw[:cap].decode("utf-8", errors="ignore"), True


def _headers(items) -> tuple:
    out = []
    for h in items or ():
        out.append((str(h.get("name", "")), str(h.get("value", ""))))
    return tuple(out)


def ingest_har(document, *, body_cap: int = BODY_CAP,
               resources: Optional[ResourceStore] = None) -> list[NetworkRecord]:
    """Parse an HTTP archive into network records ordered by start time.

    When ``resources`` is given, response bodies and over-cap request bodies
    are stored there and referenced from the records.
    """
    if isinstance(document, bytes):
        raw = document
        try:
            document = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(f"HAR is not UTF-8: {exc.reason}", offset=exc.start) from None
    try:
        data = json.loads(document)
    except json.JSONDecodeError as exc:
        offset = len(document[: exc.pos].encode("utf-8"))
        raise ParseError(f"malformed HAR: {exc.msg}", offset=offset) from None
    log = data.get("log") if isinstance(data, dict) else None
    entries = log.get("entries") if isinstance(log, dict) else None
    if not isinstance(entries, list):
        raise ParseError("HAR document has no log.entries list", offset=0)

    staged = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or not entry.get("startedDateTime"):
            warnings.warn(SkippedEntry(f"entry {i}: missing startedDateTime"), stacklevel=2)
            continue
        try:
            started = parse_rfc3339(entry["startedDateTime"])
        except ValueError as exc:
            warnings.warn(SkippedEntry(f"entry {i}: {exc}"), stacklevel=2)
            continue
        request = entry.get("request") or {}
        response = entry.get("response") or {}
        url = request.get("url")
        if not url:
            warnings.warn(SkippedEntry(f"entry {i}: request has no url"), stacklevel=2)
            continue
        staged.append((started, i, entry, request, response))
    staged.sort(key=lambda item: (to_micros(item[0]), item[1]))

    records = []
    for seq, (started, _, entry, request, response) in enumerate(staged):
        post = request.get("postData") or {}
        body = post.get("text")
        truncated = False
        request_ref = None
        if body is not None:
            full = body
            body, truncated = cap_text(body, body_cap)
            if truncated and resources is not None:
                request_ref = f"net-{seq:04d}-request"
                resources.add(request_ref, "other", full.encode("utf-8"))
        content = response.get("content") or {}
        mime = content.get("mimeType") or None
        response_ref = None
        text = content.get("text")
        if text is not None and resources is not None:
            if content.get("encoding") == "base64":
                blob = base64.b64decode(text)
            else:
                blob = text.encode("utf-8")
            response_ref = f"net-{seq:04d}-response"
            resources.add(response_ref, _resource_kind(mime), blob)
        url = request["url"]
        records.append(NetworkRecord(
            seq=seq,
            started_at=started,
            duration_ms=max(0.0, float(entry.get("time") or 0.0)),
            method=str(request.get("method", "GET")).upper(),
            url=url,
            host=host_of(url),
            status=int(response.get("status") or 0),
            request_headers=_headers(request.get("headers")),
            response_headers=_headers(response.get("headers")),
            request_body=body,
            request_body_truncated=truncated,
            request_body_ref=request_ref,
            response_body_ref=response_ref,
            mime_type=mime,
        ))
    return records


def ingest_frames(manifest: str, resources: Optional[ResourceStore] = None) -> list[FrameRecord]:
    """Parse a ``frame_no<TAB>t_rel<TAB>image_ref`` manifest.

    Frames must already be in recording order; nothing is re-sorted.
    """
    frames = []
    for lineno, line in enumerate(manifest.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"line {lineno}: expected 3 tab-separated fields", line=lineno)
        try:
            frame = FrameRecord(int(parts[0]), float(parts[1]), parts[2])
        except ValueError as exc:
            raise ParseError(f"line {lineno}: {exc}", line=lineno) from None
        if resources is not None and frame.image_ref not in resources:
            raise MissingResourceError(frame.image_ref)
        frames.append(frame)
    _check_frames(frames)
    return frames


def _check_payload(kind: str, payload: dict, lineno: int) -> None:
    def need(key, types):
        if not isinstance(payload.get(key), types) or isinstance(payload.get(key), bool):
            raise ParseError(f"line {lineno}: {kind} payload needs {key!r}", line=lineno)

    if kind == "click":
        need("x", (int, float))
        need("y", (int, float))
    elif kind == "type":
        need("target", str)
        need("text", str)
        if not payload["text"]:
            raise ParseError(f"line {lineno}: type payload text is empty", line=lineno)
    elif kind == "navigate":
        need("url", str)


def ingest_actions(log: str) -> list[ActionEvent]:
    """Parse a ``t_rel<TAB>kind<TAB>payload<TAB>annotation`` action log.

    Payloads are JSON objects. Unknown kinds become ``note`` events that
    carry the raw line.
    """
    events = []
    for lineno, line in enumerate(log.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ParseError(f"line {lineno}: expected 4 tab-separated fields", line=lineno)
        t_text, kind, payload_text = parts[:3]
        annotation = parts[3] if len(parts) == 4 else ""
        try:
            t_rel = float(t_text)
        except ValueError:
            raise ParseError(f"line {lineno}: bad t_rel {t_text!r}", line=lineno) from None
        if not t_rel >= 0 or t_rel == float("inf"):
            raise ParseError(f"line {lineno}: t_rel must be finite and >= 0", line=lineno)
        if kind not in ACTION_KINDS:
            events.append(ActionEvent(t_rel, "note", {"raw": line}, annotation))
            continue
        try:
            payload = json.loads(payload_text) if payload_text.strip() else {}
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {lineno}: payload is not JSON ({exc.msg})", line=lineno) from None
        if not isinstance(payload, dict):
            raise ParseError(f"line {lineno}: payload must be an object", line=lineno)
        _check_payload(kind, payload, lineno)
        events.append(ActionEvent(t_rel, kind, payload, annotation))
    events.sort(key=lambda ev: to_micros(ev.t_rel))
    return events


# -- canonical member serialization -----------------------------------------

def frames_text(frames: Iterable[FrameRecord]) -> str:
    return "".join(f"{fr.frame_no}\t{fmt_time(fr.t_rel)}\t{fr.image_ref}\n" for fr in frames)


def actions_text(actions: Iterable[ActionEvent]) -> str:
    lines = []
    for ev in actions:
        payload = canonical_json(ev.payload).decode("utf-8")
        lines.append(f"{fmt_time(ev.t_rel)}\t{ev.kind}\t{payload}\t{ev.annotation}\n")
    return "".join(lines)


def member_bytes(bundle: EvidenceBundle) -> dict[str, bytes]:
    """Byte form of each stream member, as hashed and as written to disk."""
    return {
        "network": canonical_json([rec.to_dict() for rec in bundle.network]),
        "frames": frames_text(bundle.frames).encode("utf-8"),
        "actions": actions_text(bundle.actions).encode("utf-8"),
        "context": canonical_json(bundle.context.to_dict()),
    }


def manifest_document(bundle: EvidenceBundle) -> dict:
    members = member_bytes(bundle)
    return {
        "format": BUNDLE_FORMAT,
        "bundle_id": bundle.bundle_id,
        "epoch_t0": fmt_time(bundle.epoch_t0),
        "session_end": fmt_time(bundle.session_end),
        "members": {name: sha256_hex(data) for name, data in sorted(members.items())},
        "resources": {
            rid: {"kind": res.kind, "sha256": sha256_hex(res.content), "size": len(res.content)}
            for rid, res in bundle.resources.items()
        },
    }


def compute_digest(bundle: EvidenceBundle) -> str:
    return sha256_hex(canonical_json(manifest_document(bundle)))


def dangling_refs(bundle: EvidenceBundle) -> list[str]:
    refs = [fr.image_ref for fr in bundle.frames]
    for rec in bundle.network:
        refs.extend(r for r in (rec.response_body_ref, rec.request_body_ref) if r)
    return [r for r in refs if r not in bundle.resources]


_seal_lock = threading.Lock()


def seal(bundle: EvidenceBundle) -> str:
    """Hash the bundle's canonical manifest and make it read-only.

    Returns the hex SHA-256 digest. Sealing an already sealed bundle
    recomputes and returns the same digest.
    """
    missing = dangling_refs(bundle)
    if missing:
        raise IntegrityError(f"dangling resource references: {sorted(set(missing))}")
    digest = compute_digest(bundle)
    with _seal_lock:
        if bundle.sealed:
            if digest != bundle.manifest_hash:
                raise IntegrityError("sealed bundle no longer matches its digest")
            return digest
        bundle.resources.freeze()
        object.__setattr__(bundle, "manifest_hash", digest)
        object.__setattr__(bundle, "_sealed", True)
    return digest


def _digest_hex(digest) -> str:
    if isinstance(digest, (bytes, bytearray)):
        return bytes(digest).hex()
    return str(digest).lower()


def verify(bundle: EvidenceBundle, digest) -> bool:
    try:
        return compute_digest(bundle) == _digest_hex(digest)
    except Exception:
        return False


# -- whole-bundle canonical document ----------------------------------------

def serialize_bundle(bundle: EvidenceBundle) -> bytes:
    """Single canonical byte document holding every member of the bundle."""
    doc = {
        "manifest": manifest_document(bundle),
        "network": [rec.to_dict() for rec in bundle.network],
        "frames": [[fr.frame_no, fmt_time(fr.t_rel), fr.image_ref] for fr in bundle.frames],
        "actions": [[fmt_time(ev.t_rel), ev.kind, ev.payload, ev.annotation] for ev in bundle.actions],
        "context": bundle.context.to_dict(),
        "resources": {
            rid: {"kind": res.kind, "content": base64.b64encode(res.content).decode("ascii")}
            for rid, res in bundle.resources.items()
        },
    }
    return canonical_json(doc)


def parse_bundle(data: bytes) -> EvidenceBundle:
    """Inverse of :func:`serialize_bundle`; rejects any non-canonical input.

    The result is unsealed; the embedded manifest must agree with the content.
    """
    try:
        doc = json.loads(data.decode("utf-8"))
        store = ResourceStore()
        for rid, entry in doc["resources"].items():
            store.add(rid, entry["kind"], base64.b64decode(entry["content"], validate=True))
        manifest = doc["manifest"]
        bundle = EvidenceBundle(
            manifest["bundle_id"],
            float(manifest["epoch_t0"]),
            [NetworkRecord.from_dict(r) for r in doc["network"]],
            [FrameRecord(int(n), float(t), ref) for n, t, ref in doc["frames"]],
            [ActionEvent(float(t), kind, payload, ann) for t, kind, payload, ann in doc["actions"]],
            store,
            SessionContext.from_dict(doc["context"]),
            float(manifest["session_end"]),
        )
    except ParseError:
        raise
    except Exception as exc:
        raise ParseError(f"not a bundle document: {exc}") from None
    if serialize_bundle(bundle) != bytes(data):
        raise ParseError("bundle document is not in canonical form")
    if manifest_document(bundle) != manifest:
        raise IntegrityError("embedded manifest does not match bundle content")
    return bundle


# -- on-disk layout ----------------------------------------------------------

MEMBER_FILES = ("network", "frames", "actions", "context")


def save_bundle(bundle: EvidenceBundle, directory) -> Path:
    """Write a sealed bundle as ``manifest``, members, ``resources/`` and ``seal``."""
    if not bundle.sealed:
        raise IntegrityError("only sealed bundles can be written")
    root = Path(directory)
    (root / "resources").mkdir(parents=True, exist_ok=True)
    for name, data in member_bytes(bundle).items():
        (root / name).write_bytes(data)
    for rid, res in bundle.resources.items():
        (root / "resources" / rid).write_bytes(res.content)
    (root / "manifest").write_bytes(canonical_json(manifest_document(bundle)))
    (root / "seal").write_text(bundle.manifest_hash + "\n", encoding="ascii")
    return root


def load_bundle(directory) -> EvidenceBundle:
    """Read a bundle directory, check every file against the seal, return it sealed."""
    root = Path(directory)
    try:
        expected = (root / "seal").read_text(encoding="ascii").strip()
        manifest_raw = (root / "manifest").read_bytes()
    except (OSError, UnicodeDecodeError) as exc:
        raise IntegrityError(f"unreadable bundle at {root}: {exc}") from None
    if sha256_hex(manifest_raw) != expected:
        raise IntegrityError("manifest does not match seal digest")
    try:
        manifest = json.loads(manifest_raw.decode("utf-8"))
        members = {}
        for name in MEMBER_FILES:
            data = (root / name).read_bytes()
            if sha256_hex(data) != manifest["members"][name]:
                raise IntegrityError(f"member {name!r} does not match manifest")
            members[name] = data
        store = ResourceStore()
        for rid, meta in sorted(manifest["resources"].items()):
            content = (root / "resources" / rid).read_bytes()
            if sha256_hex(content) != meta["sha256"]:
                raise IntegrityError(f"resource {rid!r} does not match manifest")
            store.add(rid, meta["kind"], content)
        network = [NetworkRecord.from_dict(r) for r in json.loads(members["network"])]
        frames = ingest_frames(members["frames"].decode("utf-8"))
        actions = _parse_stored_actions(members["actions"].decode("utf-8"))
        context = SessionContext.from_dict(json.loads(members["context"]))
        bundle = EvidenceBundle(manifest["bundle_id"], float(manifest["epoch_t0"]), network, frames,
                                actions, store, context, float(manifest["session_end"]))
    except IntegrityError:
        raise
    except Exception as exc:
        raise IntegrityError(f"corrupt bundle at {root}: {exc}") from None
    digest = seal(bundle)
    if digest != expected:
        raise IntegrityError("bundle content does not reproduce the seal digest")
    return bundle


def _parse_stored_actions(text: str) -> list[ActionEvent]:
    # stored logs are canonical; unknown kinds were already folded into notes
    events = []
    for line in text.splitlines():
        t, kind, payload, annotation = line.split("\t")
        events.append(ActionEvent(float(t), kind, json.loads(payload), annotation))
    return events


def verify_directory(directory) -> bool:
    try:
        load_bundle(directory)
    except IntegrityError:
        return False
    return True


__all__ = [
    "ActionEvent", "BODY_CAP", "EvidenceBundle", "FrameRecord", "NetworkRecord", "Persona",
    "Resource", "ResourceStore", "SessionContext", "assemble_bundle", "compute_digest",
    "ingest_actions", "ingest_frames", "ingest_har", "load_bundle", "parse_bundle", "save_bundle",
    "seal", "serialize_bundle", "verify", "verify_directory",
]
