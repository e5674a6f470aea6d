"""Deterministic rule-based adjudication backend.

Each detector is a pure predicate over session evidence. Detectors read
evidence through an :class:`EvidenceView`, which is either backed directly
by a bundle or by the evidence tool protocol, so the same rules run as an
in-process checker and as a protocol-bound adjudication backend.
"""
from __future__ import annotations

import base64
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from ipaddress import ip_address
from typing import Callable, Optional

from .bundle import (
    ActionEvent,
    EvidenceBundle,
    NetworkRecord,
    SessionContext,
    find_secrets,
    host_of,
    short_time,
    text_contains,
    to_micros,
)
from .checklist import EvidenceItem, TechniqueVerdict, technique_index
from .errors import UnknownTechniqueError
from .evidence_api import CONTENT_CAP

ENTROPY_THRESHOLD = 5.2
BODY_PREFIX = "net-"  # ingestion and the simulator store bodies as net-<seq>-...
EVAL_DECODED = re.compile(
    r"(?:\beval|\bnew\s+Function|\bFunction)\s*\(\s*(?:window\.)?"
    r"(?:atob|unescape|decodeURIComponent|decodeURI|String\.fromCharCode)\s*\(",
    re.IGNORECASE,
)
EXECUTABLE_MIMES = frozenset({
    "application/x-msdownload",
    "application/x-msdos-program",
    "application/x-dosexec",
    "application/x-executable",
    "application/vnd.microsoft.portable-executable",
    "application/x-msi",
    "application/x-ms-installer",
    "application/vnd.android.package-archive",
    "application/java-archive",
    "application/x-apple-diskimage",
    "application/x-sh",
    "application/hta",
})

# Public-suffix snapshot: enough for registrable-domain comparison offline.
PUBLIC_SUFFIXES = frozenset("""
com org net edu gov mil int io co dev app top xyz info biz live cc me us uk de fr nl ru cn jp kr br in
au ca es it pl se ch be at cz eu online site shop store club vip icu cyou buzz link click work example
co.uk org.uk ac.uk gov.uk me.uk com.au net.au org.au com.br net.br com.cn co.jp ne.jp co.kr or.kr
co.in com.mx com.tr com.sg com.hk co.za co.nz
r2.dev pages.dev workers.dev github.io gitlab.io netlify.app vercel.app herokuapp.com web.app
firebaseapp.com blogspot.com azurewebsites.net cloudfront.net s3.amazonaws.com appspot.com
ngrok.io ngrok-free.app glitch.me onrender.com fly.dev replit.app weebly.com wixsite.com
""".split())


def registrable_domain(host: str) -> str:
    """The registrable domain (public suffix plus one label) of ``host``."""
    host = (host or "").strip(".").lower()
    if not host:
        return ""
    try:
        ip_address(host)
        return host
    except ValueError:
        pass
    labels = host.split(".")
    for i in range(len(labels)):
        if ".".join(labels[i:]) in PUBLIC_SUFFIXES:
            return ".".join(labels[max(i - 1, 0):])
    return ".".join(labels[-2:])


def email_domain(address: str) -> str:
    address = (address or "").strip()
    if "<" in address and ">" in address:
        address = address[address.index("<") + 1:address.index(">")]
    _, at, domain = address.rpartition("@")
    return domain.strip().lower() if at else ""


def shannon_entropy(data: bytes) -> float:
    """Bits per byte of ``data``; 0 for empty input."""
    if not data:
        return 0.0
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in Counter(data).values())


# -- evidence views -----------------------------------------------------------

class EvidenceView:
    """Evidence accessors the detectors rely on."""

    context: SessionContext
    actions: tuple
    session_end: float

    @property
    def network(self) -> list:
        raise NotImplementedError

    def rel(self, rec: NetworkRecord) -> float:
        raise NotImplementedError

    def resource(self, rid: str) -> Optional[tuple[str, bytes]]:
        raise NotImplementedError

    def script_resources(self) -> list[tuple[str, bytes]]:
        raise NotImplementedError


class BundleView(EvidenceView):
    def __init__(self, bundle: EvidenceBundle):
        self.bundle = bundle
        self.context = bundle.context
        self.actions = bundle.actions
        self.session_end = bundle.session_end

    @property
    def network(self):
        return list(self.bundle.network)

    def rel(self, rec):
        return self.bundle.rel(rec.started_at)

    def resource(self, rid):
        if rid not in self.bundle.resources:
            return None
        res = self.bundle.resources.get(rid)
        return res.kind, res.content[:CONTENT_CAP]

    def script_resources(self):
        return [(rid, res.content[:CONTENT_CAP]) for rid, res in self.bundle.resources.items()
                if res.kind == "script"]


class ToolView(EvidenceView):
    """Evidence pulled lazily through a tool client (see ``evidence_api``)."""

    def __init__(self, client, context: SessionContext, actions, session_end: float):
        self.client = client
        self.context = context
        self.actions = tuple(actions)
        self.session_end = session_end
        self._network = None
        self._rel = {}
        self._resources = {}
        self._prefetched = set()

    @property
    def network(self):
        if self._network is None:
            records, cursor = [], 0
            while cursor is not None:
                page = self.client.call("get_session", cursor=cursor)
                for view in page["records"]:
                    rec = NetworkRecord.from_dict(view)
                    self._rel[rec.seq] = float(view["t_rel"])
                    records.append(rec)
                cursor = page["next_cursor"]
            self._network = records
        return self._network

    def rel(self, rec):
        self.network
        return self._rel[rec.seq]

    def _store(self, item) -> None:
        if item["encoding"] == "base64":
            content = base64.b64decode(item["content"])
        else:
            content = item["content"].encode("utf-8")
        self._resources[item["resource_id"]] = (item["kind"], content)

    def _prefetch(self, prefix: str) -> None:
        """Page through every resource under ``prefix``; cheaper than one call per id."""
        if prefix in self._prefetched:
            return
        self._prefetched.add(prefix)
        cursor = 0
        while cursor is not None:
            page = self.client.call("retrieve_resource", prefix=prefix, cursor=cursor)
            for item in page["items"]:
                self._store(item)
            cursor = page["next_cursor"]

    def resource(self, rid):
        if rid.startswith(BODY_PREFIX):
            self._prefetch(BODY_PREFIX)
        if rid not in self._resources:
            self._resources[rid] = None
            page = self.client.call("retrieve_resource", prefix=rid)
            for item in page["items"]:
                if item["resource_id"] == rid:
                    self._store(item)
        return self._resources[rid]

    def script_resources(self):
        out = []
        seen = set()
        for rec in self.network:
            rid = rec.response_body_ref
            if rid and rid not in seen:
                seen.add(rid)
                found = self.resource(rid)
                if found and found[0] == "script":
                    out.append((rid, found[1]))
        return sorted(out)


def as_view(evidence) -> EvidenceView:
    return evidence if isinstance(evidence, EvidenceView) else BundleView(evidence)


def _frame(t: float) -> str:
    return f"frame:{short_time(t)}"


def _verdict(technique_id, status, confidence, items) -> TechniqueVerdict:
    return TechniqueVerdict(technique_id, status, confidence, tuple(items))


# -- detectors ----------------------------------------------------------------

def _typed(view: EvidenceView) -> list[ActionEvent]:
    return [ev for ev in view.actions if ev.kind == "type"]


def _secret_typing(view: EvidenceView) -> list[tuple[ActionEvent, list[str]]]:
    persona = view.context.persona
    return [(ev, hits) for ev in _typed(view)
            if (hits := find_secrets(ev.payload.get("text"), persona))]


def _form_resource(view: EvidenceView, t: float) -> Optional[str]:
    """Latest HTML resource fetched at or before ``t`` that holds a form."""
    limit = to_micros(t)
    for rec in reversed(view.network):
        rid = rec.response_body_ref
        if not rid or to_micros(view.rel(rec)) > limit:
            continue
        found = view.resource(rid)
        if found and found[0] == "html":
            text = found[1].decode("utf-8", errors="ignore").lower()
            if "<form" in text or "<input" in text:
                return rid
    return None


def detect_input_capture(evidence) -> Optional[TechniqueVerdict]:
    """Persona secret typed into a page field (confirmed) or identifier only (suspicious)."""
    view = as_view(evidence)
    secret_events = _secret_typing(view)
    if secret_events:
        items = []
        for ev, hits in secret_events:
            field_label = ev.payload.get("target", "field")
            items.append(EvidenceItem(
                _frame(ev.t_rel),
                f"persona {' and '.join(h.replace('_', ' ') for h in hits)} typed into {field_label!r}",
                "page collected a secret through a GUI input field",
            ))
        form = _form_resource(view, secret_events[0][0].t_rel)
        if form:
            items.append(EvidenceItem(f"resource:{form}", "HTML form that received the input",
                                      "form markup rendered before the secret was typed"))
        return _verdict("T1056.002", "confirmed", "high", items)

    ids = view.context.persona.identifiers()
    items = []
    for ev in _typed(view):
        hits = [name for name, value in ids.items() if text_contains(ev.payload.get("text"), value)]
        if hits:
            items.append(EvidenceItem(
                _frame(ev.t_rel),
                f"persona {', '.join(h.replace('_', ' ') for h in hits)} typed into "
                f"{ev.payload.get('target', 'field')!r}",
                "page collected personal identifiers without a secret",
            ))
    if items:
        return _verdict("T1056.002", "suspicious", "medium", items)
    return None


def detect_exfiltration(evidence) -> Optional[TechniqueVerdict]:
    """Persona secrets in a request body, cross-host (confirmed) or same-host (suspicious)."""
    view = as_view(evidence)
    persona = view.context.persona
    target_host = host_of(view.context.target_url)
    cross, same = [], []
    for rec in view.network:
        hits = find_secrets(rec.request_body, persona)
        if not hits:
            continue
        what = " and ".join(h.replace("_", " ") for h in hits)
        if rec.host != target_host:
            cross.append(EvidenceItem(f"net:{rec.seq}", f"{rec.method} body carries persona {what}",
                                      "secret sent to a host other than the landing page"))
        else:
            same.append(EvidenceItem(f"net:{rec.seq}", f"{rec.method} body carries persona {what}",
                                     "secret captured by the landing host itself"))
    if cross:
        return _verdict("T1041", "confirmed", "high", cross)
    if same:
        return _verdict("T1041", "suspicious", "medium", same)
    return None


def detect_obfuscation(evidence) -> Optional[TechniqueVerdict]:
    """Script with byte entropy above the threshold or an eval-of-decoded-string pattern."""
    view = as_view(evidence)
    items = []
    for rid, content in view.script_resources():
        entropy = shannon_entropy(content)
        text = content.decode("utf-8", errors="ignore")
        reasons = []
        if entropy > ENTROPY_THRESHOLD:
            reasons.append(f"byte entropy {entropy:.2f} bits/char")
        if EVAL_DECODED.search(text):
            reasons.append("evaluates a decoded string")
        if reasons:
            items.append(EvidenceItem(f"resource:{rid}", "script " + " and ".join(reasons),
                                      "packed or encoded script hides its behaviour"))
    if items:
        return _verdict("T1027", "suspicious", "medium", items)
    return None


def _landing_citation(view: EvidenceView) -> EvidenceItem:
    target = view.context.target_url
    target_host = host_of(target)
    for rec in view.network:
        if rec.host == target_host:
            return EvidenceItem(f"net:{rec.seq}", "landing page request to the lure target",
                                "target host differs from the lure sender's domain")
    return EvidenceItem(_frame(0.0), "session start on the lure target",
                        "target host differs from the lure sender's domain")


def detect_phishing_link(evidence) -> Optional[TechniqueVerdict]:
    """Lure sender and link target on different registrable domains."""
    view = as_view(evidence)
    sender = email_domain(view.context.lure_from)
    target = host_of(view.context.target_url)
    if not sender or not target or registrable_domain(sender) == registrable_domain(target):
        return None
    items = [_landing_citation(view)]
    secret_events = _secret_typing(view)
    if secret_events:
        ev = secret_events[0][0]
        items.append(EvidenceItem(_frame(ev.t_rel), "credentials entered on the linked page",
                                  "the link led to a credential form"))
        return _verdict("T1566.002", "confirmed", "medium", items)
    return _verdict("T1566.002", "suspicious", "medium", items)


def detect_link_execution(evidence) -> Optional[TechniqueVerdict]:
    """A click that is immediately followed by a navigation."""
    view = as_view(evidence)
    steps = [ev for ev in view.actions if ev.kind not in ("note", "scroll")]
    items = []
    for click, nxt in zip(steps, steps[1:]):
        if click.kind != "click" or nxt.kind != "navigate":
            continue
        url = nxt.payload.get("url", "")
        label = click.payload.get("label", "element")
        items.append(EvidenceItem(_frame(nxt.t_rel), f"click on {label!r} navigated the page",
                                  "user action executed a lure link"))
        for rec in view.network:
            if rec.url == url and to_micros(view.rel(rec)) >= to_micros(click.t_rel):
                items.append(EvidenceItem(f"net:{rec.seq}", "request issued by the navigation",
                                          "network side of the link execution"))
                break
    if items:
        return _verdict("T1204.001", "confirmed", "medium", items)
    return None


def detect_executable_response(evidence) -> Optional[TechniqueVerdict]:
    view = as_view(evidence)
    items = []
    for rec in view.network:
        mime = (rec.mime_type or "").split(";")[0].strip().lower()
        if mime in EXECUTABLE_MIMES:
            items.append(EvidenceItem(f"net:{rec.seq}", f"response delivered executable content ({mime})",
                                      "payload delivered to the browser without an install step"))
    if items:
        return _verdict("T1189", "confirmed", "medium", items)
    return None


@dataclass(frozen=True)
class RuleSpec:
    name: str
    detector: Callable


RULES = {
    "input_capture": RuleSpec("input_capture", detect_input_capture),
    "exfiltration": RuleSpec("exfiltration", detect_exfiltration),
    "obfuscation": RuleSpec("obfuscation", detect_obfuscation),
    "phishing_link": RuleSpec("phishing_link", detect_phishing_link),
    "click_navigate": RuleSpec("click_navigate", detect_link_execution),
    "executable_response": RuleSpec("executable_response", detect_executable_response),
}


def dispatch(technique_id: str, evidence, techniques=None) -> TechniqueVerdict:
    """Run the technique's rule; techniques without a rule report not_observed."""
    index = technique_index(techniques)
    if technique_id not in index:
        raise UnknownTechniqueError(technique_id)
    rule = RULES.get(index[technique_id].oracle_rule or "")
    verdict = rule.detector(evidence) if rule else None
    if verdict is None:
        return TechniqueVerdict(technique_id, "not_observed", "low")
    return verdict


class OracleBackend:
    """Adjudicator backend that answers with the rule table.

    It sees the session only through the technique brief (context and action
    log) and the evidence tools.
    """

    identity = "oracle"

    def __init__(self, max_tool_calls: int = 12, techniques=None):
        self.capabilities = {"max_tool_calls": max_tool_calls}
        self.techniques = techniques

    def adjudicate(self, brief, tools) -> str:
        view = ToolView(tools, brief.context, brief.actions, brief.session_end)
        verdict = dispatch(brief.technique.technique_id, view, self.techniques)
        body = verdict.to_dict()
        body.pop("technique_id")
        return json.dumps(body, sort_keys=True)


__all__ = [
    "BundleView", "OracleBackend", "RULES", "ToolView", "detect_exfiltration", "detect_executable_response",
    "detect_input_capture", "detect_link_execution", "detect_obfuscation", "detect_phishing_link",
    "dispatch", "registrable_domain", "shannon_entropy",
]
