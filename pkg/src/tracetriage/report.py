"""Incident reports in a bottom-line-up-front layout with grounded IOCs.

Facts (IOC values, relative timestamps, technique ids) are rendered once
outside the appendices; later mentions refer to the IOC id instead.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import datetime, timezone
from functools import lru_cache
from ipaddress import ip_address
from typing import Optional

from .adjudicator import AdjudicationRun, RemoteConfig, chat_completion
from .bundle import EvidenceBundle, Persona, to_micros, short_time
from .checklist import _data_text, parse_citation, technique_index
from .errors import BackendError
from .oracle import email_domain

SECTIONS = (
    "Executive Summary",
    "Scope & Context",
    "Timeline (UTC)",
    "IOCs",
    "Risk Assessment",
    "Actionable Recommendations",
    "Appendices",
)
REDACTED = "[REDACTED]"
CONFIDENCE_ORDER = {"low": 0, "medium": 1, "high": 2}

REPORT_WRITER_PROMPT = (
    "You are an expert Incident Response Report Writer. Your goal is to turn structured findings into a "
    "polished, actionable report.\n"
    "\n"
    "Critical Style Guidelines:\n"
    "- NO REPETITION: Do not repeat facts across sections.\n"
    '- Action-Oriented: Focus on "what happened" and "what to do next."\n'
    "- Evidence-Based: Cite tool invocation IDs explicitly.\n"
    "\n"
    "Report Template Structure:\n"
    "1. Executive Summary: Verdict (Phishing/Safe), Confidence, Rationale.\n"
    "2. Scope & Context: Assets and accounts involved.\n"
    "3. Timeline (UTC): Ordered list of key events with timestamps.\n"
    "4. IOCs: Domains, IPs, hashes supported by data.\n"
    "5. Risk Assessment: Impact and blast radius.\n"
    '6. Actionable Recommendations: Prioritized "To-Do" checklist.\n'
    "7. Appendices: Evidence Cross-Reference, MITRE ATT&CK Mapping."
)
WRITER_FORMAT_NOTE = (
    "Write Markdown with exactly these level-2 headings in this order: "
    + ", ".join(SECTIONS)
    + ". Use only facts present in the JSON findings; refer to relative times as T+<seconds>s."
)


@dataclass(frozen=True)
class IOC:
    ioc_id: str
    ioc_type: str
    value: str
    citations: tuple = ()


@dataclass(frozen=True)
class TimelineEntry:
    t_rel: float
    t_abs: float
    event: str
    citations: tuple = ()


@dataclass
class IncidentReport:
    bundle_id: str
    executive_summary: dict
    scope_context: list
    timeline: list
    iocs: list
    risk_assessment: list
    recommendations: list
    appendices: dict
    writer: str = "template"
    notes: list = field(default_factory=list)
    document: Optional[str] = None  # remote-written text, already validated
    persona: Persona = field(default_factory=Persona)


# -- IOCs ----------------------------------------------------------------------

def _host_type(host: str) -> str:
    try:
        ip_address(host)
        return "ip"
    except ValueError:
        return "domain"


def _live_verdicts(run: AdjudicationRun):
    return [v for v in run.verdicts if not v.degraded and not v.error]


def extract_iocs(run: AdjudicationRun, bundle: EvidenceBundle) -> list[IOC]:
    """Hosts and URLs of cited network records, hashes of cited resources.

    De-duplicated by (type, value) in first-citation order; URLs carrying a
    persona secret are withheld.
    """
    from .bundle import find_secrets

    found: dict[tuple, list] = {}
    persona = bundle.context.persona
    for v in _live_verdicts(run):
        for item in v.evidence:
            parsed = parse_citation(item.source)
            if parsed is None:
                continue
            scheme, value = parsed
            facts = []
            if scheme == "net" and value.isdigit():
                rec = bundle.record(int(value))
                if rec is None:
                    continue
                if rec.host:
                    facts.append((_host_type(rec.host), rec.host))
                if not find_secrets(rec.url, persona):
                    facts.append(("url", rec.url))
            elif scheme == "resource" and value in bundle.resources:
                facts.append(("hash", bundle.resources.get(value).sha256))
            for key in facts:
                cites = found.setdefault(key, [])
                if item.source not in cites:
                    cites.append(item.source)
    return [IOC(f"IOC-{n}", t, value, tuple(cites)) for n, ((t, value), cites) in enumerate(found.items(), 1)]


# -- template synthesis --------------------------------------------------------

@lru_cache(maxsize=None)
def recommendation_rules() -> dict:
    return json.loads(_data_text("recommendations.v1.json"))


def _utc(t_abs: float) -> str:
    dt = datetime.fromtimestamp(to_micros(t_abs) // 1_000_000, tz=timezone.utc)
    ms = (to_micros(t_abs) % 1_000_000) // 1000
    return dt.strftime("%Y-%m-%dT%H:%M:%S") + f".{ms:03d}Z"


def _rel(t: float) -> str:
    return f"T+{short_time(t)}s"


def _cite_time(source: str, bundle: EvidenceBundle) -> Optional[float]:
    scheme, value = parse_citation(source)
    if scheme == "net":
        rec = bundle.record(int(value))
        return bundle.rel(rec.started_at) if rec else None
    if scheme == "frame":
        return float(value)
    for rec in bundle.network:
        if value in (rec.response_body_ref, rec.request_body_ref):
            return bundle.rel(rec.started_at)
    for fr in bundle.frames:
        if fr.image_ref == value:
            return fr.t_rel
    return None


def _timeline(run, bundle, ioc_ref) -> list[TimelineEntry]:
    events: dict[tuple, dict] = {}
    for v in _live_verdicts(run):
        if v.status == "not_observed":
            continue
        for item in v.evidence:
            t = _cite_time(item.source, bundle)
            if t is None:
                continue
            scheme, value = parse_citation(item.source)
            if scheme == "net":
                rec = bundle.record(int(value))
                target = ioc_ref.get(("url", rec.url)) or ioc_ref.get((_host_type(rec.host), rec.host))
                text = f"{rec.method} request to {target} answered {rec.status}"
            elif scheme == "resource":
                text = f"artifact {ioc_ref[('hash', bundle.resources.get(value).sha256)]} loaded"
            else:
                text = item.observation
            key = (to_micros(t), item.source)
            entry = events.setdefault(key, {"t": t, "text": text, "techniques": []})
            if v.technique_id not in entry["techniques"]:
                entry["techniques"].append(v.technique_id)
    out = []
    for (_, source), e in sorted(events.items()):
        out.append(TimelineEntry(e["t"], bundle.epoch_t0 + e["t"],
                                 f"{e['text']} ({', '.join(e['techniques'])})", (source,)))
    return out


def _verdict_word(run: AdjudicationRun) -> str:
    if run.status == "error":
        return "Inconclusive (Error)"
    if run.status == "blocked":
        return "Inconclusive (Blocked)"
    return "Phishing" if run.final.label == "phishing" else "Safe"


def _confidence(run: AdjudicationRun) -> str:
    if run.status != "completed":
        return "low"
    by_id = {v.technique_id: v for v in run.verdicts}
    if run.final.label == "phishing":
        return max((by_id[d].confidence for d in run.final.drivers), key=CONFIDENCE_ORDER.__getitem__)
    return "high" if all(not v.degraded for v in run.verdicts) else "low"


def _recommendations(run, iocs_by_technique, names) -> list[str]:
    rules = recommendation_rules()
    positive = [v for v in _live_verdicts(run) if v.status != "not_observed"]
    positive.sort(key=lambda v: (v.status != "confirmed", -CONFIDENCE_ORDER[v.confidence], v.technique_id))
    out = []
    if run.status == "blocked":
        out.append("Re-run the URL with a different interaction path; an interaction gate blocked the session.")
    for v in positive:
        refs = iocs_by_technique.get(v.technique_id, {})
        fills = {
            "domains": ", ".join(refs.get("domain", []) + refs.get("ip", [])),
            "urls": ", ".join(refs.get("url", [])),
            "hashes": ", ".join(refs.get("hash", [])),
            "technique": v.technique_id,
        }
        for template in rules["techniques"].get(v.technique_id, rules["default"]):
            needed = re.findall(r"\{(\w+)\}", template)
            if any(not fills.get(k) for k in needed):
                continue
            line = template.format(**fills)
            if line not in out:
                out.append(line)
    if not out:
        out.extend(rules["benign"])
    return out


RISK_LINES = {
    "T1041": "Impact: credentials entered on the page leave the site for a separate collection endpoint.",
    "T1056.002": "Impact: the page collects personal or account data through its own input fields.",
    "T1027": "Impact: obfuscated script hides its behaviour from static inspection.",
    "T1189": "Impact: executable content reaches the browser without an install step.",
}


def _risk(run, bundle, names) -> list[str]:
    positive = {v.technique_id for v in _live_verdicts(run) if v.status != "not_observed"}
    lines = [RISK_LINES[t] for t in sorted(positive) if t in RISK_LINES]
    if positive & {"T1566.002", "T1204.001"}:
        lines.append(f'Blast radius: every recipient of the lure "{bundle.context.lure_subject}" who follows its link.')
    if not positive:
        lines.append("Impact: no adversarial behaviour was observed in this session.")
    if run.status == "blocked":
        lines.append("Coverage: the session ended at an interaction gate, so post-gate behaviour is unobserved.")
    degraded = [v.technique_id for v in run.verdicts if v.degraded]
    if degraded:
        lines.append(f"Coverage gap: {', '.join(degraded)} could not be adjudicated and count as not observed.")
    return lines


def synthesize(run: AdjudicationRun, bundle: EvidenceBundle, writer="template", *,
               remote_config: Optional[RemoteConfig] = None) -> IncidentReport:
    """Build the report; ``writer="remote"`` asks a chat endpoint and validates its reply."""
    report = _template(run, bundle)
    if writer == "template":
        return report
    if writer != "remote":
        raise ValueError(f"unknown writer {writer!r}")
    if remote_config is None:
        report.notes.append("remote writer not configured; template rendering used")
        return report
    facts = report_facts(report, run)
    try:
        reply = chat_completion(remote_config, [
            {"role": "system", "content": REPORT_WRITER_PROMPT},
            {"role": "user", "content": WRITER_FORMAT_NOTE + "\n\n" + json.dumps(facts, indent=2, sort_keys=True)},
        ])
    except BackendError as exc:
        report.notes.append(f"remote writer unreachable ({exc}); template rendering used")
        return report
    text = reply["message"].get("content") or ""
    problems = check_document(text, run, bundle)
    if problems:
        # Categories only: echoing the offending tokens would put them in the report.
        kinds = sorted({" ".join(p.split()[:2]) for p in problems})
        report.notes.append(f"remote writer output rejected ({len(problems)} problems: {', '.join(kinds)}); "
                            "template rendering used")
        return report
    report.writer = "remote"
    report.document = text
    return report


def _template(run: AdjudicationRun, bundle: EvidenceBundle) -> IncidentReport:
    names = {tid: t.name for tid, t in technique_index().items()}
    iocs = extract_iocs(run, bundle)
    ioc_ref = {(i.ioc_type, i.value): i.ioc_id for i in iocs}
    by_source: dict[str, list] = {}
    for i in iocs:
        for c in i.citations:
            by_source.setdefault(c, []).append(i)
    iocs_by_technique: dict[str, dict] = {}
    for v in _live_verdicts(run):
        bucket = iocs_by_technique.setdefault(v.technique_id, {})
        for item in v.evidence:
            for i in by_source.get(item.source, []):
                ids = bucket.setdefault(i.ioc_type, [])
                if i.ioc_id not in ids:
                    ids.append(i.ioc_id)

    verdict_of = {v.technique_id: v for v in run.verdicts}
    if run.final.drivers:
        rationale = "Triggered by " + "; ".join(
            f"{d} {names.get(d, '')} ({verdict_of[d].status}, {verdict_of[d].confidence})"
            for d in run.final.drivers) + f" under the {run.final.policy} policy."
    else:
        rationale = f"No technique in the {run.profile} profile met the {run.final.policy} policy."
    if run.status == "blocked":
        rationale += " The session was blocked before the page revealed its payload."
    if run.errors:
        rationale += f" Backend errors on {', '.join(run.errors)}."

    ctx = bundle.context
    target_ref = ioc_ref.get(("url", ctx.target_url))
    scope = [
        f"Bundle: {bundle.bundle_id} (digest {bundle.manifest_hash})",
        f'Lure: "{ctx.lure_subject}" from {ctx.lure_from}',
        f"Entry point: {target_ref or ctx.target_url}",
        f"Account exercised: synthetic persona {ctx.persona.username} ({ctx.persona.full_name})",
        f"Session: {_rel(0.0)} to {_rel(bundle.session_end)}, outcome {bundle.outcome}, "
        f"{len(bundle.network)} requests, {len(bundle.frames)} frames",
        f"Checklist: {run.profile} profile, {len(run.verdicts)} techniques, backend {run.backend}",
    ]

    tool_ids: dict[str, list] = {}
    for entry in run.tool_call_log:
        tool_ids.setdefault(entry.technique_id, []).append(entry.request_id)
    cross_ref = []
    for v in run.verdicts:
        cross_ref.append({
            "technique_id": v.technique_id,
            "status": v.status,
            "confidence": v.confidence,
            "degraded": v.degraded,
            "error": v.error,
            "evidence": [(e.source, e.observation) for e in v.evidence],
            "tool_calls": tool_ids.get(v.technique_id, []),
        })
    mapping = [(tid, names.get(tid, ""), verdict_of[tid].status if tid in verdict_of else "not_run")
               for tid in run.technique_ids]

    return IncidentReport(
        bundle_id=bundle.bundle_id,
        executive_summary={"verdict": _verdict_word(run), "confidence": _confidence(run), "rationale": rationale},
        scope_context=scope,
        timeline=_timeline(run, bundle, ioc_ref),
        iocs=iocs,
        risk_assessment=_risk(run, bundle, names),
        recommendations=_recommendations(run, iocs_by_technique, names),
        appendices={"evidence_cross_reference": cross_ref, "attack_mapping": mapping,
                    "ioc_values": [(i.ioc_id, i.value) for i in iocs]},
        persona=ctx.persona,
    )


def report_facts(report: IncidentReport, run: AdjudicationRun) -> dict:
    """Structured findings handed to a remote writer."""
    return {
        "executive_summary": report.executive_summary,
        "scope_context": report.scope_context,
        "timeline": [{"time": _rel(e.t_rel), "utc": _utc(e.t_abs), "event": e.event, "citations": list(e.citations)}
                     for e in report.timeline],
        "iocs": [{"id": i.ioc_id, "type": i.ioc_type, "value": i.value, "citations": list(i.citations)}
                 for i in report.iocs],
        "verdicts": [v.to_dict() for v in run.verdicts],
        "recommendations": report.recommendations,
        "tool_calls": [e.request_id for e in run.tool_call_log],
    }


# -- rendering -----------------------------------------------------------------

def redact(text: str, persona: Persona) -> str:
    for value in sorted(persona.secrets().values(), key=len, reverse=True):
        for variant in {value, "".join(value.split())}:
            text = text.replace(variant, REDACTED)
    return text


def render(report: IncidentReport) -> str:
    if report.document is not None:
        return redact(report.document.rstrip("\n") + "\n", report.persona)
    es = report.executive_summary
    out = [f"## {SECTIONS[0]}",
           f"**Verdict:** {es['verdict']}",
           f"**Confidence:** {es['confidence'].capitalize()}",
           f"**Rationale:** {es['rationale']}",
           "",
           f"## {SECTIONS[1]}"]
    out += [f"- {line}" for line in report.scope_context]
    out += ["", f"## {SECTIONS[2]}"]
    if report.timeline:
        out += [f"{n}. {_utc(e.t_abs)} ({_rel(e.t_rel)}) {e.event} [{', '.join(e.citations)}]"
                for n, e in enumerate(report.timeline, 1)]
    else:
        out.append("No cited events.")
    out += ["", f"## {SECTIONS[3]}"]
    if report.iocs:
        out += [f"- {i.ioc_id} {i.ioc_type}: `{i.value}` [{', '.join(i.citations)}]" for i in report.iocs]
    else:
        out.append("None.")
    out += ["", f"## {SECTIONS[4]}"]
    out += [f"- {line}" for line in report.risk_assessment]
    out += ["", f"## {SECTIONS[5]}"]
    out += [f"- [ ] {n}. {line}" for n, line in enumerate(report.recommendations, 1)]
    out += ["", f"## {SECTIONS[6]}", "", "**Evidence Cross-Reference**", ""]
    for row in report.appendices["evidence_cross_reference"]:
        flags = " (degraded)" if row["degraded"] else ""
        flags += f" (error: {row['error']})" if row["error"] else ""
        out.append(f"- {row['technique_id']}: {row['status']}, {row['confidence']}{flags}")
        for source, observation in row["evidence"]:
            out.append(f"  - {source}: {observation}")
        if row["tool_calls"]:
            out.append(f"  - tool calls: {', '.join(row['tool_calls'])}")
    out += ["", "**MITRE ATT&CK Mapping**", "", "| Technique | Name | Status |", "| --- | --- | --- |"]
    out += [f"| {tid} | {name} | {status} |" for tid, name, status in report.appendices["attack_mapping"]]
    if report.notes:
        out += ["", "**Report Notes**", ""] + [f"- {n}" for n in report.notes]
    return redact("\n".join(out) + "\n", report.persona)


# -- grounding -----------------------------------------------------------------

_URL = re.compile(r"https?://[^\s`\"'<>\])]+", re.IGNORECASE)
_TECHNIQUE = re.compile(r"\bT\d{4}(?:\.\d{3})?\b")
_REL = re.compile(r"\bT\+(\d+(?:\.\d+)?)s\b")
_HASH = re.compile(r"\b[0-9a-f]{64}\b")
_IPV4 = re.compile(r"\b(?:\d{1,3}\.){3}\d{1,3}\b")
_DOMAIN = re.compile(r"\b(?:[a-z0-9](?:[a-z0-9-]*[a-z0-9])?\.)+[a-z]{2,}\b", re.IGNORECASE)


def fact_tokens(text: str) -> dict[str, list]:
    """Fact tokens in ``text``. URLs are taken out before domains are searched."""
    urls = [u.rstrip(".,;:") for u in _URL.findall(text)]
    rest = _URL.sub(" ", text)
    hashes = _HASH.findall(rest)
    rest = _HASH.sub(" ", rest)
    ips = _IPV4.findall(rest)
    rest = _IPV4.sub(" ", rest)
    return {
        "url": urls,
        "hash": hashes,
        "ip": ips,
        "domain": [d.lower() for d in _DOMAIN.findall(rest)],
        "technique": _TECHNIQUE.findall(text),
        "time": _REL.findall(text),
    }


def allowed_facts(run: AdjudicationRun, bundle: EvidenceBundle) -> dict[str, set]:
    ctx = bundle.context
    urls = {rec.url for rec in bundle.network} | {ctx.target_url}
    hosts = {rec.host for rec in bundle.network} | {h for h in (email_domain(ctx.lure_from),
                                                              email_domain(ctx.persona.email))}
    from .bundle import host_of

    hosts.add(host_of(ctx.target_url))
    times = [0.0, bundle.session_end]
    times += [bundle.rel(rec.started_at) for rec in bundle.network]
    times += [fr.t_rel for fr in bundle.frames] + [a.t_rel for a in bundle.actions]
    for v in run.verdicts:
        for item in v.evidence:
            parsed = parse_citation(item.source)
            if parsed and parsed[0] == "frame":
                times.append(float(parsed[1]))
    return {
        "url": urls,
        "hash": {r.sha256 for _, r in bundle.resources.items()} | {bundle.manifest_hash or ""},
        "ip": {h for h in hosts if _host_type(h) == "ip"},
        "domain": {h.lower() for h in hosts if h},
        "technique": set(run.technique_ids),
        "time": {to_micros(t) for t in times},
    }


def ungrounded(text: str, run: AdjudicationRun, bundle: EvidenceBundle) -> list[str]:
    """Fact tokens in ``text`` that the run and bundle do not support."""
    allowed = allowed_facts(run, bundle)
    bad = []
    for kind, tokens in fact_tokens(text).items():
        for tok in tokens:
            ok = to_micros(float(tok)) in allowed["time"] if kind == "time" else tok in allowed[kind]
            if not ok:
                bad.append(f"{kind} {tok}")
    return bad


def split_sections(text: str) -> list[tuple[str, str]]:
    parts = re.split(r"^## +(.+?)\s*$", text, flags=re.MULTILINE)
    return [(parts[i].strip(), parts[i + 1]) for i in range(1, len(parts), 2)]


def repeated_iocs(text: str, iocs) -> list[str]:
    """IOC values that occur more than once outside the appendices."""
    body = "".join(content for title, content in split_sections(text) if title != "Appendices")
    tokens = fact_tokens(body)
    bad = []
    for i in iocs:
        count = tokens.get(i.ioc_type, []).count(i.value.lower() if i.ioc_type == "domain" else i.value)
        if count > 1:
            bad.append(i.value)
    return bad


def check_document(text: str, run: AdjudicationRun, bundle: EvidenceBundle) -> list[str]:
    """Problems that disqualify a written report; empty when it is acceptable."""
    problems = []
    titles = [t for t, _ in split_sections(text)]
    if titles != list(SECTIONS):
        problems.append(f"section headings {titles} differ from the required seven")
    problems += [f"ungrounded {b}" for b in ungrounded(text, run, bundle)]
    persona = bundle.context.persona
    if redact(text, persona) != text:
        problems.append("persona secret present")
    problems += [f"repeated IOC {v}" for v in repeated_iocs(text, extract_iocs(run, bundle))]
    return problems
