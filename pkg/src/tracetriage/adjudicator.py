"""Stateless auditor orchestration.

Each technique is adjudicated in a fresh backend session that sees the
evidence only through the three evidence tools. Output is schema-checked and
citation-validated; rejected output is retried with the rejection reasons
appended to the brief.
"""
from __future__ import annotations

import json
import logging
import os
import threading
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .bundle import EvidenceBundle, SessionContext, canonical_json, short_time
from .checklist import (
    ChecklistProfile, TechniqueDef, TechniqueVerdict, degraded_verdict, resolve_profile,
    technique_index, validate_verdict,
)
from .errors import (
    BackendError, SchemaError, ToolBudgetExceeded, ToolError, UnknownPolicyError,
)
from .evidence_api import TOOL_METHODS, LocalClient
from .harness import CostRecord

log = logging.getLogger(__name__)

RUN_FORMAT = "run.v1"
DEFAULT_RETRY_LIMIT = 2
DEFAULT_TOOL_BUDGET = 12
DEFAULT_POLICY = "any-confirmed"

AUDITOR_SYSTEM_PROMPT = (
    "You are the Auditor, a security investigation specialist focused on high-signal phishing "
    "detections from captured browser sessions.\n"
    "Protocol: Guided through one MITRE ATT&CK technique at a time; base conclusions strictly on "
    "artifacts pulled through tools; never speculate without a citation to a specific artifact; "
    "clearly map observations back to the requested technique.\n"
    "Available MCP Tools: get_session(time, filter) (HTTP traffic/headers); get_screenshot(time) "
    "(rendered frames); retrieve_resource(prefix) (persisted HTML/JS artifacts).\n"
    "Output Format (JSON):\n"
    "{\n"
    '  "status": "confirmed" | "suspicious" | "not_observed",\n'
    '  "confidence": "high" | "medium" | "low",\n'
    '  "evidence": [ { "source": "...", "observation": "...", "relevance": "..." } ]\n'
    "}"
)

CITATION_RULES = (
    "Cite every observation with a source of the form resource:<id>, net:<seq> or "
    "frame:<seconds since session start>."
)


# -- briefs and tool sessions -------------------------------------------------

@dataclass(frozen=True)
class TechniqueBrief:
    """Everything a backend is told about one technique adjudication."""

    technique: TechniqueDef
    context: SessionContext
    actions: tuple
    session_end: float
    bundle_id: str = ""
    feedback: tuple = ()
    attempt: int = 0
    system_prompt: str = AUDITOR_SYSTEM_PROMPT

    def user_prompt(self) -> str:
        t, ctx = self.technique, self.context
        lines = [
            f"Technique: {t.technique_id} ({t.name})",
            f"Guidance: {t.guidance}",
            "",
            "Session context:",
            f"- lure subject: {ctx.lure_subject}",
            f"- lure sender: {ctx.lure_from}",
            f"- target URL: {ctx.target_url}",
            f"- session span: T+0.000s to {short_time(self.session_end)}",
            "",
            "Operator audit log:",
        ]
        lines += [f"- {short_time(a.t_rel)} {a.kind}: {a.annotation}" for a in self.actions] or ["- (empty)"]
        lines += ["", CITATION_RULES]
        if self.feedback:
            lines += ["", "Your previous answer was rejected:"] + [f"- {f}" for f in self.feedback]
        return "\n".join(lines)


@dataclass(frozen=True)
class ToolLogEntry:
    technique_id: str
    request_id: str
    method: str
    params: dict
    response_bytes: int
    ok: bool

    def to_dict(self) -> dict:
        return {"technique_id": self.technique_id, "request_id": self.request_id, "method": self.method,
                "params": self.params, "response_bytes": self.response_bytes, "ok": self.ok}


class RunLog:
    """Append-only, lock-protected record of tool calls and notes."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: list[ToolLogEntry] = []
        self.notes: list[dict] = []

    def add(self, entry: ToolLogEntry) -> None:
        with self._lock:
            self.entries.append(entry)

    def note(self, technique_id: str, event: str, detail: str = "") -> None:
        with self._lock:
            self.notes.append({"technique_id": technique_id, "event": event, "detail": detail})


class ToolSession:
    """One backend session's access to the evidence tools, with a call budget."""

    def __init__(self, client, technique_id: str, budget: int, run_log: Optional[RunLog] = None,
                 attempt: int = 0):
        self.client = client
        self.technique_id = technique_id
        self.budget = budget
        self.calls = 0
        self.cost_usd = 0.0
        self.tokens = {"prompt": 0, "completion": 0}
        self.run_log = run_log
        self.attempt = attempt

    @property
    def remaining(self) -> int:
        return self.budget - self.calls

    def call(self, method: str, **params):
        if self.calls >= self.budget:
            raise ToolBudgetExceeded(f"{self.technique_id}: tool budget of {self.budget} calls exhausted")
        self.calls += 1
        request_id = f"{self.technique_id}/{self.attempt}/{self.calls}"
        response = self.client.request(method, params, request_id=request_id)
        if self.run_log is not None:
            self.run_log.add(ToolLogEntry(self.technique_id, request_id, method, dict(params),
                                          len(canonical_json(response)), "error" not in response))
        if "error" in response:
            raise ToolError(response["error"]["code"], response["error"]["message"])
        return response["result"]

    def add_usage(self, prompt_tokens: int, completion_tokens: int, usd: float) -> None:
        self.tokens["prompt"] += prompt_tokens
        self.tokens["completion"] += completion_tokens
        self.cost_usd += usd

    def note(self, event: str, detail: str = "") -> None:
        if self.run_log is not None:
            self.run_log.note(self.technique_id, event, detail)


def parse_backend_output(text, technique_id: str) -> TechniqueVerdict:
    """Decode a backend answer; tolerates a fenced code block around the JSON."""
    if not isinstance(text, str):
        raise SchemaError("backend answer must be text")
    body = text.strip()
    if body.startswith("```"):
        body = body.split("\n", 1)[1] if "\n" in body else ""
        body = body.rsplit("```", 1)[0]
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"answer is not JSON: {exc}") from None
    if isinstance(data, dict) and data.get("technique_id", technique_id) != technique_id:
        raise SchemaError(f"answer is about {data['technique_id']}, expected {technique_id}")
    return TechniqueVerdict.from_dict(data, technique_id)


@dataclass
class TechniqueOutcome:
    verdict: TechniqueVerdict
    cost_usd: float = 0.0
    attempts: int = 0


def _adjudicate(bundle: EvidenceBundle, client, technique: TechniqueDef, backend, retry_limit: int,
                max_tool_calls: Optional[int], run_log: Optional[RunLog]) -> TechniqueOutcome:
    if retry_limit < 0:
        raise ValueError("retry_limit must be >= 0")
    tid = technique.technique_id
    if max_tool_calls is None:
        max_tool_calls = getattr(backend, "capabilities", {}).get("max_tool_calls", DEFAULT_TOOL_BUDGET)
    feedback: list[str] = []
    transport_failures = 0
    last_error = None
    cost = 0.0
    for attempt in range(retry_limit + 1):
        brief = TechniqueBrief(technique, bundle.context, bundle.actions, bundle.session_end,
                               bundle.bundle_id, tuple(feedback), attempt)
        session = ToolSession(client, tid, max_tool_calls, run_log, attempt)
        try:
            raw = backend.adjudicate(brief, session)
        except BackendError as exc:
            cost += session.cost_usd
            transport_failures += 1
            last_error = exc
            log.warning("%s attempt %d: backend failure: %s", tid, attempt, exc)
            continue
        except ToolBudgetExceeded as exc:
            cost += session.cost_usd
            feedback.append(f"TOOL_BUDGET: {exc}")
            session.note("budget_exhausted", str(exc))
            continue
        cost += session.cost_usd
        try:
            verdict = parse_backend_output(raw, tid)
        except SchemaError as exc:
            feedback.append(f"BAD_SCHEMA: {exc}")
            continue
        result = validate_verdict(verdict, bundle, tid)
        if result:
            return TechniqueOutcome(verdict, cost, attempt + 1)
        feedback.append(result.describe())
        if run_log is not None:
            run_log.note(tid, "rejected", result.describe())
    if transport_failures == retry_limit + 1:
        raise BackendError(f"{tid}: backend failed on every attempt: {last_error}")
    if run_log is not None:
        run_log.note(tid, "degraded", " | ".join(feedback))
    return TechniqueOutcome(degraded_verdict(tid), cost, retry_limit + 1)


def adjudicate_technique(api_handle, technique: TechniqueDef, backend, retry_limit: int = DEFAULT_RETRY_LIMIT,
                         *, max_tool_calls: Optional[int] = None, run_log: Optional[RunLog] = None,
                         client=None) -> TechniqueVerdict:
    """Adjudicate one technique against a served bundle.

    ``api_handle`` is the bundle (served in-process) or an ``(bundle, client)``
    pair when the tools are reached over a transport.
    """
    bundle, client = _split_handle(api_handle, client)
    return _adjudicate(bundle, client, technique, backend, retry_limit, max_tool_calls, run_log).verdict


def _split_handle(api_handle, client):
    if isinstance(api_handle, tuple):
        bundle, client = api_handle
    else:
        bundle = api_handle
    return bundle, client if client is not None else LocalClient(bundle)


# -- aggregation ---------------------------------------------------------------

@dataclass(frozen=True)
class FinalVerdict:
    label: str
    policy: str
    drivers: tuple = ()

    def to_dict(self) -> dict:
        return {"label": self.label, "policy": self.policy, "drivers": list(self.drivers)}

    @classmethod
    def from_dict(cls, data) -> "FinalVerdict":
        return cls(data["label"], data["policy"], tuple(data.get("drivers", ())))


@dataclass(frozen=True)
class AggregationPolicy:
    name: str
    rule: Callable[[Sequence[TechniqueVerdict]], list]


def _counted(verdicts):
    return [v for v in verdicts if not v.degraded and not v.error]


def _any_confirmed(verdicts) -> list:
    live = _counted(verdicts)
    confirmed = sorted(v.technique_id for v in live if v.status == "confirmed")
    if confirmed:
        return confirmed
    strong = sorted(v.technique_id for v in live
                    if v.status == "suspicious" and v.confidence in ("high", "medium"))
    return strong if len(strong) >= 2 else []


def _confirmed_only(verdicts) -> list:
    return sorted(v.technique_id for v in _counted(verdicts) if v.status == "confirmed")


def _any_positive(verdicts) -> list:
    return sorted(v.technique_id for v in _counted(verdicts) if v.status in ("confirmed", "suspicious"))


POLICIES: dict[str, AggregationPolicy] = {
    p.name: p for p in (
        AggregationPolicy("any-confirmed", _any_confirmed),
        AggregationPolicy("confirmed-only", _confirmed_only),
        AggregationPolicy("any-positive", _any_positive),
    )
}


def aggregate(verdicts: Sequence[TechniqueVerdict], policy: str = DEFAULT_POLICY) -> FinalVerdict:
    try:
        rule = POLICIES[policy].rule
    except KeyError:
        raise UnknownPolicyError(f"unknown policy {policy!r}; known: {sorted(POLICIES)}") from None
    drivers = tuple(rule(list(verdicts)))
    return FinalVerdict("phishing" if drivers else "benign", policy, drivers)


# -- whole runs ----------------------------------------------------------------

@dataclass
class AdjudicationRun:
    bundle_id: str
    profile: str
    technique_ids: tuple
    verdicts: list
    final: FinalVerdict
    tool_call_log: list = field(default_factory=list)
    cost: CostRecord = field(default_factory=CostRecord)
    backend: str = ""
    bundle_digest: Optional[str] = None
    outcome: str = "completed"
    errors: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def status(self) -> str:
        if self.errors:
            return "error"
        return "blocked" if self.outcome == "blocked" else "completed"

    @property
    def prediction(self) -> str:
        """Label used by evaluation: phishing, benign, error or blocked."""
        return self.status if self.status != "completed" else self.final.label

    def to_dict(self) -> dict:
        return {
            "format": RUN_FORMAT,
            "bundle_id": self.bundle_id,
            "bundle_digest": self.bundle_digest,
            "profile": self.profile,
            "technique_ids": list(self.technique_ids),
            "backend": self.backend,
            "outcome": self.outcome,
            "status": self.status,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "final": self.final.to_dict(),
            "errors": list(self.errors),
            "tool_call_log": [e.to_dict() for e in self.tool_call_log],
            "notes": list(self.notes),
            "cost": self.cost.to_dict(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "AdjudicationRun":
        if data.get("format") != RUN_FORMAT:
            raise SchemaError(f"not a {RUN_FORMAT} document")
        return cls(
            bundle_id=data["bundle_id"],
            profile=data["profile"],
            technique_ids=tuple(data["technique_ids"]),
            verdicts=[TechniqueVerdict.from_dict(v) for v in data["verdicts"]],
            final=FinalVerdict.from_dict(data["final"]),
            tool_call_log=[ToolLogEntry(**e) for e in data.get("tool_call_log", [])],
            cost=CostRecord.from_dict(data.get("cost", {})),
            backend=data.get("backend", ""),
            bundle_digest=data.get("bundle_digest"),
            outcome=data.get("outcome", "completed"),
            errors=list(data.get("errors", [])),
            notes=list(data.get("notes", [])),
        )


def write_run(run: AdjudicationRun, path) -> Path:
    path = Path(path)
    path.write_text(run.dumps(), encoding="utf-8")
    return path


def read_run(path) -> AdjudicationRun:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    return AdjudicationRun.from_dict(data)


def run_checklist(bundle: EvidenceBundle, profile, backend, policy: str = DEFAULT_POLICY, *,
                  retry_limit: int = DEFAULT_RETRY_LIMIT, max_tool_calls: Optional[int] = None,
                  client=None, parallelism: int = 1, techniques=None) -> AdjudicationRun:
    """Adjudicate every technique of ``profile`` and aggregate the verdicts.

    Backend transport failures become error slots: a degraded verdict with its
    ``error`` set, excluded from aggregation, and a run status of ``error``.
    """
    if policy not in POLICIES:
        raise UnknownPolicyError(f"unknown policy {policy!r}")
    profile = resolve_profile(profile)
    index = technique_index(techniques)
    defs = [index[tid] for tid in profile.technique_ids]
    client = client if client is not None else LocalClient(bundle)
    run_log = RunLog()

    def one(tdef: TechniqueDef):
        try:
            return _adjudicate(bundle, client, tdef, backend, retry_limit, max_tool_calls, run_log)
        except BackendError as exc:
            return TechniqueOutcome(degraded_verdict(tdef.technique_id, error=str(exc)))

    if parallelism > 1 and len(defs) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            outcomes = list(pool.map(one, defs))
    else:
        outcomes = [one(d) for d in defs]

    order = {tid: i for i, tid in enumerate(profile.technique_ids)}

    def logical(entry: ToolLogEntry):
        attempt, call = entry.request_id.rsplit("/", 2)[1:]
        return order[entry.technique_id], int(attempt), int(call)

    verdicts = [o.verdict for o in outcomes]
    return AdjudicationRun(
        bundle_id=bundle.bundle_id,
        profile=profile.name,
        technique_ids=tuple(profile.technique_ids),
        verdicts=verdicts,
        final=aggregate(verdicts, policy),
        tool_call_log=sorted(run_log.entries, key=logical),
        cost=CostRecord(per_item_usd=[o.cost_usd for o in outcomes]),
        backend=getattr(backend, "identity", type(backend).__name__),
        bundle_digest=bundle.manifest_hash,
        outcome=bundle.outcome,
        errors=[v.technique_id for v in verdicts if v.error],
        notes=sorted(run_log.notes, key=lambda n: order.get(n["technique_id"], -1)),
    )


# -- remote chat-completion backend --------------------------------------------

@dataclass(frozen=True)
class RemoteConfig:
    base_url: str
    model: str
    api_key_env: str = "TRIAGE_API_KEY"
    timeout_s: float = 60.0
    usd_per_mtok_in: float = 0.0
    usd_per_mtok_out: float = 0.0

    @classmethod
    def from_mapping(cls, data: Mapping) -> "RemoteConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        missing = {"base_url", "model"} - known.keys()
        if missing:
            raise SchemaError(f"remote config lacks {sorted(missing)}")
        return cls(**known)


TOOL_SCHEMAS = [
    {"type": "function", "function": {
        "name": "get_session",
        "description": "HTTP traffic and headers, optionally in a +/-0.5 s window around a time.",
        "parameters": {"type": "object", "properties": {
            "time": {"type": "number", "description": "seconds since session start"},
            "filter": {"type": "string", "description": "key:value clauses; keys host url method status mime"},
            "cursor": {"type": "integer"}}}}},
    {"type": "function", "function": {
        "name": "get_screenshot",
        "description": "The rendered frame on screen at a time.",
        "parameters": {"type": "object", "properties": {"time": {"type": "number"}},
                       "required": ["time"]}}},
    {"type": "function", "function": {
        "name": "retrieve_resource",
        "description": "Persisted HTML/JS artifacts whose id starts with a prefix.",
        "parameters": {"type": "object", "properties": {
            "prefix": {"type": "string"}, "cursor": {"type": "integer"}}, "required": ["prefix"]}}},
]

FORCE_ANSWER = ("The tool-call budget is exhausted. Give your final JSON answer now, "
                "using only the artifacts already retrieved.")


def chat_completion(config: RemoteConfig, messages: list, tools: Optional[list] = None) -> dict:
    """POST one OpenAI-style chat-completion request; any failure is a BackendError."""
    body = {"model": config.model, "messages": messages}
    if tools:
        body["tools"] = tools
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    url = config.base_url.rstrip("/") + "/chat/completions"
    request = urllib.request.Request(url, json.dumps(body).encode("utf-8"), headers, method="POST")
    try:
        with urllib.request.urlopen(request, timeout=config.timeout_s) as reply:
            payload = json.loads(reply.read().decode("utf-8"))
        message = payload["choices"][0]["message"]
    except (urllib.error.URLError, OSError, ValueError, KeyError, IndexError, TypeError) as exc:
        raise BackendError(f"chat completion at {url} failed: {exc}") from exc
    return {"message": message, "usage": payload.get("usage") or {}}


class RemoteBackend:
    """Chat-completion backend brokering tool calls to the evidence tools."""

    identity = "remote"

    def __init__(self, config: RemoteConfig, max_tool_calls: int = DEFAULT_TOOL_BUDGET):
        self.config = config
        self.capabilities = {"max_tool_calls": max_tool_calls}

    def _post(self, messages, tools, session: ToolSession) -> dict:
        reply = chat_completion(self.config, messages, tools)
        usage = reply["usage"]
        p, c = int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0))
        session.add_usage(p, c, (p * self.config.usd_per_mtok_in + c * self.config.usd_per_mtok_out) / 1e6)
        return reply["message"]

    def adjudicate(self, brief: TechniqueBrief, tools: ToolSession) -> str:
        messages = [{"role": "system", "content": brief.system_prompt},
                    {"role": "user", "content": brief.user_prompt()}]
        while True:
            message = self._post(messages, TOOL_SCHEMAS, tools)
            calls = message.get("tool_calls") or []
            if not calls:
                return message.get("content") or ""
            messages.append({k: v for k, v in message.items() if k in ("role", "content", "tool_calls")})
            exhausted = False
            for call in calls:
                content = self._run_tool(call, tools) if not exhausted else None
                if content is None:
                    exhausted = True
                    content = json.dumps({"error": "tool budget exhausted"})
                messages.append({"role": "tool", "tool_call_id": call.get("id", ""), "content": content})
            if exhausted or tools.remaining <= 0:
                tools.note("forced_final_answer", f"after {tools.calls} tool calls")
                messages.append({"role": "user", "content": FORCE_ANSWER})
                return self._post(messages, None, tools).get("content") or ""

    @staticmethod
    def _run_tool(call: Mapping, tools: ToolSession) -> Optional[str]:
        fn = call.get("function") or {}
        name = fn.get("name")
        try:
            args = json.loads(fn.get("arguments") or "{}")
            if not isinstance(args, dict):
                raise ValueError("arguments must be an object")
        except ValueError as exc:
            return json.dumps({"error": f"bad arguments: {exc}"})
        if name not in TOOL_METHODS:
            return json.dumps({"error": f"unknown tool {name!r}"})
        try:
            result = tools.call(name, **args)
        except ToolBudgetExceeded:
            return None
        except ToolError as exc:
            return json.dumps({"error": {"code": exc.code, "message": exc.message}})
        return json.dumps(result, sort_keys=True)


def remote_backend(config, max_tool_calls: int = DEFAULT_TOOL_BUDGET) -> RemoteBackend:
    if not isinstance(config, RemoteConfig):
        config = RemoteConfig.from_mapping(config)
    return RemoteBackend(config, max_tool_calls)


def load_remote_config(path) -> RemoteConfig:
    return RemoteConfig.from_mapping(json.loads(Path(path).read_text(encoding="utf-8")))
