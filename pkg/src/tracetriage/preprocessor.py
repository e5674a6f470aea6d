"""Email ingestion: MIME parsing, render-safe HTML, CTA selection, session context."""
from __future__ import annotations

import html
import json
import re
from collections import Counter
from dataclasses import dataclass, field, fields
from email import errors as email_errors
from email import policy
from email.parser import BytesParser
from email.utils import parseaddr
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Optional, Sequence, Union
from urllib.parse import urljoin, urlsplit

from .bundle import Persona, SessionContext
from .errors import DepthError, EmptyBodyError, NoCandidatesError, ParseError

MAX_DEPTH = 512
PLACEHOLDER_SRC = "about:blank"
FOOTER_WORDS = ("unsubscribe", "privacy", "terms", "contact", "support", "view in browser")

CTA_HEADER = (
    "Analyze the provided email image. Below is a list of candidate URLs found in the email's HTML.\n"
    "Your task is to identify the primary Call-To-Action (CTA) link. The CTA is the main link the email "
    "wants the user to click, often styled as a prominent button.\n"
    "\n"
    "Candidate Links:\n"
)
CTA_FOOTER = (
    "\n"
    "Based on the image, which link is the primary CTA? Respond with the number of the link from the "
    "list above. Only respond with the number."
)


# -- parsing -------------------------------------------------------------------

@dataclass(frozen=True)
class EmailDoc:
    subject: str
    from_address: str
    body_html: Optional[str] = None
    body_text: Optional[str] = None
    headers: tuple = ()
    base_url: Optional[str] = None

    def __post_init__(self):
        if self.body_html is None and self.body_text is None:
            raise EmptyBodyError("email has neither an html nor a text body")


_FATAL_DEFECTS = (
    email_errors.StartBoundaryNotFoundDefect,
    email_errors.CloseBoundaryNotFoundDefect,
    email_errors.MultipartInvariantViolationDefect,
    email_errors.InvalidBase64PaddingDefect,
    email_errors.InvalidBase64CharactersDefect,
    email_errors.InvalidBase64LengthDefect,
)
_HEADER_LINE = re.compile(rb"[!-9;-~]+:")


def parse_eml(data: bytes) -> EmailDoc:
    """Parse RFC 5322 bytes, preferring an html body and keeping any text body."""
    if not isinstance(data, (bytes, bytearray)):
        raise ParseError("parse_eml needs bytes")
    data = bytes(data)
    if not _HEADER_LINE.match(data.lstrip(b"\r\n")):
        raise ParseError("message does not start with a header field", offset=0)
    head_end = min((i for i in (data.find(b"\r\n\r\n"), data.find(b"\n\n")) if i >= 0), default=-1)
    if head_end < 0:
        raise ParseError("message ends inside the header block", offset=len(data))
    msg = BytesParser(policy=policy.default).parsebytes(data)
    html_body = text_body = None
    base = msg.get("Content-Base") or msg.get("Content-Location")
    for part in msg.walk():
        bad = [d for d in part.defects if isinstance(d, _FATAL_DEFECTS)]
        if bad:
            raise ParseError(f"malformed MIME structure: {type(bad[0]).__name__}")
        if part.is_multipart() or part.get_content_disposition() == "attachment":
            continue
        ctype = part.get_content_type()
        if ctype not in ("text/html", "text/plain"):
            continue
        try:
            content = part.get_content()
        except (LookupError, ValueError) as exc:
            raise ParseError(f"cannot decode {ctype} part: {exc}") from None
        if ctype == "text/html" and html_body is None:
            html_body = content
            base = part.get("Content-Base") or part.get("Content-Location") or base
        elif ctype == "text/plain" and text_body is None:
            text_body = content
    if not (html_body or "").strip() and not (text_body or "").strip():
        raise EmptyBodyError("email has no text or html body")
    return EmailDoc(
        subject=str(msg.get("Subject", "")).strip(),
        from_address=parseaddr(str(msg.get("From", "")))[1],
        body_html=html_body if (html_body or "").strip() else None,
        body_text=text_body if (text_body or "").strip() else None,
        headers=tuple((k, str(v)) for k, v in msg.items()),
        base_url=str(base).strip() if base else None,
    )


# -- sanitization --------------------------------------------------------------

VOID = frozenset("area base br col embed hr img input link meta param source track wbr".split())
DROP_WITH_CONTENT = {
    "script": "script", "iframe": "embedded_frame", "frame": "embedded_frame", "frameset": "embedded_frame",
    "object": "embedded_object", "applet": "embedded_object", "noscript": "noscript", "template": "template",
}
DROP_VOID = {"link": "remote_link", "embed": "embedded_object", "meta": "meta_refresh", "param": "embedded_object"}
SRC_ATTRS = ("src", "srcset", "background", "poster", "lowsrc", "dynsrc", "data", "codebase", "ping")
FORM_ATTRS = ("action", "formaction", "method", "target", "formmethod", "formtarget")
HREF_TAGS = ("a", "area", "base")
_CSS_URL = re.compile(r"url\(\s*(['\"]?)(.*?)\1\s*\)", re.IGNORECASE | re.DOTALL)
_CSS_IMPORT = re.compile(r"@import[^;]*;?", re.IGNORECASE)
_SCRIPT_SCHEME = re.compile(r"^\s*(javascript|vbscript|livescript)\s*:", re.IGNORECASE)


def _scheme_free(value: str) -> str:
    # browsers ignore control characters and whitespace inside a URL scheme
    return re.sub(r"[\x00-\x20]", "", html.unescape(value))


def _is_script_url(value: str) -> bool:
    return bool(_SCRIPT_SCHEME.match(_scheme_free(value)))


def _is_inert(value: str) -> bool:
    v = _scheme_free(value).lower()
    return v in ("", PLACEHOLDER_SRC) or v.startswith("data:image/") or v.startswith("cid:")


def _neutralize_css(css: str, tally: Counter) -> str:
    def swap(m):
        if _is_inert(m.group(2)):
            return m.group(0)
        tally["remote_style"] += 1
        return f"url({PLACEHOLDER_SRC})"

    out = _CSS_URL.sub(swap, css)
    if _CSS_IMPORT.search(out):
        tally["remote_style"] += len(_CSS_IMPORT.findall(out))
        out = _CSS_IMPORT.sub("", out)
    if "expression(" in out.lower():
        tally["script"] += 1
        out = re.sub(r"expression\(", "(", out, flags=re.IGNORECASE)
    return out


@dataclass(frozen=True)
class SafeHtml:
    document: str
    removals: tuple = ()

    @property
    def removal_counts(self) -> dict:
        return dict(self.removals)

    @property
    def total_removals(self) -> int:
        return sum(c for _, c in self.removals)


class _Sanitizer(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.out: list[str] = []
        self.tally: Counter = Counter()
        self.stack: list[str] = []
        self.skip: list[str] = []  # open drop-with-content elements
        self.in_style = False

    def _depth_check(self):
        if len(self.stack) + len(self.skip) > MAX_DEPTH:
            raise DepthError(f"nesting deeper than {MAX_DEPTH}")

    def _attrs(self, tag: str, attrs) -> str:
        kept = []
        for name, value in attrs:
            name = name.lower()
            value = "" if value is None else value
            if name.startswith("on"):
                self.tally["event_handler"] += 1
                continue
            if name in FORM_ATTRS and tag in ("form", "button", "input"):
                self.tally["form_target"] += 1
                continue
            if name in ("href", "xlink:href"):
                if tag not in HREF_TAGS:
                    self.tally["remote_href"] += 1
                    continue
                if _is_script_url(value):
                    self.tally["javascript_url"] += 1
                    continue
            elif _is_script_url(value):
                self.tally["javascript_url"] += 1
                continue
            if name in SRC_ATTRS:
                if name == "src" and _is_inert(value):
                    kept.append((name, value))
                elif name == "src":
                    self.tally["remote_image" if tag == "img" else "remote_media"] += 1
                    kept.append(("src", PLACEHOLDER_SRC))
                else:
                    self.tally["remote_image" if tag == "img" else "remote_media"] += 1
                continue
            if name == "style":
                value = _neutralize_css(value, self.tally)
            if name == "http-equiv":
                self.tally["meta_refresh"] += 1
                continue
            kept.append((name, value))
        return "".join(f' {n}="{html.escape(v, quote=True)}"' for n, v in kept)

    def handle_starttag(self, tag, attrs):
        self._open(tag, attrs, closed=False)

    def handle_startendtag(self, tag, attrs):
        self._open(tag, attrs, closed=True)

    def _open(self, tag, attrs, closed):
        if self.skip:
            if tag not in VOID and not closed:
                self.skip.append(tag)
                self._depth_check()
            return
        if tag in DROP_WITH_CONTENT:
            self.tally[DROP_WITH_CONTENT[tag]] += 1
            if not closed:
                self.skip.append(tag)
                self._depth_check()
            return
        if tag in DROP_VOID:
            if tag == "meta" and not any(n.lower() == "http-equiv" for n, _ in attrs):
                self.out.append(f"<meta{self._attrs(tag, attrs)}>")
                return
            self.tally[DROP_VOID[tag]] += 1
            return
        self.out.append(f"<{tag}{self._attrs(tag, attrs)}>")
        if tag == "style":
            self.in_style = True
        if tag not in VOID and not closed:
            self.stack.append(tag)
            self._depth_check()
        elif closed and tag not in VOID:
            self.out.append(f"</{tag}>")

    def handle_endtag(self, tag):
        if self.skip:
            if tag in self.skip:
                while self.skip and self.skip.pop() != tag:
                    pass
            return
        if tag in DROP_WITH_CONTENT or tag in VOID:
            return
        if tag in self.stack:
            while self.stack:
                open_tag = self.stack.pop()
                self.out.append(f"</{open_tag}>")
                if open_tag == tag:
                    break
        if tag == "style":
            self.in_style = False

    def handle_data(self, data):
        if self.skip:
            return
        if self.in_style:
            self.out.append(html.escape(_neutralize_css(data, self.tally), quote=False))
        else:
            self.out.append(html.escape(data, quote=False))

    def handle_comment(self, data):
        # conditional comments can carry markup for some clients
        self.tally["comment"] += 1

    def handle_decl(self, decl):
        self.out.append(f"<!{decl}>")

    def handle_pi(self, data):
        self.tally["processing_instruction"] += 1

    def unknown_decl(self, data):
        self.tally["comment"] += 1

    def finish(self) -> SafeHtml:
        self.close()
        while self.stack:
            self.out.append(f"</{self.stack.pop()}>")
        return SafeHtml("".join(self.out), tuple(sorted(self.tally.items())))


def sanitize(markup: str) -> SafeHtml:
    """Neutralize markup so rendering it issues no network request and runs no code."""
    parser = _Sanitizer()
    parser.feed(markup or "")
    return parser.finish()


BLOCK_TAGS = frozenset(
    "address article aside blockquote br dd div dl dt fieldset figcaption figure footer form h1 h2 h3 h4 h5 h6 "
    "header hr li main nav ol p pre section table tbody td tfoot th thead tr ul".split())


class _TextExtractor(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self.hidden = 0

    def handle_starttag(self, tag, attrs):
        if tag in ("script", "style", "head", "title"):
            self.hidden += 1
        elif tag in BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in ("script", "style", "head", "title"):
            self.hidden = max(0, self.hidden - 1)
        elif tag in BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if not self.hidden:
            self.parts.append(data)


def html_to_text(markup: str) -> str:
    """Visible text with one line per block and runs of spaces collapsed."""
    parser = _TextExtractor()
    parser.feed(markup or "")
    parser.close()
    lines = (" ".join(line.split()) for line in "".join(parser.parts).splitlines())
    return "\n".join(line for line in lines if line)


# -- links ---------------------------------------------------------------------

@dataclass(frozen=True)
class LinkCandidate:
    index: int
    text: str
    url: str
    style_hints: dict = field(default_factory=dict)

    @property
    def button_like(self) -> bool:
        return bool(self.style_hints.get("button_like"))

    @property
    def area_rank(self) -> int:
        return int(self.style_hints.get("area_rank", 0))

    def to_dict(self) -> dict:
        return {"index": self.index, "text": self.text, "url": self.url, "style_hints": dict(self.style_hints)}


_PX = re.compile(r"(font-size|padding(?:-top|-bottom)?|height|line-height)\s*:\s*(\d+(?:\.\d+)?)px", re.I)
_BUTTONISH = re.compile(r"btn|button", re.I)


def _style_px(style: str) -> dict:
    return {k.lower(): float(v) for k, v in _PX.findall(style or "")}


class _LinkCollector(HTMLParser):
    def __init__(self):
        super().__init__(convert_charrefs=True)
        self.base: Optional[str] = None
        self.links: list[dict] = []
        self.current: Optional[dict] = None
        self.cells: list[dict] = []  # open td/th attribute maps

    def handle_starttag(self, tag, attrs):
        a = {k.lower(): (v or "") for k, v in attrs}
        if tag == "base" and a.get("href") and self.base is None:
            self.base = a["href"]
        elif tag in ("td", "th"):
            self.cells.append(a)
        elif tag == "a":
            self.current = {"href": a.get("href"), "attrs": a, "text": [], "alt": [],
                            "cell": dict(self.cells[-1]) if self.cells else None}
        elif tag == "img" and self.current is not None and a.get("alt"):
            self.current["alt"].append(a["alt"])

    def handle_endtag(self, tag):
        if tag in ("td", "th") and self.cells:
            self.cells.pop()
        elif tag == "a" and self.current is not None:
            self.links.append(self.current)
            self.current = None

    def handle_data(self, data):
        if self.current is not None:
            self.current["text"].append(data)


def _button_like(attrs: dict, cell: Optional[dict]) -> bool:
    tokens = " ".join(attrs.get(k, "") for k in ("class", "id", "role", "style"))
    if _BUTTONISH.search(tokens):
        return True
    style = attrs.get("style", "").lower()
    if "background" in style and ("padding" in style or "display:inline-block" in style.replace(" ", "")):
        return True
    if cell is not None:
        cell_style = cell.get("style", "").lower()
        if cell.get("bgcolor") or "background" in cell_style or _BUTTONISH.search(cell.get("class", "")):
            return True
    return False


def _area(text: str, attrs: dict, cell: Optional[dict]) -> float:
    px = _style_px(attrs.get("style", ""))
    if cell:
        for k, v in _style_px(cell.get("style", "")).items():
            px.setdefault(k, v)
    font = px.get("font-size", 14.0)
    height = max(px.get("height", 0.0), px.get("line-height", font * 1.2)) + 2 * px.get("padding", 0.0) \
        + px.get("padding-top", 0.0) + px.get("padding-bottom", 0.0)
    width = max(len(text), 1) * font * 0.6 + 2 * px.get("padding", 0.0)
    return width * height


def enumerate_links(safe: Union[SafeHtml, str], base_url: Optional[str] = None) -> list[LinkCandidate]:
    """One candidate per anchor whose href resolves to an absolute http(s) URL."""
    document = safe.document if isinstance(safe, SafeHtml) else safe
    collector = _LinkCollector()
    collector.feed(document or "")
    collector.close()
    base = collector.base or base_url
    raw = []
    for link in collector.links:
        href = (link["href"] or "").strip()
        if not href or href.startswith("#"):
            continue
        url = urljoin(base, href) if base else href
        parts = urlsplit(url)
        if parts.scheme.lower() not in ("http", "https") or not parts.netloc:
            continue
        text = " ".join("".join(link["text"]).split()) or " ".join(link["alt"]) or link["attrs"].get("title", "")
        raw.append((text, url, _button_like(link["attrs"], link["cell"]), _area(text, link["attrs"], link["cell"])))
    by_area = sorted(range(len(raw)), key=lambda i: (-raw[i][3], i))
    rank = {i: r + 1 for r, i in enumerate(by_area)}
    return [LinkCandidate(i + 1, text, url, {"button_like": button, "area_rank": rank[i]})
            for i, (text, url, button, _) in enumerate(raw)]


def _quote(text: str) -> str:
    return " ".join(text.replace("\\", "\\\\").replace('"', '\\"').split())


def build_cta_prompt(candidates: Sequence[LinkCandidate]) -> str:
    if not candidates:
        raise NoCandidatesError("no candidate links to choose from")
    lines = "".join(f'{n}. TEXT: "{_quote(c.text)}" - URL: "{_quote(c.url)}"\n'
                    for n, c in enumerate(candidates, 1))
    return CTA_HEADER + lines + CTA_FOOTER


def heuristic_cta(candidates: Sequence[LinkCandidate]) -> int:
    """Stoplist, then button-like, then largest area, then document order. 1-based."""
    if not candidates:
        raise NoCandidatesError("no candidate links to choose from")
    pool = [(n, c) for n, c in enumerate(candidates, 1)
            if not any(w in c.text.lower() for w in FOOTER_WORDS)]
    pool = pool or list(enumerate(candidates, 1))
    return min(pool, key=lambda nc: (not nc[1].button_like, nc[1].area_rank, nc[0]))[0]


_NUMBER_REPLY = re.compile(r"\s*\(?(\d+)[).]?\s*")


def parse_cta_reply(reply, n: int) -> Optional[int]:
    if not isinstance(reply, str):
        return None
    m = _NUMBER_REPLY.fullmatch(reply)
    if not m:
        return None
    value = int(m.group(1))
    return value if 1 <= value <= n else None


VisualSelector = Callable[[str, Optional[bytes], SafeHtml], str]


def select_cta(safe: SafeHtml, candidates: Sequence[LinkCandidate], backend="heuristic",
               screenshot: Optional[bytes] = None) -> int:
    """1-based index of the primary call to action.

    ``backend`` is ``"heuristic"`` or a visual selector: a callable (or an
    object with ``select``) receiving the prompt, an optional screenshot and
    the safe document, returning the model's raw reply.
    """
    if not candidates:
        raise NoCandidatesError("no candidate links to choose from")
    if backend == "heuristic" or backend is None:
        return heuristic_cta(candidates)
    ask = backend.select if hasattr(backend, "select") else backend
    try:
        reply = ask(build_cta_prompt(candidates), screenshot, safe)
    except Exception:  # a failing selector must not stop triage
        reply = None
    picked = parse_cta_reply(reply, len(candidates))
    return picked if picked is not None else heuristic_cta(candidates)


class ChatVisualSelector:
    """Visual selector over a chat-completion endpoint (markup stands in for the image)."""

    def __init__(self, config):
        from .adjudicator import RemoteConfig

        self.config = config if isinstance(config, RemoteConfig) else RemoteConfig.from_mapping(config)

    def select(self, prompt: str, screenshot: Optional[bytes], safe: SafeHtml) -> str:
        import base64

        from .adjudicator import chat_completion

        content = [{"type": "text", "text": prompt}]
        if screenshot:
            data = base64.b64encode(screenshot).decode("ascii")
            content.append({"type": "image_url", "image_url": {"url": f"data:image/png;base64,{data}"}})
        else:
            content.append({"type": "text", "text": "Sanitized email markup:\n" + safe.document})
        reply = chat_completion(self.config, [{"role": "user", "content": content}])
        return reply["message"].get("content") or ""


# -- context -------------------------------------------------------------------

def extract_context(doc: EmailDoc, cta_url: str, persona: Optional[Persona] = None,
                    time_budget_s: float = 60.0) -> SessionContext:
    body = doc.body_text if doc.body_text is not None else html_to_text(sanitize(doc.body_html).document)
    return SessionContext(doc.subject, body, doc.from_address, cta_url, persona or Persona(), time_budget_s)


def parse_persona(text: str) -> Persona:
    """``persona.v1``: ``field: value`` lines; missing fields keep the synthetic defaults."""
    names = {f.name for f in fields(Persona)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        key, sep, value = line.partition(":")
        key = key.strip().lower().replace(" ", "_")
        if not sep or key not in names:
            raise ParseError(f"persona line {lineno}: expected one of {sorted(names)} followed by ':'",
                             line=lineno)
        values[key] = value.strip()
    try:
        return Persona(**values)
    except ValueError as exc:
        raise ParseError(str(exc)) from None


def persona_text(persona: Persona) -> str:
    return "".join(f"{k}: {v}\n" for k, v in persona.to_dict().items())


def load_persona(path) -> Persona:
    return parse_persona(Path(path).read_text(encoding="utf-8"))


@dataclass(frozen=True)
class Preprocessed:
    doc: EmailDoc
    safe: Optional[SafeHtml]
    candidates: tuple
    cta_index: Optional[int]
    context: Optional[SessionContext]

    def to_dict(self) -> dict:
        return {
            "format": "context.v1",
            "context": self.context.to_dict() if self.context else None,
            "candidates": [c.to_dict() for c in self.candidates],
            "cta_index": self.cta_index,
            "removals": dict(self.safe.removals) if self.safe else {},
        }


def preprocess(data: bytes, persona: Optional[Persona] = None, backend="heuristic",
               time_budget_s: float = 60.0) -> Preprocessed:
    """Email bytes to session context. ``context`` is None when no CTA link exists."""
    doc = parse_eml(data)
    safe = sanitize(doc.body_html) if doc.body_html is not None else None
    if safe is not None:
        candidates = enumerate_links(safe, doc.base_url)
    else:
        candidates = _text_links(doc.body_text or "")
    if not candidates:
        return Preprocessed(doc, safe, (), None, None)
    index = select_cta(safe or SafeHtml(""), candidates, backend)
    context = extract_context(doc, candidates[index - 1].url, persona, time_budget_s)
    return Preprocessed(doc, safe, tuple(candidates), index, context)


_BARE_URL = re.compile(r"https?://[^\s<>\"']+")


def _text_links(text: str) -> list[LinkCandidate]:
    urls = [u.rstrip(".,;:)") for u in _BARE_URL.findall(text)]
    return [LinkCandidate(i, u, u, {"button_like": False, "area_rank": i}) for i, u in enumerate(urls, 1)]


def write_context(result: Preprocessed, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                    encoding="utf-8")
    return path
