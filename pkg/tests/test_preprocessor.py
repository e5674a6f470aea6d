import json

import pytest
from hypothesis import given, settings, strategies as st

from tracetriage.bundle import Persona
from tracetriage.errors import DepthError, EmptyBodyError, NoCandidatesError, ParseError
from tracetriage.preprocessor import (CTA_FOOTER, CTA_HEADER, preprocess,
                                      build_cta_prompt, enumerate_links, heuristic_cta, html_to_text,
                                      load_persona, parse_cta_reply, parse_eml, parse_persona, persona_text,
                                      sanitize, select_cta, write_context)

HOSTILE = """<html><head><meta http-equiv="refresh" content="0;url=https://evil.example/">
<link rel=stylesheet href="https://cdn.example/x.css"><style>body{background:url(https://t.example/p.gif)}</style></head>
<body onload="steal()"><!-- hidden --><script>alert(1)</script><iframe src="https://x.example"></iframe>
<img src="https://track.example/p.gif" width=1><a href="javascript:alert(1)">bad</a>
<form action="https://collect.example/post"><input name=q></form>
<table><tr><td style="padding:16px;background:#06c"><a href="/reset" class="btn" style="font-size:18px">Reset password</a></td></tr></table>
<p><a href="https://example.com/privacy">Privacy</a> <a href="mailto:x@y">mail</a></p></body></html>"""


def eml(body, ctype="text/html", extra=""):
    return (f"From: Alerts <alerts@northwind-bank.com>\nTo: you@example.com\nSubject: Action needed\n{extra}"
            f"MIME-Version: 1.0\nContent-Type: {ctype}; charset=utf-8\n\n{body}\n").encode()


def test_sanitize_removals():
    safe = sanitize(HOSTILE)
    assert safe.removal_counts == {
        "comment": 1, "embedded_frame": 1, "event_handler": 1, "form_target": 1, "javascript_url": 1,
        "meta_refresh": 1, "remote_image": 1, "remote_link": 1, "remote_style": 1, "script": 1}
    for needle in ("<script", "onload", "iframe", "javascript:", "track.example", "collect.example",
                   "t.example", "http-equiv"):
        assert needle not in safe.document
    assert 'src="about:blank"' in safe.document


def test_sanitize_is_idempotent():
    once = sanitize(HOSTILE)
    twice = sanitize(once.document)
    assert twice.document == once.document and twice.removals == ()


def test_depth_limit():
    sanitize("<div>" * 500)
    with pytest.raises(DepthError):
        sanitize("<div>" * 600)


@settings(max_examples=200, deadline=None)
@given(st.text(alphabet=st.sampled_from(list("<>/=\"' abcdefhilmnoprstuvx:;()-")), max_size=120))
def test_sanitize_fuzz_is_safe_and_idempotent(markup):
    first = sanitize(markup)
    out = first.document.lower()
    assert "<script" not in out and "javascript:" not in out
    assert sanitize(first.document).removals == ()


FRAGMENTS = ["<script>", "</script>", "<a href='javascript:x()'>", "<a href=\"https://e.example/\">", "</a>",
             "<img src=https://t.example/p.gif>", "<div onclick=x()>", "</div>", "<iframe>", "<!--", "-->",
             "<style>a{background:url(https://t.example/a)}</style>", "<p style='background:url(https://t.example/b)'>", "<svg><script>", "text", "<p>", "<object>",
             "<meta http-equiv=refresh content=0>", "<form action=https://c.example/>", "<a href=' jAvAsCrIpT:x'>"]


@settings(max_examples=300, deadline=None)
@given(st.lists(st.sampled_from(FRAGMENTS), max_size=25))
def test_sanitize_structured_fuzz(parts):
    first = sanitize("".join(parts))
    out = first.document.lower()
    for needle in ("<script", "javascript:", "onclick", "t.example", "c.example", "<iframe", "<object", "http-equiv"):
        assert needle not in out
    assert sanitize(first.document).removals == ()


def test_links_resolve_and_rank():
    cands = enumerate_links(sanitize(HOSTILE), "https://mail.example.com/")
    assert [(c.index, c.text, c.url) for c in cands] == [
        (1, "Reset password", "https://mail.example.com/reset"), (2, "Privacy", "https://example.com/privacy")]
    assert cands[0].style_hints == {"button_like": True, "area_rank": 1}


def test_base_tag_wins_when_present():
    cands = enumerate_links('<base href="https://base.example/d/"><a href="x">go</a>')
    assert cands[0].url == "https://base.example/d/x"


def test_cta_prompt_exact():
    cands = enumerate_links('<a href="https://a.example/">Say "hi"</a>')
    prompt = build_cta_prompt(cands)
    assert prompt == CTA_HEADER + '1. TEXT: "Say \\"hi\\"" - URL: "https://a.example/"\n' + CTA_FOOTER
    assert prompt.startswith("Analyze the provided email image.")
    assert prompt.endswith("Only respond with the number.")
    with pytest.raises(NoCandidatesError):
        build_cta_prompt([])


def test_heuristic_prefers_buttons_over_footer_links():
    markup = ('<a href="https://x.example/privacy">Privacy policy</a>'
              '<a href="https://x.example/help">Help</a>'
              '<a class="button" href="https://x.example/go">Continue</a>')
    assert heuristic_cta(enumerate_links(markup)) == 3


def test_reply_parsing():
    assert [parse_cta_reply(r, 3) for r in ("2", " (3) ", "1.", "seven", "9", "0", None)] == [
        2, 3, 1, None, None, None, None]


def test_selector_fallbacks():
    safe = sanitize(HOSTILE)
    cands = enumerate_links(safe, "https://mail.example.com/")
    assert select_cta(safe, cands, lambda p, s, d: "2") == 2
    assert select_cta(safe, cands, lambda p, s, d: "seven") == 1

    def broken(*args):
        raise RuntimeError("model down")

    assert select_cta(safe, cands, broken) == 1


def test_parse_eml_html():
    doc = parse_eml(eml(HOSTILE, extra="Content-Base: https://mail.example.com/\n"))
    assert doc.subject == "Action needed" and doc.from_address == "alerts@northwind-bank.com"
    assert doc.base_url == "https://mail.example.com/"
    assert doc.body_html and doc.body_text is None


@pytest.mark.parametrize("data,exc", [
    (b"", ParseError),
    (b"not an email at all", ParseError),
    (b"Subject: x", ParseError),
    (b"Subject: x\n\n   \n", EmptyBodyError),
])
def test_parse_eml_errors(data, exc):
    with pytest.raises(exc):
        parse_eml(data)


def test_preprocess_end_to_end(tmp_path):
    result = preprocess(eml(HOSTILE, extra="Content-Base: https://mail.example.com/\n"))
    assert result.cta_index == 1
    assert result.context.target_url == "https://mail.example.com/reset"
    assert "Reset password" in result.context.lure_body_text
    out = json.loads(write_context(result, tmp_path / "ctx.json").read_text())
    assert out["format"] == "context.v1" and out["cta_index"] == 1 and out["removals"]["script"] == 1


def test_plain_text_email_links():
    result = preprocess(eml("Pay now at https://pay.example.net/inv?id=3.", "text/plain"))
    assert result.context.target_url == "https://pay.example.net/inv?id=3"
    assert preprocess(eml("no links here", "text/plain")).context is None


def test_html_to_text_blocks():
    assert html_to_text("<p>a</p><p>b<br>c</p>").split() == ["a", "b", "c"]


def test_persona_file_roundtrip(tmp_path):
    p = Persona(full_name="Carol Test", password="pw-123456")
    path = tmp_path / "persona.txt"
    path.write_text("# synthetic\n" + persona_text(p))
    assert load_persona(path) == p
    assert parse_persona("email: c@d.example\n").email == "c@d.example"
    with pytest.raises(ParseError):
        parse_persona("shoe_size: 9")
    with pytest.raises(ParseError):
        parse_persona("email: \n")
