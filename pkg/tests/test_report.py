from pathlib import Path

import pytest

from tracetriage.adjudicator import RemoteConfig, run_checklist
from tracetriage.bundle import Persona
from tracetriage.oracle import OracleBackend
from tracetriage.report import (REDACTED, SECTIONS, check_document, extract_iocs, fact_tokens, redact, render,
                                split_sections, synthesize, ungrounded)
from tracetriage.simulator import make_script, run_scenario

from chatstub import ChatServer, content_reply

GOLDEN = Path(__file__).parent / "golden" / "harvester_report.md"


def report_for(kind, seed=3, **kw):
    bundle, truth = run_scenario(make_script(kind, seed, **kw))
    run = run_checklist(bundle, "comprehensive", OracleBackend())
    return bundle, run, render(synthesize(run, bundle))


@pytest.fixture(scope="module")
def harvest():
    return report_for("logoless_harvester")


def test_golden(harvest):
    assert harvest[2] == GOLDEN.read_text(encoding="utf-8")


def test_seven_sections_only(harvest):
    text = harvest[2]
    assert [t for t, _ in split_sections(text)] == list(SECTIONS)
    assert [line for line in text.splitlines() if line.startswith("#") and not line.startswith("## ")] == []


def test_iocs_only_from_cited_evidence(harvest):
    bundle, run, _ = harvest
    iocs = extract_iocs(run, bundle)
    assert [i.ioc_id for i in iocs] == [f"IOC-{n}" for n in range(1, len(iocs) + 1)]
    cited = {e.source for v in run.verdicts for e in v.evidence}
    assert all(set(i.citations) <= cited for i in iocs)
    assert {"collect.evil.example"} <= {i.value for i in iocs}


def test_timeline_refers_to_ioc_ids(harvest):
    text = harvest[2]
    body = dict(split_sections(text))
    assert "IOC-" in body["Timeline (UTC)"]
    assert "https://" not in body["Timeline (UTC)"]


def test_password_never_rendered(harvest):
    bundle, _, text = harvest
    assert bundle.context.persona.password not in text


def test_redact_variants():
    p = Persona(card_number="4111 1111 1111 1111")
    assert redact("card 4111111111111111 and 4111 1111 1111 1111", p) == f"card {REDACTED} and {REDACTED}"


def test_benign_report():
    bundle, run, text = report_for("benign")
    assert "**Verdict:** Safe" in text
    assert check_document(text, run, bundle) == []


def test_blocked_report_is_inconclusive():
    bundle, run, text = report_for("slider", loop_count="pass")
    assert run.status == "blocked"
    assert "Inconclusive (Blocked)" in text
    assert check_document(text, run, bundle) == []


def test_error_report_is_inconclusive(harvest):
    from tracetriage.errors import BackendError

    class Down:
        def adjudicate(self, brief, tools):
            raise BackendError("offline")

    bundle, _, _ = harvest
    run = run_checklist(bundle, "minimal", Down())
    text = render(synthesize(run, bundle))
    assert "Inconclusive (Error)" in text
    assert check_document(text, run, bundle) == []


def test_fact_tokenizer_order():
    toks = fact_tokens("see https://a.example/x?y=1 on a.example at 10.0.0.1, T1041 at T+2.5s "
                       + "ab" * 32)
    assert toks["url"] == ["https://a.example/x?y=1"]
    assert toks["domain"] == ["a.example"]
    assert toks["ip"] == ["10.0.0.1"]
    assert toks["technique"] == ["T1041"]
    assert toks["time"] == ["2.5"]
    assert toks["hash"] == ["ab" * 32]


@pytest.mark.parametrize("mutate,problem", [
    (lambda t: t.replace("## IOCs", "## Indicators"), "section headings"),
    (lambda t: t + "\nAlso seen: phish.invented.example\n", "ungrounded domain"),
    (lambda t: t + "\nLater at T+99.5s\n", "ungrounded time"),
    (lambda t: t + "\nT1486 as well\n", "ungrounded technique"),
    (lambda t: t + "\npassword ZK29YcCITMb!\n", "persona secret"),
    (lambda t: t.replace("Block IOC-1", "Block docs-29a13c.share-files.top"), "repeated IOC"),
])
def test_check_document_catches(harvest, mutate, problem):
    bundle, run, text = harvest
    problems = check_document(mutate(text), run, bundle)
    assert any(problem in p for p in problems), problems


def test_ungrounded_accepts_cited_frame_times(harvest):
    bundle, run, _ = harvest
    assert ungrounded("credentials at T+3.853s", run, bundle) == []


def test_remote_writer_accepted_when_grounded(harvest):
    bundle, run, text = harvest
    server = ChatServer([content_reply(text)])
    try:
        report = synthesize(run, bundle, "remote", remote_config=RemoteConfig(server.url, "m"))
    finally:
        server.close()
    assert report.writer == "remote" and render(report) == text


def test_remote_writer_rejected_falls_back(harvest):
    bundle, run, text = harvest
    server = ChatServer([content_reply(text + "\nSee also evil.invented.example\n")])
    try:
        report = synthesize(run, bundle, "remote", remote_config=RemoteConfig(server.url, "m"))
    finally:
        server.close()
    assert report.writer == "template"
    assert any("rejected" in n for n in report.notes)
    assert check_document(render(report), run, bundle) == []


def test_remote_writer_unreachable_or_unconfigured(harvest):
    bundle, run, _ = harvest
    assert "not configured" in synthesize(run, bundle, "remote").notes[0]
    cfg = RemoteConfig("http://127.0.0.1:9", "m", timeout_s=2)
    assert "unreachable" in synthesize(run, bundle, "remote", remote_config=cfg).notes[0]
    with pytest.raises(ValueError):
        synthesize(run, bundle, "poet")
