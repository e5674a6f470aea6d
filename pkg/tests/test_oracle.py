import pytest

from tracetriage.adjudicator import run_checklist
from tracetriage.oracle import (BundleView, OracleBackend, dispatch, email_domain, registrable_domain,
                                shannon_entropy)
from tracetriage.simulator import KINDS, make_script, run_scenario


@pytest.mark.parametrize("host,expected", [
    ("login.paypal.com-account-verify.top", "com-account-verify.top"),
    ("a.b.example.co.uk", "example.co.uk"),
    ("evil.pages.dev", "evil.pages.dev"),
    ("10.0.0.1", "10.0.0.1"),
    ("localhost", "localhost"),
])
def test_registrable_domain(host, expected):
    assert registrable_domain(host) == expected


def test_email_domain():
    assert email_domain("Bank <alerts@Northwind-Bank.com>") == "northwind-bank.com"
    assert email_domain("nobody") == ""


def test_entropy_bounds():
    assert shannon_entropy(b"") == 0
    assert shannon_entropy(b"aaaa") == 0
    assert shannon_entropy(bytes(range(256))) == pytest.approx(8.0)


@pytest.mark.parametrize("kind", KINDS)
def test_direct_and_tool_views_agree(kind):
    bundle, truth = run_scenario(make_script(kind, 5, loop_count=1))
    view = BundleView(bundle)
    direct = {tid for tid in ("T1566.002", "T1204.001", "T1056.002", "T1041", "T1027", "T1189")
              if dispatch(tid, view).positive}
    run = run_checklist(bundle, "comprehensive", OracleBackend())
    via_tools = {v.technique_id for v in run.verdicts if v.positive}
    assert via_tools == direct == set(truth.techniques)
    assert not any(v.degraded for v in run.verdicts)


def test_oracle_verdicts_cite_evidence(brand):
    bundle, _ = brand
    run = run_checklist(bundle, "comprehensive", OracleBackend())
    for v in run.verdicts:
        if v.positive:
            assert v.evidence
            assert all(e.observation for e in v.evidence)


def test_oracle_stays_within_tool_budget(brand):
    bundle, _ = brand
    run = run_checklist(bundle, "comprehensive", OracleBackend(max_tool_calls=12))
    per_technique = {}
    for entry in run.tool_call_log:
        key = entry.request_id.rsplit("/", 1)[0]
        per_technique[key] = per_technique.get(key, 0) + 1
    assert max(per_technique.values()) <= 12
