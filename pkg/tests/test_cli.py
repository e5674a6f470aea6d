import json

import pytest

from tracetriage.cli import main, pick_kind

EML = """From: Security <alerts@paypa1-support.top>
To: you@example.com
Subject: Verify your account
Content-Type: text/html; charset=utf-8

<p>Your account is limited.</p><a class="btn" href="https://paypal.com-account-verify.top/login">Verify now</a>
"""


def run_cli(*args):
    return main([str(a) for a in args])


def test_simulate_adjudicate_report(tmp_path, capsys):
    assert run_cli("simulate", "--kind", "harvester", "--seed", 3, "--out", tmp_path / "b") == 0
    truth = json.loads(capsys.readouterr().out)
    assert truth["label"] == "phishing"
    assert run_cli("adjudicate", "--bundle", tmp_path / "b", "--profile", "comprehensive", "--backend", "oracle",
                   "--policy", "any-confirmed", "--out", tmp_path / "run.json") == 0
    assert capsys.readouterr().out.split("\t")[1] == "phishing"
    assert run_cli("report", "--run", tmp_path / "run.json", "--bundle", tmp_path / "b", "--writer", "template",
                   "--out", tmp_path / "r.md") == 0
    assert (tmp_path / "r.md").read_text().startswith("## Executive Summary")


def test_corpus_and_eval(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"format": "corpus.v1", "seed": 2, "counts": {"benign": 2, "arith": 2}}))
    assert run_cli("simulate-corpus", "--spec", spec, "--out", tmp_path / "c") == 0
    runs = tmp_path / "runs"
    runs.mkdir()
    for d in sorted((tmp_path / "c").iterdir()):
        if d.is_dir():
            assert run_cli("adjudicate", "--bundle", d, "--out", runs / f"{d.name}.json") == 0
    capsys.readouterr()
    assert run_cli("eval", "--runs", runs, "--truth", tmp_path / "c" / "truth.tsv", "--out", tmp_path / "m.tsv") == 0
    rows = dict(line.split("\t") for line in (tmp_path / "m.tsv").read_text().splitlines()[1:])
    assert (rows["tp"], rows["fp"], rows["blocked"], rows["f1"]) == ("1", "0", "1", "1.0000")


def test_prior_shift(tmp_path):
    assert run_cli("prior-shift", "--tpr", 0.5, "--fpr", 0.1, "--grid", "0.1:0.9:0.4", "--out", tmp_path / "c") == 0
    lines = (tmp_path / "c").read_text().splitlines()
    assert lines[0] == "prevalence\tprecision\trecall\tf1" and len(lines) == 4


def test_ingest_and_triage(tmp_path, capsys):
    eml = tmp_path / "m.eml"
    eml.write_text(EML)
    assert run_cli("ingest-eml", "--in", eml, "--out", tmp_path / "ctx.json") == 0
    ctx = json.loads((tmp_path / "ctx.json").read_text())
    assert ctx["context"]["target_url"] == "https://paypal.com-account-verify.top/login"
    assert run_cli("triage", "--eml", eml, "--backend", "oracle", "--out", tmp_path / "r.md",
                   "--run-out", tmp_path / "run.json") == 0
    assert "**Verdict:** Phishing" in (tmp_path / "r.md").read_text()


def test_pick_kind():
    assert pick_kind("alerts@northwind-bank.com", "https://www.northwind-bank.com/a") == "benign"
    assert pick_kind("alerts@northwind-bank.com", "https://northwind-bank.top/a") == "brand_impersonation"


def test_failures_exit_one(tmp_path, capsys):
    assert run_cli("adjudicate", "--bundle", tmp_path / "missing", "--out", tmp_path / "r.json") == 1
    assert "adjudicate" in capsys.readouterr().err
    assert run_cli("simulate", "--kind", "unicorn", "--out", tmp_path / "x") == 1
    assert run_cli("adjudicate", "--bundle", tmp_path, "--backend", "remote", "--out", tmp_path / "r") == 1


def test_usage_errors_exit_two():
    with pytest.raises(SystemExit) as info:
        main(["simulate", "--kind", "benign", "--mode", "sideways", "--out", "x"])
    assert info.value.code == 2


def test_serve_stdio(tmp_path, monkeypatch):
    import io
    import sys

    from tracetriage.evidence_api import encode_message, read_message

    run_cli("simulate", "--kind", "benign", "--out", tmp_path / "b")
    stdin = io.TextIOWrapper(io.BytesIO(encode_message({"request_id": 1, "method": "get_screenshot",
                                                        "params": {"time": 0.0}})))
    out = io.BytesIO()
    monkeypatch.setattr(sys, "stdin", stdin)
    monkeypatch.setattr(sys, "stdout", io.TextIOWrapper(out))
    assert run_cli("serve", "--bundle", tmp_path / "b", "--listen", "stdio") == 0
    sys.stdout.flush()
    out.seek(0)
    assert read_message(out)["result"]["image_ref"] == "frame-0000"
