"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the lines are printed even
without ``-s``) or directly with ``python3 tests/test_acceptance.py``.
"""
from __future__ import annotations

import random
import sys
import threading
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import pytest

from tracetriage.adjudicator import run_checklist
from tracetriage.bundle import (FrameRecord, NetworkRecord, Persona, ResourceStore, SessionContext,
                                assemble_bundle, parse_bundle, seal, serialize_bundle, verify)
from tracetriage.checklist import EvidenceItem, TechniqueVerdict, validate_verdict
from tracetriage.errors import TriageError
from tracetriage.evidence_api import LocalClient, SocketClient, ToolServer, serve
from tracetriage.harness import cost_quantiles, parse_grid, prf, prior_shift
from tracetriage.oracle import OracleBackend
from tracetriage.report import check_document, render, synthesize
from tracetriage.simulator import KINDS, arithmetic_gate, build_corpus, make_script, run_scenario, solve_gate
from tracetriage.timeline import dual_seek

GOLDEN = Path(__file__).parent / "golden" / "harvester_report.md"

# 60 bundles over all eight kinds; gated kinds get enough slots to cycle their variants.
CORPUS_COUNTS = {
    "benign": 12, "brand_impersonation": 7, "logoless_harvester": 7, "noncrp_crypto": 7,
    "gated_arith": 8, "gated_slider_loop": 7, "progressive_chat": 6, "legit_service_abuse": 6,
}
CORPUS_SEED = 2026


_reporter = None


@pytest.fixture(autouse=True)
def _terminal(pytestconfig):
    global _reporter
    _reporter = pytestconfig.pluginmanager.get_plugin("terminalreporter")


def announce(line: str) -> None:
    # Output capture swallows stdout at the fd level; the terminal reporter is not captured.
    if _reporter is not None:
        _reporter.ensure_newline()
        _reporter.write_line(line)
    else:
        print(line, flush=True)


@contextmanager
def criterion(n: int, title: str):
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        announce(f"CRITERION {n} FAIL  {title}: {type(exc).__name__}: {exc}".rstrip())
        raise
    announce(f"CRITERION {n} PASS  {title} ({time.perf_counter() - start:.2f}s)")


@pytest.fixture(scope="module")
def corpus_runs():
    corpus = build_corpus(CORPUS_COUNTS, CORPUS_SEED)
    backend = OracleBackend()
    start = time.perf_counter()
    runs = [run_checklist(b, "comprehensive", backend) for b, _ in corpus]
    return corpus, runs, time.perf_counter() - start


# -- 1 ----------------------------------------------------------------------------

TABLE_ROWS = [  # (precision, recall, published F1)
    (1.0000, 0.6765, 0.8070), (0.9375, 0.6522, 0.7692),
    (1.0000, 0.1471, 0.2564), (1.0000, 0.0882, 0.1622), (0.8000, 0.1176, 0.2051),
    (0.4545, 0.1087, 0.1754), (0.3333, 0.0652, 0.1091), (0.3636, 0.0870, 0.1404),
]


def test_criterion_1_metric_reproduction():
    with criterion(1, "F1 reproduced from published (P, R) pairs within 1e-4"):
        assert abs(prf(precision=0.94, recall=0.7769).f1 - 0.8507) <= 1e-4
        for p, r, f1 in TABLE_ROWS:
            got = prf(precision=p, recall=r).f1
            assert abs(got - f1) <= 1e-4, f"P={p} R={r}: {got:.6f} != {f1}"


# -- 2 ----------------------------------------------------------------------------

def test_criterion_2_prior_shift_fixed_point():
    with criterion(2, "prior shift at the evaluation prevalence reproduces P and F1; P monotone in prevalence"):
        tpr = 0.7769
        fpr = 12 / 467
        point = prior_shift(tpr, fpr, 241 / 708)
        assert abs(point.precision - 0.94) <= 0.01, point.precision
        assert abs(point.f1 - 0.8507) <= 0.002, point.f1
        grid = parse_grid("0.01:0.99:0.01")
        assert len(grid) == 99
        precisions = [prior_shift(tpr, fpr, pi).precision for pi in grid]
        assert all(a < b for a, b in zip(precisions, precisions[1:]))


# -- 3 ----------------------------------------------------------------------------

EPOCH_US = 1_767_225_600 * 1_000_000


def random_session(rng: random.Random, epoch_us: int):
    """A session with integer-microsecond times, plus its raw relative times for the brute-force oracle."""
    n_net = rng.randint(1, 25)
    rel_net = sorted([0] + [rng.randint(0, 6_000_000) for _ in range(n_net - 1)])
    # Collisions on window edges are the interesting cases: snap some times to 0.5 s multiples.
    rel_net = sorted(r - r % 500_000 if rng.random() < 0.3 else r for r in rel_net)
    n_frames = rng.randint(0, 15)
    rel_frames = sorted(set(rng.randint(0, 6_000_000) for _ in range(n_frames)))
    network = [NetworkRecord(seq=i, started_at=(epoch_us + r) / 1e6, duration_ms=1.0, method="GET",
                             url=f"https://h{i}.example/", host=f"h{i}.example", status=200)
               for i, r in enumerate(rel_net)]
    frames = [FrameRecord(i, r / 1e6, f"f{i}") for i, r in enumerate(rel_frames)]
    ctx = SessionContext("s", "b", "a@b.example", "https://h0.example/", Persona())
    bundle = assemble_bundle("rand", network, frames, [], ResourceStore(), ctx, session_end=6.0)
    return bundle, rel_net, rel_frames


def brute_force(rel_net, rel_frames, t_us):
    lo, hi = max(0, t_us - 500_000), t_us + 500_000
    burst = [i for i, r in enumerate(rel_net) if lo <= r <= hi]
    frame = None
    for i, r in enumerate(rel_frames):
        if r <= t_us:
            frame = i
    return frame, burst


def seek_signature(bundle, t):
    res = dual_seek(bundle, t)
    return (res.frame.frame_no if res.frame else None), [rec.seq for rec in res.network_burst]


def test_criterion_3_temporal_oracle_equivalence():
    with criterion(3, "dual_seek equals the linear-scan oracle over 10^4 sessions; epoch-shift invariant"):
        rng = random.Random(3)
        start = time.perf_counter()
        for _ in range(10_000):
            bundle, rel_net, rel_frames = random_session(rng, EPOCH_US + rng.randint(0, 10**12))
            t_us = rng.choice([rng.randint(0, 6_000_000), rng.choice(rel_net) + rng.choice([-500_000, 500_000, 0])])
            t_us = min(max(t_us, 0), 6_000_000)
            assert seek_signature(bundle, t_us / 1e6) == brute_force(rel_net, rel_frames, t_us)
        for _ in range(1_000):
            seed = rng.random()
            t_us = rng.randint(0, 6_000_000)
            a = random_session(random.Random(seed), EPOCH_US)[0]
            b = random_session(random.Random(seed), EPOCH_US + rng.randint(-10**12, 10**12))[0]
            assert seek_signature(a, t_us / 1e6) == seek_signature(b, t_us / 1e6)
        assert time.perf_counter() - start < 10


# -- 4 ----------------------------------------------------------------------------

def fuzz_bundle():
    store = ResourceStore()
    for rid in ("net-0000-response", "net-0003-response", "frame-0000"):
        store.add(rid, "other", rid.encode())
    network = [NetworkRecord(i, EPOCH_US / 1e6 + i, 1.0, "GET", "https://x.example/", "x.example", 200)
               for i in range(5)]
    ctx = SessionContext("s", "b", "a@b.example", "https://x.example/", Persona())
    bundle = assemble_bundle("fuzz", network, [FrameRecord(0, 0.0, "frame-0000")], [], store, ctx, session_end=8.0)
    seal(bundle)
    return bundle


GOOD_SOURCES = ["net:0", "net:4", "resource:net-0000-response", "resource:frame-0000", "frame:0", "frame:7.5",
                "frame:8.0", "net:2"]
BAD_SOURCES = ["net:5", "net:99", "net:-1", "resource:ghost", "resource:", "frame:8.01", "frame:-0.5",
               "frame:abc", "url:https://x.example/", "", "net:1.5", "resource net-0000-response", "NET:0"]


def corrupt(rng: random.Random):
    tid = rng.choice(["T1041", "T1566.002", "T1027"])
    status = rng.choice(["confirmed", "suspicious", "not_observed"])
    confidence = rng.choice(["high", "medium", "low"])
    sources = [rng.choice(GOOD_SOURCES) for _ in range(rng.randint(1, 3))]
    kind = rng.randrange(6)
    if kind == 0:
        status = rng.choice(["Confirmed", "yes", "", "positive", "not observed", "maybe"])
    elif kind == 1:
        confidence = rng.choice(["HIGH", "certain", "", "0.9", "med"])
    elif kind == 2:
        sources.insert(rng.randrange(len(sources) + 1), rng.choice(BAD_SOURCES))
    elif kind == 3:
        status, sources = rng.choice(["confirmed", "suspicious"]), []
    elif kind == 4:
        tid = rng.choice(["T104", "t1041", "T1041.1", "1041", "", "T1041.0022"])
    else:
        return {"status": status, "confidence": confidence,
                "evidence": rng.choice(["net:0", [{"source": "net:0"}], [["net:0", "x"]], None])}
    return TechniqueVerdict(tid, status, confidence, tuple(EvidenceItem(s, "observed") for s in sources))


def test_criterion_4_citation_protocol_soundness():
    with criterion(4, "10^4 malformed verdicts all rejected; well-formed cited verdicts all accepted"):
        bundle = fuzz_bundle()
        rng = random.Random(4)
        start = time.perf_counter()
        accepted = [v for v in (corrupt(rng) for _ in range(10_000))
                    if validate_verdict(v, bundle, None if isinstance(v, TechniqueVerdict) else "T1041")]
        assert accepted == [], f"{len(accepted)} malformed verdicts accepted, e.g. {accepted[:1]}"
        for _ in range(2_000):
            status = rng.choice(["confirmed", "suspicious", "not_observed"])
            n = rng.randint(0 if status == "not_observed" else 1, 4)
            v = TechniqueVerdict("T1041", status, rng.choice(["high", "medium", "low"]),
                                 tuple(EvidenceItem(rng.choice(GOOD_SOURCES), "observed") for _ in range(n)))
            assert validate_verdict(v, bundle, "T1041"), v
        assert time.perf_counter() - start < 10


# -- 5 ----------------------------------------------------------------------------

def test_criterion_5_end_to_end_oracle_run(corpus_runs):
    with criterion(5, "60-bundle corpus over 8 kinds: P = R = 1 on non-blocked, blocked reported as blocked"):
        corpus, runs, elapsed = corpus_runs
        assert len(corpus) == 60
        assert {t.kind for _, t in corpus} == set(KINDS)
        tp = fp = fn = 0
        for (bundle, truth), run in zip(corpus, runs):
            if truth.blocked:
                assert run.prediction == "blocked", truth.bundle_id
                continue
            assert run.prediction in ("phishing", "benign"), (truth.bundle_id, run.prediction)
            positive = {v.technique_id for v in run.verdicts if v.positive}
            assert positive == set(truth.techniques), truth.bundle_id
            tp += run.prediction == "phishing" and truth.label == "phishing"
            fp += run.prediction == "phishing" and truth.label == "benign"
            fn += run.prediction == "benign" and truth.label == "phishing"
        assert tp > 0 and fp == 0 and fn == 0
        assert sum(t.blocked for _, t in corpus) > 0
        assert elapsed < 60


# -- 6 ----------------------------------------------------------------------------

def test_criterion_6_immutability():
    with criterion(6, "100 single-byte mutations detected; request storms leave digests unchanged"):
        bundle, _ = run_scenario(make_script("brand_impersonation", 6))
        digest = bundle.manifest_hash
        data = serialize_bundle(bundle)
        rng = random.Random(6)
        for _ in range(100):
            mutated = bytearray(data)
            i = rng.randrange(len(mutated))
            mutated[i] = (mutated[i] + rng.randint(1, 255)) % 256
            try:
                candidate = parse_bundle(bytes(mutated))
            except TriageError:
                continue
            assert not verify(candidate, digest), f"mutation at byte {i} went unnoticed"

        server = ToolServer(bundle)
        local = LocalClient(server)
        methods = [("get_session", lambda: {"time": rng.uniform(-1, bundle.session_end + 1)}),
                   ("get_session", lambda: {"filter": rng.choice(["host:evil", "status:2xx", "bad"])}),
                   ("get_screenshot", lambda: {"time": rng.uniform(-1, bundle.session_end + 1)}),
                   ("retrieve_resource", lambda: {"prefix": rng.choice(["net-", "frame-", "", "x"])}),
                   ("delete_resource", lambda: {"prefix": "net-"})]
        for _ in range(1_000):
            name, params = rng.choice(methods)
            local.request(name, params())
        errors = []
        with serve(bundle) as handle:
            def storm(k):
                try:
                    with SocketClient(handle.address) as client:
                        for i in range(10):
                            name, params = methods[(k + i) % len(methods)]
                            reply = client.request(name, params(), request_id=f"{k}-{i}")
                            assert reply["request_id"] == f"{k}-{i}"
                except Exception as exc:
                    errors.append(exc)
            threads = [threading.Thread(target=storm, args=(k,)) for k in range(10)]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
        assert not errors, errors[:1]
        assert verify(bundle, digest) and seal(bundle) == digest


# -- 7 ----------------------------------------------------------------------------

def test_criterion_7_gate_semantics():
    with criterion(7, "gate answers 8+7->15, 5-1->6 (symbol), 7+7->77 (literal); outcomes follow"):
        cases = [((8, "+", 7), "none", "15", True), ((5, "-", 1), "symbol", "6", False),
                 ((7, "+", 7), "literal", "77", False)]
        for (a, op, b), mode, answer, solved in cases:
            gate = arithmetic_gate(a, op, b)
            result = solve_gate(gate, mode)
            assert (result.answer, result.solved) == (answer, solved)
            bundle, truth = run_scenario(make_script("gated_arith", 1, gate=gate), mode=mode)
            assert truth.blocked is (not solved)
            assert bundle.outcome == ("completed" if solved else "blocked")
            typed = [ev.payload["text"] for ev in bundle.actions if ev.kind == "type" and ev.payload["target"] == "captcha"]
            assert typed[0] == answer
            run = run_checklist(bundle, "comprehensive", OracleBackend())
            assert run.prediction == ("phishing" if solved else "blocked")


# -- 8 ----------------------------------------------------------------------------

def test_criterion_8_report_grounding(corpus_runs):
    with criterion(8, "every corpus report grounded, seven sections, no persona secrets; golden matches"):
        corpus, runs, _ = corpus_runs
        for (bundle, truth), run in zip(corpus, runs):
            text = render(synthesize(run, bundle))
            assert check_document(text, run, bundle) == [], truth.bundle_id
            for secret in bundle.context.persona.secrets().values():
                assert secret not in text and "".join(secret.split()) not in text
        bundle, _ = run_scenario(make_script("logoless_harvester", 3))
        run = run_checklist(bundle, "comprehensive", OracleBackend())
        assert render(synthesize(run, bundle)).encode("utf-8") == GOLDEN.read_bytes()


# -- 9 ----------------------------------------------------------------------------

def test_criterion_9_cost_accounting():
    with criterion(9, "nearest-rank p50 = 0.04 and p99 = 1.53 exactly"):
        costs = [0.04] * 99 + [1.53]
        random.Random(9).shuffle(costs)
        record = cost_quantiles(costs)
        assert record.quantiles == {"p50": 0.04, "p99": 1.53}
        assert Fraction(str(record.total_at("p50"))).limit_denominator(100) == Fraction(24, 100)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
