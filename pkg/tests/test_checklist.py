import pytest

from tracetriage.checklist import (CONFIDENCES, PROFILE_NAMES, EvidenceItem, TechniqueVerdict, default_profiles,
                                   default_techniques, degraded_verdict, load_profiles, load_techniques,
                                   parse_citation, resolve_citation, resolve_profile, validate_verdict)
from tracetriage.errors import DuplicateTechniqueError, SchemaError, UnknownProfileError


def verdict(status="confirmed", confidence="high", *sources, tid="T1056.002"):
    return TechniqueVerdict(tid, status, confidence, tuple(EvidenceItem(s, "seen") for s in sources))


def test_profiles_nest_and_sizes():
    p = default_profiles()
    sizes = [len(p[n]) for n in PROFILE_NAMES]
    assert sizes == [7, 12, 14]
    for small, big in zip(PROFILE_NAMES, PROFILE_NAMES[1:]):
        assert set(p[small]) <= set(p[big])
    assert resolve_profile("minimal") is p["minimal"]
    with pytest.raises(UnknownProfileError):
        resolve_profile("maximal")


def test_every_profile_technique_is_defined():
    ids = {t.technique_id for t in default_techniques()}
    assert set(default_profiles()["comprehensive"]) <= ids


def test_technique_loader_rejects_bad_documents():
    good = {"technique_id": "T1041", "name": "Exfil", "guidance": "look"}
    assert load_techniques([good])[0].name == "Exfil"
    with pytest.raises(DuplicateTechniqueError):
        load_techniques([good, good])
    with pytest.raises(SchemaError):
        load_techniques([{**good, "technique_id": "X1"}])
    with pytest.raises(SchemaError):
        load_techniques({"format": "techniques.v9", "techniques": []})


def test_profile_loader_checks_nesting():
    with pytest.raises(SchemaError, match="not contained"):
        load_profiles({"minimal": ["T1041"], "standard": ["T1027"]})
    with pytest.raises(SchemaError, match="undefined"):
        load_profiles({"minimal": ["T9999"]}, default_techniques())


def test_citation_parsing():
    assert parse_citation("net:3") == ("net", "3")
    assert parse_citation("frame:1.5") == ("frame", "1.5")
    assert parse_citation("url:x") is None
    assert parse_citation(None) is None


def test_citations_resolve(bundle):
    assert resolve_citation("resource:net-0000-response", bundle) is None
    assert resolve_citation("net:2", bundle) is None
    assert resolve_citation("frame:2.0", bundle) is None
    assert resolve_citation("net:3", bundle) == "DANGLING_CITATION"
    assert resolve_citation("resource:nope", bundle) == "DANGLING_CITATION"
    assert resolve_citation("frame:2.5", bundle) == "DANGLING_CITATION"
    assert resolve_citation("net:one", bundle) == "BAD_CITATION"
    assert resolve_citation("frame:-1", bundle) == "BAD_CITATION"


def test_well_formed_verdicts_accepted(bundle):
    assert validate_verdict(verdict("confirmed", "high", "net:1", "frame:0.5"), bundle, "T1056.002")
    assert validate_verdict(verdict("not_observed", "low"), bundle)
    assert validate_verdict({"status": "suspicious", "confidence": "medium",
                             "evidence": [{"source": "resource:net-0002-response", "observation": "eval"}]},
                            bundle, "T1027")


@pytest.mark.parametrize("v,code", [
    (verdict("confirmed", "high"), "UNCITED"),
    (verdict("suspicious", "low"), "UNCITED"),
    (verdict("maybe", "high", "net:0"), "BAD_STATUS"),
    (verdict("confirmed", "certain", "net:0"), "BAD_CONFIDENCE"),
    (verdict("confirmed", "high", "net:99"), "DANGLING_CITATION"),
    (verdict("not_observed", "low", "resource:ghost"), "DANGLING_CITATION"),
    (verdict("confirmed", "high", "http://x"), "BAD_CITATION"),
    (verdict("confirmed", "high", "net:0", tid="T12"), "BAD_SCHEMA"),
])
def test_malformed_verdicts_rejected(bundle, v, code):
    result = validate_verdict(v, bundle)
    assert not result
    assert code in result.codes


def test_wrong_technique_and_schema(bundle):
    assert "WRONG_TECHNIQUE" in validate_verdict(verdict("not_observed", "low"), bundle, "T1041").codes
    assert "BAD_SCHEMA" in validate_verdict({"status": 1, "confidence": "high"}, bundle, "T1041").codes
    assert "BAD_SCHEMA" in validate_verdict({"status": "confirmed", "confidence": "high", "evidence": "net:0"},
                                            bundle, "T1041").codes
    empty_obs = TechniqueVerdict("T1041", "confirmed", "high", (EvidenceItem("net:0", "  "),))
    assert "EMPTY_OBSERVATION" in validate_verdict(empty_obs, bundle).codes


def test_degraded_verdict_shape():
    v = degraded_verdict("T1041", error="timeout")
    assert v.degraded and not v.positive and v.status == "not_observed" and v.confidence in CONFIDENCES
    assert v.to_dict()["error"] == "timeout"
    assert TechniqueVerdict.from_dict(v.to_dict()) == v
