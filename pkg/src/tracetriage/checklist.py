"""ATT&CK technique definitions, checklist profiles and the verdict schema.

The citation validator enforces that any positive finding cites an artifact
that actually exists in the bundle: ``resource:<id>``, ``net:<seq>`` or
``frame:<t_rel>``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources as importlib_resources
from typing import Mapping, Optional, Sequence

from .bundle import EvidenceBundle, to_micros
from .errors import DuplicateTechniqueError, SchemaError, UnknownProfileError

TECHNIQUE_ID = re.compile(r"T\d{4}(\.\d{3})?")
PROFILE_NAMES = ("minimal", "standard", "comprehensive")
STATUSES = ("confirmed", "suspicious", "not_observed")
CONFIDENCES = ("high", "medium", "low")
CITATION = re.compile(r"(resource|net|frame):(.+)")
_DECIMAL = re.compile(r"\d+(\.\d+)?")


@dataclass(frozen=True)
class TechniqueDef:
    technique_id: str
    name: str
    guidance: str
    oracle_rule: Optional[str] = None


@dataclass(frozen=True)
class ChecklistProfile:
    name: str
    technique_ids: tuple

    def __len__(self):
        return len(self.technique_ids)

    def __iter__(self):
        return iter(self.technique_ids)


# -- definition files --------------------------------------------------------

def load_techniques(document) -> list[TechniqueDef]:
    """Parse a ``techniques.v1`` document (JSON text or already-decoded data)."""
    data = json.loads(document) if isinstance(document, (str, bytes)) else document
    if isinstance(data, dict):
        if data.get("format", "techniques.v1") != "techniques.v1":
            raise SchemaError(f"unsupported format {data.get('format')!r}")
        data = data.get("techniques")
    if not isinstance(data, list):
        raise SchemaError("techniques document must hold a list of definitions")
    seen = set()
    defs = []
    for entry in data:
        if not isinstance(entry, dict):
            raise SchemaError(f"technique entry must be an object, got {entry!r}")
        tid = entry.get("technique_id")
        if not isinstance(tid, str) or not TECHNIQUE_ID.fullmatch(tid):
            raise SchemaError(f"bad technique id {tid!r}")
        if tid in seen:
            raise DuplicateTechniqueError(f"technique {tid} defined twice")
        seen.add(tid)
        name, guidance = entry.get("name"), entry.get("guidance")
        if not isinstance(name, str) or not name or not isinstance(guidance, str):
            raise SchemaError(f"technique {tid} needs a name and guidance text")
        rule = entry.get("oracle_rule")
        if rule is not None and not isinstance(rule, str):
            raise SchemaError(f"technique {tid}: oracle_rule must be a string or null")
        defs.append(TechniqueDef(tid, name, guidance, rule))
    return defs


def load_profiles(document, techniques: Optional[Sequence[TechniqueDef]] = None) -> dict[str, ChecklistProfile]:
    """Parse a ``profiles.v1`` document and check the profiles nest."""
    data = json.loads(document) if isinstance(document, (str, bytes)) else document
    if isinstance(data, dict) and "profiles" in data:
        data = data["profiles"]
    if not isinstance(data, dict):
        raise SchemaError("profiles document must map names to id lists")
    known = None if techniques is None else {t.technique_id for t in techniques}
    profiles = {}
    for name, ids in data.items():
        if not isinstance(ids, list) or len(set(ids)) != len(ids):
            raise SchemaError(f"profile {name!r} must be a list of distinct ids")
        for tid in ids:
            if not isinstance(tid, str) or not TECHNIQUE_ID.fullmatch(tid):
                raise SchemaError(f"profile {name!r}: bad technique id {tid!r}")
            if known is not None and tid not in known:
                raise SchemaError(f"profile {name!r} references undefined technique {tid}")
        profiles[name] = ChecklistProfile(name, tuple(ids))
    present = [n for n in PROFILE_NAMES if n in profiles]
    for smaller, larger in zip(present, present[1:]):
        if not set(profiles[smaller].technique_ids) <= set(profiles[larger].technique_ids):
            raise SchemaError(f"profile {smaller!r} is not contained in {larger!r}")
    return profiles


def _data_text(name: str) -> str:
    return importlib_resources.files("tracetriage").joinpath("data").joinpath(name).read_text(encoding="utf-8")


@lru_cache(maxsize=None)
def _default_techniques() -> tuple:
    return tuple(load_techniques(_data_text("techniques.v1.json")))


def default_techniques() -> list[TechniqueDef]:
    return list(_default_techniques())


@lru_cache(maxsize=None)
def default_profiles() -> Mapping[str, ChecklistProfile]:
    return load_profiles(_data_text("profiles.v1.json"), _default_techniques())


def technique_index(techniques: Optional[Sequence[TechniqueDef]] = None) -> dict[str, TechniqueDef]:
    return {t.technique_id: t for t in (techniques if techniques is not None else _default_techniques())}


def resolve_profile(name, profiles: Optional[Mapping[str, ChecklistProfile]] = None) -> ChecklistProfile:
    if isinstance(name, ChecklistProfile):
        return name
    profiles = default_profiles() if profiles is None else profiles
    try:
        return profiles[name]
    except (KeyError, TypeError):
        raise UnknownProfileError(f"unknown profile {name!r}") from None


# -- verdicts ----------------------------------------------------------------

@dataclass(frozen=True)
class EvidenceItem:
    source: str
    observation: str
    relevance: str = ""

    def to_dict(self) -> dict:
        return {"source": self.source, "observation": self.observation, "relevance": self.relevance}


@dataclass(frozen=True)
class TechniqueVerdict:
    """Per-technique finding.

    Construction does not validate; :func:`validate_verdict` does, so the
    object can carry malformed backend output through to rejection.
    """

    technique_id: str
    status: str
    confidence: str
    evidence: tuple = ()
    degraded: bool = False
    error: Optional[str] = None

    def to_dict(self) -> dict:
        out = {
            "technique_id": self.technique_id,
            "status": self.status,
            "confidence": self.confidence,
            "evidence": [e.to_dict() for e in self.evidence],
        }
        if self.degraded:
            out["degraded"] = True
        if self.error:
            out["error"] = self.error
        return out

    @classmethod
    def from_dict(cls, data: Mapping, technique_id: Optional[str] = None) -> "TechniqueVerdict":
        """Build a verdict from decoded JSON; raises SchemaError on structural problems."""
        if not isinstance(data, Mapping):
            raise SchemaError("verdict must be a JSON object")
        evidence = data.get("evidence", [])
        if not isinstance(evidence, list):
            raise SchemaError("evidence must be a list")
        items = []
        for item in evidence:
            if not isinstance(item, Mapping):
                raise SchemaError("evidence entries must be objects")
            src, obs, rel = item.get("source"), item.get("observation"), item.get("relevance", "")
            if not all(isinstance(x, str) for x in (src, obs, rel)):
                raise SchemaError("evidence source, observation and relevance must be strings")
            items.append(EvidenceItem(src, obs, rel))
        status, confidence = data.get("status"), data.get("confidence")
        if not isinstance(status, str) or not isinstance(confidence, str):
            raise SchemaError("status and confidence must be strings")
        return cls(
            technique_id=technique_id or data.get("technique_id", ""),
            status=status,
            confidence=confidence,
            evidence=tuple(items),
            degraded=bool(data.get("degraded", False)),
            error=data.get("error"),
        )

    @property
    def positive(self) -> bool:
        return self.status in ("confirmed", "suspicious") and not self.degraded


def degraded_verdict(technique_id: str, error: Optional[str] = None) -> TechniqueVerdict:
    return TechniqueVerdict(technique_id, "not_observed", "low", (), degraded=True, error=error)


@dataclass(frozen=True)
class ValidationResult:
    accepted: bool
    reasons: tuple = field(default_factory=tuple)

    def __bool__(self):
        return self.accepted

    @property
    def codes(self) -> set:
        return {code for code, _ in self.reasons}

    def describe(self) -> str:
        return "; ".join(f"{code}: {detail}" for code, detail in self.reasons)


def parse_citation(source) -> Optional[tuple[str, str]]:
    if not isinstance(source, str):
        return None
    m = CITATION.fullmatch(source.strip())
    return (m.group(1), m.group(2)) if m else None


def resolve_citation(source, bundle: EvidenceBundle) -> Optional[str]:
    """None if ``source`` resolves in ``bundle``, else a reason code."""
    parsed = parse_citation(source)
    if parsed is None:
        return "BAD_CITATION"
    scheme, value = parsed
    if scheme == "resource":
        return None if value in bundle.resources else "DANGLING_CITATION"
    if scheme == "net":
        if not value.isdigit():
            return "BAD_CITATION"
        return None if bundle.record(int(value)) is not None else "DANGLING_CITATION"
    if not _DECIMAL.fullmatch(value):
        return "BAD_CITATION"
    us = to_micros(float(value))
    return None if 0 <= us <= to_micros(bundle.session_end) else "DANGLING_CITATION"


def validate_verdict(v, bundle: EvidenceBundle, technique_id: Optional[str] = None) -> ValidationResult:
    """Accept ``v`` only if it is schema-valid and every citation resolves.

    ``v`` may be a :class:`TechniqueVerdict` or raw decoded JSON. Citations
    are resolved for every status, including ``not_observed``.
    """
    reasons = []
    if not isinstance(v, TechniqueVerdict):
        try:
            v = TechniqueVerdict.from_dict(v, technique_id)
        except SchemaError as exc:
            return ValidationResult(False, (("BAD_SCHEMA", str(exc)),))
    if not isinstance(v.technique_id, str) or not TECHNIQUE_ID.fullmatch(v.technique_id):
        reasons.append(("BAD_SCHEMA", f"bad technique id {v.technique_id!r}"))
    elif technique_id is not None and v.technique_id != technique_id:
        reasons.append(("WRONG_TECHNIQUE", f"expected {technique_id}, got {v.technique_id}"))
    if v.status not in STATUSES:
        reasons.append(("BAD_STATUS", f"status {v.status!r} not in {STATUSES}"))
    if v.confidence not in CONFIDENCES:
        reasons.append(("BAD_CONFIDENCE", f"confidence {v.confidence!r} not in {CONFIDENCES}"))
    if not isinstance(v.evidence, tuple) or not all(isinstance(e, EvidenceItem) for e in v.evidence):
        reasons.append(("BAD_SCHEMA", "evidence must be EvidenceItem entries"))
        return ValidationResult(False, tuple(reasons))
    if v.status != "not_observed" and not v.evidence:
        reasons.append(("UNCITED", "a positive finding needs at least one citation"))
    for item in v.evidence:
        if not isinstance(item.observation, str) or not item.observation.strip():
            reasons.append(("EMPTY_OBSERVATION", f"citation {item.source!r} has no observation"))
        if not isinstance(item.relevance, str):
            reasons.append(("BAD_SCHEMA", "relevance must be a string"))
        problem = resolve_citation(item.source, bundle)
        if problem:
            reasons.append((problem, f"{item.source!r} does not resolve"))
    return ValidationResult(not reasons, tuple(reasons))
