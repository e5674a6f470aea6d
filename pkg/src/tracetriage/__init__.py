"""Forensic URL-triage engine over sealed browser-session evidence bundles."""
from .adjudicator import AdjudicationRun, aggregate, adjudicate_technique, read_run, run_checklist, write_run
from .bundle import EvidenceBundle, Persona, SessionContext, assemble_bundle, load_bundle, save_bundle, seal, verify
from .checklist import TechniqueVerdict, resolve_profile, validate_verdict
from .errors import TriageError
from .estimators import EmailPreprocessor, TriageClassifier
from .evidence_api import get_screenshot, get_session, retrieve_resource, serve
from .harness import cost_quantiles, evaluate, prf, prior_shift
from .oracle import OracleBackend
from .preprocessor import preprocess, sanitize
from .report import check_document, render, synthesize
from .simulator import FailureMode, build_corpus, make_script, run_scenario, solve_gate
from .timeline import dual_seek

__version__ = "0.1.0"

__all__ = [
    "AdjudicationRun", "EmailPreprocessor", "EvidenceBundle", "FailureMode", "OracleBackend", "Persona",
    "SessionContext", "TechniqueVerdict", "TriageClassifier", "TriageError", "adjudicate_technique", "aggregate",
    "assemble_bundle", "build_corpus", "check_document", "cost_quantiles", "dual_seek", "evaluate",
    "get_screenshot", "get_session", "load_bundle", "make_script", "preprocess", "prf", "prior_shift",
    "read_run", "render", "resolve_profile", "retrieve_resource", "run_checklist", "run_scenario",
    "sanitize", "save_bundle", "seal", "serve", "solve_gate", "synthesize", "validate_verdict", "verify",
    "write_run",
]
