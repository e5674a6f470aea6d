"""scikit-learn shaped wrappers around the email preprocessor and the checklist run.

Only the estimator protocol is borrowed (``get_params``/``set_params``,
``fit``/``predict``/``transform``, ``clone``). Nothing here learns from data:
``fit`` validates parameters and records the label set.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .adjudicator import DEFAULT_POLICY, DEFAULT_RETRY_LIMIT, DEFAULT_TOOL_BUDGET, POLICIES, RemoteConfig, \
    remote_backend, run_checklist
from .checklist import resolve_profile
from .errors import UnknownPolicyError
from .oracle import OracleBackend
from .preprocessor import preprocess


def make_backend(backend, max_tool_calls=None):
    """``"oracle"``, a :class:`RemoteConfig`, or any object with ``adjudicate``."""
    budget = max_tool_calls or DEFAULT_TOOL_BUDGET
    if backend == "oracle":
        return OracleBackend(budget)
    if isinstance(backend, RemoteConfig):
        return remote_backend(backend, budget)
    if hasattr(backend, "adjudicate"):
        return backend
    raise ValueError(f"unknown backend {backend!r}")


class TriageClassifier(ClassifierMixin, BaseEstimator):
    """Classify sealed evidence bundles by running the technique checklist.

    ``predict`` can return ``"blocked"`` or ``"error"`` in addition to the two
    classes in ``classes_``; those slots are excluded by the evaluation harness.
    """

    def __init__(self, profile="comprehensive", policy=DEFAULT_POLICY, backend="oracle",
                 retry_limit=DEFAULT_RETRY_LIMIT, max_tool_calls=None, parallelism=1):
        self.profile = profile
        self.policy = policy
        self.backend = backend
        self.retry_limit = retry_limit
        self.max_tool_calls = max_tool_calls
        self.parallelism = parallelism

    def fit(self, X, y=None):
        resolve_profile(self.profile)
        if self.policy not in POLICIES:
            raise UnknownPolicyError(f"unknown policy {self.policy!r}")
        self.backend_ = make_backend(self.backend, self.max_tool_calls)
        self.classes_ = np.array(["benign", "phishing"])
        return self

    def adjudicate(self, X):
        """Full :class:`AdjudicationRun` per bundle, in input order."""
        if not hasattr(self, "backend_"):
            self.fit(X)
        return [run_checklist(b, self.profile, self.backend_, self.policy, retry_limit=self.retry_limit,
                              max_tool_calls=self.max_tool_calls, parallelism=self.parallelism) for b in X]

    def predict(self, X):
        return np.array([run.prediction for run in self.adjudicate(X)], dtype=object)


class EmailPreprocessor(TransformerMixin, BaseEstimator):
    """Raw ``.eml`` bytes to :class:`Preprocessed` records (sanitized body, links, CTA, context)."""

    def __init__(self, persona=None, backend="heuristic", time_budget_s=60.0):
        self.persona = persona
        self.backend = backend
        self.time_budget_s = time_budget_s

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        return [preprocess(data, self.persona, self.backend, self.time_budget_s) for data in X]
