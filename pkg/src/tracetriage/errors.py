"""Exception hierarchy shared across the triage engine."""


class TriageError(Exception):
    """Base class for every error raised by this package."""


# -- bundle ------------------------------------------------------------------

class ParseError(TriageError, ValueError):
    """Input text could not be parsed.

    ``offset`` is a byte offset for document formats, ``line`` a 1-based line
    number for line-oriented formats. Either may be None.
    """

    def __init__(self, message, *, offset=None, line=None):
        super().__init__(message)
        self.offset = offset
        self.line = line


class MonotonicityError(TriageError, ValueError):
    def __init__(self, frame_no, message=None):
        super().__init__(message or f"frame {frame_no} does not advance in time")
        self.frame_no = frame_no


class MissingResourceError(TriageError, KeyError):
    def __init__(self, resource_id):
        super().__init__(resource_id)
        self.resource_id = resource_id

    def __str__(self):
        return f"resource {self.resource_id!r} not found in store"


class IntegrityError(TriageError):
    """A bundle failed hash verification or references a missing artifact."""


class SealedError(TriageError, AttributeError):
    """Attempt to modify a bundle or store after it was sealed."""


class SkippedEntry(UserWarning):
    """A HAR entry was dropped during ingestion."""


# -- timeline ----------------------------------------------------------------

class NoNetworkError(TriageError, ValueError):
    pass


class PreEpochError(TriageError, ValueError):
    pass


class OutOfSessionError(TriageError, ValueError):
    pass


# -- evidence api ------------------------------------------------------------

class FilterParseError(TriageError, ValueError):
    def __init__(self, clause, reason):
        super().__init__(f"bad filter clause {clause!r}: {reason}")
        self.clause = clause


class NoFrameError(TriageError, LookupError):
    pass


class BadPrefixError(TriageError, ValueError):
    pass


class ToolError(TriageError):
    """Error response received over the tool protocol."""

    def __init__(self, code, message):
        super().__init__(f"[{code}] {message}")
        self.code = code
        self.message = message


# -- checklist ---------------------------------------------------------------

class SchemaError(TriageError, ValueError):
    pass


class DuplicateTechniqueError(SchemaError):
    pass


class UnknownProfileError(TriageError, KeyError):
    pass


class UnknownTechniqueError(TriageError, KeyError):
    pass


# -- adjudicator -------------------------------------------------------------

class BackendError(TriageError):
    """Adjudication backend failed at the transport level."""


class ToolBudgetExceeded(TriageError):
    pass


class UnknownPolicyError(TriageError, KeyError):
    pass


# -- preprocessor ------------------------------------------------------------

class EmptyBodyError(TriageError, ValueError):
    pass


class DepthError(TriageError, ValueError):
    pass


class NoCandidatesError(TriageError, ValueError):
    pass


# -- simulator / harness -----------------------------------------------------

class ScenarioError(TriageError, ValueError):
    pass


class EvalError(TriageError, ValueError):
    pass
