"""Exception types shared across the package.

Infrastructure faults (missing toolchain, missing sandbox, provider
transport) are distinct from content failures (bad bundle, bad fixture,
unparseable agent output): the former abort a run, the latter are absorbed
into trajectory bookkeeping by the callers.
"""

from __future__ import annotations


class ZincsmithError(Exception):
    """Base class for all package errors."""


class MissingField(ZincsmithError):
    """A problem bundle is missing a required item."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        super().__init__(f"missing field: {field}" + (f" ({detail})" if detail else ""))


class DataMismatch(ZincsmithError):
    """dzn text and builtin parameters disagree on a shared key."""

    def __init__(self, key: str, detail: str = ""):
        self.key = key
        super().__init__(f"data mismatch on key: {key}" + (f" ({detail})" if detail else ""))


class ProviderError(ZincsmithError):
    """Transport, auth, or rate failure from an LLM provider."""


class FixtureMiss(ZincsmithError):
    """Replay mode has no recorded response for a request hash."""

    def __init__(self, request_hash: str, tag: str = ""):
        self.request_hash = request_hash
        self.tag = tag
        super().__init__(f"no recorded fixture for request hash {request_hash}" + (f" (tag={tag})" if tag else ""))


class ParseError(ZincsmithError):
    """An agent response could not be parsed after the allowed re-ask."""


class VariantGenerationFailed(ZincsmithError):
    """A description-variant generation call stayed unparseable."""


class BudgetExhausted(ZincsmithError):
    """A candidate's refinement budget is spent."""


class ToolchainMissing(ZincsmithError):
    """The MiniZinc executable (or requested solver) is not available."""


class SandboxUnavailable(ZincsmithError):
    """The sandboxed program runner cannot be reached."""


class MappingFault(ZincsmithError):
    """The solution-mapping program failed on a formatted solution."""


class ReferenceModelBroken(ZincsmithError):
    """A benchmark reference model does not compile; the problem cannot be scored."""


class EmptyBenchmark(ZincsmithError):
    """A metric was requested over zero problems."""


class NoTrials(ZincsmithError):
    """A false-rejection rate was requested over zero trials."""
