"""Exception types shared across the package."""


class DotsError(Exception):
    """Base class for all package errors."""


class Timeout(DotsError):
    """Provider did not answer within the configured timeout (after retries).

    Carries ``attempts`` so monitoring can distinguish a flaky endpoint from
    a dead one.
    """

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(message)
        self.attempts = attempts


class TransportError(DotsError):
    """Network-level failure talking to a provider."""


class ProviderRefusal(DotsError):
    """Provider actively refused the request; not retryable."""


class SchemaViolation(DotsError):
    """Structured completion failed validation after all retries."""

    def __init__(self, message: str, attempts: int = 1, errors: list[str] | None = None):
        super().__init__(message)
        self.attempts = attempts
        self.errors = errors or []


class PatientAgentFailure(DotsError):
    """Patient agent could not produce a reply; the run is marked failed."""


class DoctorUnreachable(DotsError):
    """Doctor endpoint could not be reached; the run is marked failed."""


class MalformedCode(DotsError):
    """String does not have a plausible ICD-10 shape."""


class EmptyBatch(DotsError):
    """Aggregation was asked to run over zero records."""


class EmptyIntersection(DotsError):
    """Paired comparison over runs with no cases in common."""


class DuplicateRunId(DotsError):
    """A run with this id is already committed to the store."""


class StorageFull(DotsError):
    """Run store cannot accept further writes."""


class SessionExpired(DotsError):
    """Human session exceeded its wall-clock budget."""


class StepLimitReached(DotsError):
    """Human session exceeded its step budget."""
