"""Exception hierarchy shared by every module.

Each exception carries a stable ``code`` string (its class name) so the CLI
and foreign bindings can translate errors one-to-one without parsing
messages.
"""


class ConformalKitError(Exception):
    """Base class for all toolkit errors."""

    @property
    def code(self) -> str:
        return type(self).__name__


class InvalidRisk(ConformalKitError):
    """Risk level alpha outside the open interval (0, 1)."""


class EmptyCalibrationSet(ConformalKitError):
    """A quantile was requested from zero calibration scores."""


class DimensionMismatch(ConformalKitError):
    """Paired grids (or parallel arrays) disagree in shape."""


class InvalidTau(ConformalKitError):
    """IoU matching threshold outside the open interval (0, 1)."""


class NoMatches(ConformalKitError):
    """No prediction/ground-truth pair cleared the IoU threshold."""


class InfiniteThreshold(ConformalKitError):
    """An operation requiring finite quantiles met a +inf component."""


class InvalidNucleus(ConformalKitError):
    """Nucleus level p outside the half-open interval (0, 1]."""


class EmptySequence(ConformalKitError):
    """An uncertainty score was requested for a zero-length sequence."""


class InvalidBins(ConformalKitError):
    """Calibration-error bin count below 1."""


class AdapterFailure(ConformalKitError):
    """An adapter subprocess exited non-zero or replied with malformed JSON."""


class SelectionParseError(ConformalKitError):
    """No valid object ids could be extracted from a reasoning reply."""


class TraceMissing(ConformalKitError):
    """A stage-2 reply carried no token probability trace."""


class EmptyRegion(ConformalKitError):
    """A region-of-interest selection covers zero pixels."""


class NoViablePathway(ConformalKitError):
    """Every pathway failed (or none were configured)."""


class BadMagic(ConformalKitError):
    """A grid container file does not start with the expected magic bytes."""


class TruncatedPayload(ConformalKitError):
    """A grid container payload is shorter than its header declares."""


class InvariantViolation(ConformalKitError):
    """Data violates a domain-type invariant (simplex, label range, ...)."""


class IoFailure(ConformalKitError):
    """An underlying filesystem write failed."""


class ManifestError(ConformalKitError):
    """A run manifest is malformed or references missing files."""
