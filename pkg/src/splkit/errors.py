"""Exception types shared across the toolkit."""


class SplkitError(Exception):
    """Base class for toolkit errors."""


class NonFiniteLikelihood(SplkitError):
    """A log-likelihood term is -inf (zero intensity at a detection time)."""


class MissingArmedCount(SplkitError):
    """Synchronous likelihood requested without an armed-period count."""


class EmptyHistogram(SplkitError):
    """Matched filtering requires at least one detection."""


class NonPositiveDepth(SplkitError):
    """Point-cloud transforms require strictly positive depths."""


class ZeroRange(SplkitError):
    """Depth score undefined when a point coincides with the detector."""


class ScoreModelFailure(SplkitError):
    """The score model (in-process or bridged) failed to produce scores."""


class FormatError(SplkitError):
    """A data file does not conform to its documented format."""
