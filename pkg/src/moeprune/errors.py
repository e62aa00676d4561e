"""Exception hierarchy.

Every error raised by the toolkit derives from :class:`MoePruneError`; the CLI
maps each subclass onto one exit code through ``exit_code``.
"""


class MoePruneError(Exception):
    exit_code = 1


class FormatError(MoePruneError):
    """Malformed or truncated checkpoint / JSON document."""

    exit_code = 2


class DataError(FormatError):
    """Non-finite values inside a tensor payload."""


class ShapeError(MoePruneError, ValueError):
    pass


class DomainError(MoePruneError, ValueError):
    pass


class LayoutMismatchError(MoePruneError):
    """Checkpoint contents disagree with the declared model layout."""


class InvalidPlanError(MoePruneError):
    pass


class ProvenanceError(MoePruneError):
    """Scores or plan were computed against a different checkpoint."""


class ConfigurationError(MoePruneError):
    pass


class TruncatedFileError(FormatError):
    pass


class MalformedHeaderError(FormatError):
    pass


class OverlappingRangesError(FormatError):
    pass


class UnknownDTypeError(FormatError):
    pass
