"""Exception hierarchy shared by every stage of the pipeline.

The CLI prints ``<ClassName>: <message>`` on a single line, so the class
name doubles as a machine-parseable error code.
"""


class LungRiskError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class FormatError(LungRiskError):
    """A file on disk does not follow its documented layout."""

    exit_code = 3


class ContractError(LungRiskError):
    """A precondition of an operation is violated by its inputs."""

    exit_code = 4


class ShapeError(ContractError):
    """Array extents do not agree with what a layer or routine expects."""


class ConfigError(LungRiskError):
    exit_code = 5


class PathError(LungRiskError):
    exit_code = 6


class DivergenceError(LungRiskError):
    """Training produced a non-finite loss."""

    exit_code = 7


class SegmentationFailure(LungRiskError):
    """No nodule could be localized in the slice handed to a later stage."""

    exit_code = 8
