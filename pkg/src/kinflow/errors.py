"""Exception hierarchy shared by all kinflow modules.

Every error carries a process exit code so the CLI can map failures to a
stable machine-parseable contract: 2 usage, 3 config, 4 io/format,
5 runtime invariant.
"""


class KinflowError(Exception):
    """Base class for all kinflow errors."""

    exit_code = 5


class InvariantViolation(KinflowError):
    """A domain-type invariant does not hold (shape, range, finiteness)."""

    exit_code = 5


class ShapeMismatch(KinflowError):
    """Two inputs that must share a shape do not."""

    exit_code = 5


class StageError(KinflowError):
    """A feature map arrived at the wrong pipeline stage."""

    exit_code = 5


class ModeError(KinflowError):
    """An operation was invoked in a mode its configuration forbids."""

    exit_code = 5


class RangeError(KinflowError):
    """A scalar argument is outside its documented range."""

    exit_code = 5


class EmptyValidSet(KinflowError):
    """A masked reduction has zero valid pixels."""

    exit_code = 5


class FormatError(KinflowError):
    """On-disk bytes do not follow the expected file format."""

    exit_code = 4


class IoError(KinflowError):
    """A file could not be read or written."""

    exit_code = 4


class ConfigError(KinflowError):
    """A configuration value is missing, unknown, or inconsistent."""

    exit_code = 3


class SpecError(KinflowError):
    """A synthetic-motion spec violates its parameter constraints."""

    exit_code = 3


class PreconditionError(KinflowError):
    """A command was invoked without a required prior artifact."""

    exit_code = 3
