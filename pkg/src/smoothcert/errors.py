"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
InvariantViolation -> 3, NumericFailure (and subclasses) -> 4.
"""


class SmoothcertError(Exception):
    """Base class for all package errors."""


class ConfigError(SmoothcertError):
    """Invalid configuration value; message names the offending key path."""


class InvariantViolation(SmoothcertError):
    """A hard consistency check failed (e.g. the metric ordering chain)."""


class NumericFailure(SmoothcertError):
    """Non-finite values or a diverged numerical procedure."""


class TrainingDiverged(NumericFailure):
    """Loss became non-finite during training; message names the epoch."""


class ContractViolation(NumericFailure):
    """A user-supplied callable broke its documented contract."""


class CheckpointError(SmoothcertError):
    """Malformed model checkpoint (bad magic, truncation, version, dims)."""


class DataFormatError(SmoothcertError):
    """Malformed dataset file; message names the line number."""


class Abstain(SmoothcertError):
    """Certification abstained (top-class probability bound <= 1/2).

    This is a control-flow signal, not a failure: callers map it to a
    zero radius / zero score.
    """
