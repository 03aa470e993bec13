"""Exception types shared across the package."""


class SsmaeError(Exception):
    """Base class for all package errors."""


class ShapeError(SsmaeError):
    """Tensor extents are incompatible with the requested operation."""


class ContractError(SsmaeError):
    """A caller violated an operation's precondition."""


class MaskError(SsmaeError):
    """A mask specification is invalid (empty, overlapping, out of range)."""


class LabelError(SsmaeError):
    """A class label lies outside the declared label range."""


class ConfigError(SsmaeError):
    """A configuration value or operation parameter is invalid.

    The message always names the offending field or argument.
    """


class SampleError(SsmaeError):
    """A sample could not be drawn (e.g. unlabeled patch center)."""


class MetricError(SsmaeError):
    """A metric is undefined for the given confusion matrix."""


class FormatError(SsmaeError):
    """A tensor container file is malformed; carries the byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DeterminismError(SsmaeError):
    """A function expected to be deterministic produced differing values."""


class DivergenceError(SsmaeError):
    """Training produced non-finite gradients; carries the parameter path."""

    def __init__(self, message: str, param_path: str):
        super().__init__(f"{message}: {param_path}")
        self.param_path = param_path
