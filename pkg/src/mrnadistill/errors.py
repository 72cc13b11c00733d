"""Exception taxonomy shared across the toolkit.

Domain failures raise one of these so the CLI can map them to exit code 1
with a single machine-parsable line; anything else is a genuine bug.
"""


class MrnaDistillError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(MrnaDistillError):
    """Operands have incompatible shapes; message names both shapes."""


class DomainError(MrnaDistillError):
    """Input is structurally valid but outside an operation's domain
    (e.g. an all-false pooling mask)."""


class ContractError(MrnaDistillError):
    """An API precondition was violated (non-scalar loss, n < 2, ...)."""


class ConfigError(MrnaDistillError):
    """Inconsistent or invalid configuration values."""


class FormatError(MrnaDistillError):
    """A binary artifact (shard, token file, dump, checkpoint) is
    corrupt, truncated, or of an unexpected version."""


class TokenizationError(MrnaDistillError):
    """A sequence or token id stream cannot be encoded/decoded."""


class DegenerateInputError(MrnaDistillError):
    """A metric received input on which it is undefined (e.g. all-zero
    centered data for CKA or PCA)."""


class NumericalError(MrnaDistillError):
    """A forward op produced NaN/Inf from finite inputs (debug mode)."""


class TrainingDiverged(MrnaDistillError):
    """Training produced a non-finite loss; carries the offending step."""

    def __init__(self, message, step=None, batch_indices=None):
        super().__init__(message)
        self.step = step
        self.batch_indices = list(batch_indices) if batch_indices is not None else None
