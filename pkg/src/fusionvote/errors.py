"""Exception hierarchy shared by every fusionvote module."""


class FusionVoteError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(FusionVoteError, ValueError):
    """Incompatible shapes, invalid hyperparameters or mismatched specs."""


class InputError(FusionVoteError, ValueError):
    """Bad runtime data: labels out of range, empty datasets, non-finite values."""


class PreconditionError(FusionVoteError, RuntimeError):
    """An operation was called on objects in the wrong lifecycle state."""


class NonFiniteLossError(FusionVoteError, FloatingPointError):
    def __init__(self, epoch: int, batch: int, loss_kind: str, value: float):
        self.epoch = epoch
        self.batch = batch
        self.loss_kind = loss_kind
        self.value = value
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch} (loss={loss_kind})"
        )


class FormatError(FusionVoteError, ValueError):
    """A binary file failed validation; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")


class SpecMismatchError(ConfigurationError):
    """Networks that must share an architecture do not."""
