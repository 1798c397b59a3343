class ContractError(ValueError):
    """A caller violated an operation's precondition (shapes, ranges, lengths)."""


class CapacityError(ContractError):
    """A sequence would run past the model's ``max_seq``."""


class CheckpointFormatError(ValueError):
    """A checkpoint or corpus file failed header or dimension validation."""


class TrainingDivergedError(RuntimeError):
    """The loss became non-finite during training."""
