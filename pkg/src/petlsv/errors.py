"""Exception hierarchy shared by all modules."""


class PetlsvError(Exception):
    pass


class DimensionError(PetlsvError, ValueError):
    pass


class NumericError(PetlsvError, FloatingPointError):
    pass


class ContractError(PetlsvError, RuntimeError):
    pass


class WiringError(PetlsvError, ValueError):
    pass


class InputError(PetlsvError, ValueError):
    pass


class DivergenceError(PetlsvError, RuntimeError):
    pass


class CheckpointError(PetlsvError, IOError):
    pass


class CheckpointHeaderError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Checkpoint does not match the architecture it is loaded into."""
