"""Exception hierarchy shared by every stage of the pipeline."""


class IPLDMError(Exception):
    """Base class for all package errors."""


class DimensionError(IPLDMError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class DomainError(IPLDMError, ValueError):
    """A scalar argument is outside its admissible range (ages, timesteps, ...)."""


class ContractError(IPLDMError, RuntimeError):
    """A call violated a documented precondition (non-scalar loss, missing grad, ...)."""


class SamplingError(IPLDMError, ValueError):
    """The dataset cannot supply the requested pair or triplet."""


class StageOrderError(IPLDMError, RuntimeError):
    """A training stage was requested before the stages it depends on."""


class CheckpointError(IPLDMError, RuntimeError):
    """Checkpoint is malformed, incomplete or incompatible with the active config."""


class TrainingDiverged(IPLDMError, FloatingPointError):
    """A non-finite loss was produced during optimisation."""
