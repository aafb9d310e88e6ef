"""Identity-preserving longitudinal latent diffusion on synthetic brain phantoms."""
from .config import RunConfig
from .errors import (CheckpointError, ContractError, DimensionError, DomainError, IPLDMError,
                     SamplingError, StageOrderError, TrainingDiverged)

__version__ = "0.1.0"
