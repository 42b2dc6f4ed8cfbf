"""Exception taxonomy shared across the package."""


class LatentChainError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentChainError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(LatentChainError):
    """A caller violated an operation precondition."""


class ConfigError(LatentChainError):
    """A configuration value is out of its legal range."""


class ModeError(ContractError):
    """Model invoked in the wrong training phase or normalization mode."""


class PhaseError(ContractError):
    """Checkpoint phase does not match what the pipeline stage expects."""


class VocabularyError(LatentChainError):
    """Unknown symbol or out-of-range token id."""


class DegenerateInputError(LatentChainError):
    """Numerically degenerate input (zero vector, collinear plane basis)."""


class GenerationError(LatentChainError):
    """Sample generation could not satisfy its constraints."""


class CheckpointError(LatentChainError):
    """Checkpoint file is corrupt or inconsistent with the target model."""
