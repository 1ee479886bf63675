"""Self-guided spuriosity ranking and rank-driven contrastive debiasing."""

from sebra.errors import ConfigError, DomainError, NumericalError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "NumericalError", "__version__"]
