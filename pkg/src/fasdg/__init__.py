"""Face anti-spoofing with gated positional self-attention and domain-adversarial training."""

__version__ = "0.1.0"

from fasdg.errors import (
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
)

__all__ = ["ConfigError", "DataError", "NumericalError", "ShapeError", "__version__"]
