"""Domain-adversarial training of representations that are agnostic to a protected concept."""

__version__ = "0.1.0"
