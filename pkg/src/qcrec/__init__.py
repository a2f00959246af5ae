"""Query-context-aware causal transformer for next-item recommendation."""

from qcrec.model import ContextMode, ModelConfig, Variant, Visibility

__all__ = ["ContextMode", "ModelConfig", "Variant", "Visibility"]
__version__ = "0.1.0"
