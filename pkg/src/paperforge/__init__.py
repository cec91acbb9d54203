"""paperforge: feedback-refined extraction, training, and generation of paper sections."""

from .sections import SectionKind

__version__ = "0.1.0"

__all__ = ["SectionKind", "__version__"]
