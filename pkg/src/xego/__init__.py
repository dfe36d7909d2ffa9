"""Cross-ego contrastive learning lab on synthetic team trajectories."""

from xego.errors import DomainError, XegoError

__version__ = "0.1.0"

__all__ = ["DomainError", "XegoError", "__version__"]
