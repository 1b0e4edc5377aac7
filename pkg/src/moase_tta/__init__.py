"""moase_tta package exports."""

from .main import main

__all__ = ["main"]
