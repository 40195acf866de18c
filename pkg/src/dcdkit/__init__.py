"""Edge-level circuit discovery on small transformers, with data-driven grouping."""
from __future__ import annotations

__version__ = "0.1.0"
