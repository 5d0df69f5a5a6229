"""Lane-level freeway anomaly detection with graph autoencoders."""
from __future__ import annotations

__version__ = "0.1.0"
