"""Consensus action selection and self-correcting subtask execution for chunked robot policies."""
from __future__ import annotations

__version__ = "0.1.0"
