"""Bespoke approximate MLP circuits: po2 weights, pruned adder trees, approximate argmax."""
from __future__ import annotations

__version__ = "0.1.0"
