"""Deterministic named RNG streams derived from a single root seed."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["stream_seed", "seed_stream"]


def stream_seed(root_seed, name):
    """Stable 64-bit child seed for (root_seed, name)."""
    digest = hashlib.sha256(f"{int(root_seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def seed_stream(root_seed, name):
    """Independent numpy Generator for a named purpose (weights, splits, ...)."""
    return np.random.default_rng(stream_seed(root_seed, name))
