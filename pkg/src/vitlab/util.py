"""Small shared helpers: stable seed derivation and interval statistics."""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["derive_seed", "mean_ci95"]


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of ints/strings (independent of PYTHONHASHSEED)."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFFFFFFFFFFFFFF


def mean_ci95(values) -> tuple[float, float]:
    """Mean and normal-approximation 95% confidence half-width."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    mean = float(values.mean())
    if values.size == 1:
        return mean, float("inf")
    half = 1.96 * float(values.std(ddof=1)) / np.sqrt(values.size)
    return mean, half
