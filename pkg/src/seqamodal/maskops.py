"""Binary mask helpers shared across the pipeline.

Masks are 2D boolean numpy arrays. The diffusion side works on a signed
float representation: 0/1 -> -1/+1, binarized back at threshold 0.
"""

from __future__ import annotations

import numpy as np


def as_mask(a) -> np.ndarray:
    """Coerce to a 2D boolean mask, validating shape."""
    m = np.asarray(a)
    if m.ndim != 2:
        raise ValueError(f"mask must be 2D, got shape {m.shape}")
    return m.astype(bool)


def to_signed(mask: np.ndarray) -> np.ndarray:
    """Map a 0/1 mask to the signed float32 convention (-1 background, +1 object)."""
    return np.where(np.asarray(mask, dtype=bool), 1.0, -1.0).astype(np.float32)


def from_signed(x) -> np.ndarray:
    """Binarize a real-valued raster at threshold 0 back to a boolean mask."""
    a = np.asarray(x, dtype=np.float32)
    return a > 0.0


def mask_area(mask: np.ndarray) -> int:
    return int(np.count_nonzero(mask))


def check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
