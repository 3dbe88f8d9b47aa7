"""Seeded random patch masking and the index bookkeeping around it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError


def derived_seed(base: int, *key) -> int:
    """Stable per-item seed derived from a base seed and index keys."""
    ss = np.random.SeedSequence([int(base) & 0xFFFFFFFFFFFFFFFF,
                                 *[int(k) & 0xFFFFFFFFFFFFFFFF for k in key]])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class MaskSpec:
    """Which of L patches are hidden from the encoder."""

    length: int
    ratio: float
    masked_index: np.ndarray  # sorted, ascending
    seed: int

    @property
    def mask(self) -> np.ndarray:
        """Binary vector of length L, 1 = masked."""
        m = np.zeros(self.length, dtype=np.float64)
        m[self.masked_index] = 1.0
        return m

    @property
    def visible_index(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.length), self.masked_index)

    @property
    def masked_count(self) -> int:
        return int(self.masked_index.size)


def sample_mask(length: int, ratio: float, seed: int) -> MaskSpec:
    """Uniform random subset of round(ratio*L) patches, ties rounding half up."""
    if not 0.0 < ratio < 1.0:
        raise ParameterError(f"mask ratio must be in (0,1), got {ratio}")
    n_masked = int(np.floor(ratio * length + 0.5))
    if n_masked < 1 or n_masked >= length:
        raise ParameterError(
            f"ratio {ratio} leaves {n_masked} masked of {length} patches")
    rng = np.random.default_rng(seed)
    masked = np.sort(rng.permutation(length)[:n_masked])
    return MaskSpec(length=length, ratio=ratio, masked_index=masked, seed=seed)


def split_tokens(tokens: np.ndarray, mask: MaskSpec):
    """Return (visible rows in original relative order, their indices)."""
    if tokens.shape[0] != mask.length:
        raise ShapeError(
            f"tokens have {tokens.shape[0]} rows, mask covers {mask.length}")
    visible = mask.visible_index
    return tokens[visible], visible


def scatter_tokens(visible: np.ndarray, fill_row: np.ndarray,
                   mask: MaskSpec) -> np.ndarray:
    """Inverse of split: visible rows back in place, ``fill_row`` elsewhere."""
    if visible.shape[0] != mask.length - mask.masked_count:
        raise ShapeError("visible row count does not match mask")
    out = np.empty((mask.length,) + visible.shape[1:], dtype=visible.dtype)
    out[:] = fill_row
    out[mask.visible_index] = visible
    return out
