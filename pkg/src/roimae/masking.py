"""Random masks for the masked-reconstruction pre-training tasks.

A mask is a boolean (T, R) array, True where the input is zeroed.

- ``mask_roi``: whole ROI columns.
- ``mask_time``: whole time rows.
- ``mask_random``: pick rows, then pick ROIs independently inside each
  picked row. The masked fraction is therefore about ratio².
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionError, ParameterError
from .rng import Rng

DEFAULT_RATIOS = (0.25, 0.5)


class MaskStrategy(str, enum.Enum):
    ROI = "mask_roi"
    TIME = "mask_time"
    RANDOM = "mask_random"
    NONE = "none"

    @classmethod
    def parse(cls, token) -> "MaskStrategy":
        if isinstance(token, cls):
            return token
        try:
            return cls(str(token).strip().lower())
        except ValueError:
            choices = ", ".join(m.value for m in cls)
            raise ParameterError(f"unknown mask strategy {token!r} (choose from {choices})") from None


@dataclass(frozen=True)
class MaskSpec:
    mask: np.ndarray
    ratio: float
    strategy: MaskStrategy

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_mask(strategy, T: int, R: int, ratio: float, rng: Rng) -> MaskSpec:
    strategy = MaskStrategy.parse(strategy)
    if not 0.0 <= ratio < 1.0:
        raise ParameterError(f"mask ratio must be in [0, 1), got {ratio}")
    if T < 1 or R < 1:
        raise ParameterError(f"mask dimensions must be positive, got T={T}, R={R}")
    mask = np.zeros((T, R), dtype=bool)
    if strategy is MaskStrategy.ROI:
        mask[:, rng.choice(R, round_half_up(ratio * R))] = True
    elif strategy is MaskStrategy.TIME:
        mask[rng.choice(T, round_half_up(ratio * T)), :] = True
    elif strategy is MaskStrategy.RANDOM:
        rows = rng.choice(T, round_half_up(ratio * T))
        k = round_half_up(ratio * R)
        if rows.size and k:
            cols = np.argsort(rng.random((rows.size, R)), axis=1, kind="stable")[:, :k]
            mask[rows[:, None], cols] = True
    return MaskSpec(mask, float(ratio), strategy)


def sample_ratio(rng: Rng, ratio_set: Sequence[float] = DEFAULT_RATIOS) -> float:
    ratio_set = tuple(ratio_set)
    if not ratio_set:
        raise ParameterError("ratio set is empty")
    return float(ratio_set[rng.integers(len(ratio_set))])


def apply_mask(x, spec: MaskSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != spec.mask.shape:
        raise DimensionError(f"apply_mask: input {x.shape} vs mask {spec.mask.shape}")
    return np.where(spec.mask, 0.0, x)


def mask_batch(windows: np.ndarray, strategy, ratio_set, rng: Rng):
    """Mask a (B, T, R) stack, one ratio draw per sample. Returns (masked, mask)."""
    b, t, r = windows.shape
    masks = np.empty((b, t, r), dtype=bool)
    for i in range(b):
        masks[i] = make_mask(strategy, t, r, sample_ratio(rng, ratio_set), rng).mask
    return np.where(masks, 0.0, windows), masks
