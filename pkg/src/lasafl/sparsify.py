"""Top-k sparsification and the energy split it induces."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .update import LayeredUpdate


@dataclass(frozen=True)
class SparsificationLevel:
    """Fraction of coefficients zeroed, ``1 - k/d``."""

    level: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.level < 1.0):
            raise ValueError(f"sparsification level must lie in [0, 1), got {self.level}")

    def k_for(self, d: int) -> int:
        """Kept coefficient count: ``(1 - level) * d`` rounded half up, clamped to [1, d]."""
        k = math.floor((1.0 - self.level) * d + 0.5)
        return int(min(max(k, 1), d))


@dataclass(frozen=True)
class EnergySplit:
    c_k: float
    b_k: float


def top_k(x, k: int) -> np.ndarray:
    """Keep the ``k`` largest-magnitude entries of ``x`` in place, zero the rest.

    Ties at the boundary keep the lower index.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    d = x.shape[0]
    if k < 0 or k > d:
        raise ValueError(f"k={k} outside [0, {d}]")
    out = np.zeros_like(x)
    if k == 0:
        return out
    # stable sort on -|x| keeps lower indices first among equal magnitudes
    order = np.argsort(-np.abs(x), kind="stable")
    keep = order[:k]
    out[keep] = x[keep]
    return out


def sparsify_update(u: LayeredUpdate, sl: SparsificationLevel | float) -> LayeredUpdate:
    """Global top-k over the whole flat update; the layout is kept."""
    if not isinstance(sl, SparsificationLevel):
        sl = SparsificationLevel(float(sl))
    k = sl.k_for(u.dim)
    if k == u.dim:
        return u
    return LayeredUpdate(top_k(u.values, k), u.layout)


def energy_split(x, k: int) -> EnergySplit:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    total = float(x @ x)
    if total == 0.0:
        raise ValueError("energy split undefined for the zero vector")
    kept = top_k(x, k)
    resid = kept - x
    return EnergySplit(float(kept @ kept) / total, float(resid @ resid) / total)
