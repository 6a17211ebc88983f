"""Direction and dispersion statistics used for layer-wise filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .update import LayeredUpdate, UpdateBatch


@dataclass(frozen=True)
class LayerMetricTable:
    """Per-(client, layer) L2 magnitudes and PDP directions, each ``(n, L)``."""

    magnitude: np.ndarray
    direction: np.ndarray


def pdp(x) -> float:
    """Positive direction purity of ``x``.

    Zero entries carry no sign and drop out of both sums; an all-zero vector
    gets the neutral value 0.5.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("pdp of an empty vector is undefined")
    signs = np.sign(x)
    nonzero = np.count_nonzero(signs)
    if nonzero == 0:
        return 0.5
    return 0.5 * (1.0 + float(signs.sum()) / nonzero)


def median(values) -> float:
    """Median; even-length inputs average the two middle order statistics."""
    return float(np.median(np.asarray(values, dtype=np.float64)))


def mz_scores(values) -> np.ndarray:
    """Median-centred z-scores with the population standard deviation.

    Returns all zeros when the values have no spread.
    """
    x = np.asarray(values, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("mz_scores needs at least one value")
    sigma = float(np.std(x))
    if sigma == 0.0:
        return np.zeros_like(x)
    return (x - np.median(x)) / sigma


def coordinate_median(batch: UpdateBatch) -> LayeredUpdate:
    return LayeredUpdate(np.median(batch.matrix(), axis=0), batch.layout)


def metric_table(batch: UpdateBatch) -> LayerMetricTable:
    n, L = batch.n, len(batch.layout)
    magnitude = np.empty((n, L))
    direction = np.empty((n, L))
    for l in range(L):
        rows = batch.layer_matrix(l)
        magnitude[:, l] = np.linalg.norm(rows, axis=1)
        direction[:, l] = [pdp(r) for r in rows]
    return LayerMetricTable(magnitude, direction)
