"""Server-side aggregation rules.

Each rule maps an :class:`UpdateBatch` to an :class:`AggregationOutcome`.
``lasa`` is the layer-adaptive sparsified rule; the rest are baselines.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .sparsify import SparsificationLevel, sparsify_update, top_k
from .stats import metric_table, mz_scores
from .update import LayeredUpdate, UpdateBatch


@dataclass(frozen=True)
class LasaParams:
    sparsification: SparsificationLevel = SparsificationLevel(0.3)
    lambda_m: float = 2.0
    lambda_d: float = 1.0

    def __post_init__(self):
        if not isinstance(self.sparsification, SparsificationLevel):
            object.__setattr__(self, "sparsification", SparsificationLevel(float(self.sparsification)))
        if not (self.lambda_m > 0 and self.lambda_d > 0):
            raise ValueError("filtering radii must be positive")


@dataclass(frozen=True)
class AggregationOutcome:
    """Aggregate plus, per layer, the set of client ids that contributed."""

    aggregate: LayeredUpdate
    selected: tuple[frozenset, ...]
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.selected) != len(self.aggregate.layout):
            raise ValueError("need one selection set per layer")
        if any(len(s) == 0 for s in self.selected):
            raise ValueError("selection sets must be nonempty")


def _all_selected(batch: UpdateBatch) -> tuple[frozenset, ...]:
    ids = frozenset(batch.client_ids)
    return tuple(ids for _ in batch.layout)


def _same_for_layers(batch: UpdateBatch, ids) -> tuple[frozenset, ...]:
    ids = frozenset(ids)
    return tuple(ids for _ in batch.layout)


def lasa(batch: UpdateBatch, p: LasaParams = LasaParams()) -> AggregationOutcome:
    """Sparsify every update, filter clients per layer on the MZ-scores of
    layer norm and PDP, and average the surviving sparsified layer slices.

    A layer whose filter rejects everyone falls back to the single client
    with the smallest ``max(|score_m|, |score_d|)``.
    """
    sparse = UpdateBatch(
        tuple(sparsify_update(u, p.sparsification) for u in batch.updates),
        batch.client_ids,
    )
    table = metric_table(sparse)
    out = np.empty(batch.dim)
    selected = []
    mz_m_all, mz_d_all = [], []
    for l, spec in enumerate(batch.layout):
        mz_m = mz_scores(table.magnitude[:, l])
        mz_d = mz_scores(table.direction[:, l])
        keep = np.flatnonzero((np.abs(mz_m) <= p.lambda_m) & (np.abs(mz_d) <= p.lambda_d))
        if keep.size == 0:
            worst = np.maximum(np.abs(mz_m), np.abs(mz_d))
            # near-ties (round-off in the scores) go to the lowest position
            keep = np.flatnonzero(worst <= worst.min() * (1 + 1e-9) + 1e-12)[:1]
        rows = sparse.layer_matrix(l)[keep]
        out[spec.offset:spec.stop] = rows.mean(axis=0)
        selected.append(frozenset(batch.client_ids[i] for i in keep))
        mz_m_all.append(mz_m)
        mz_d_all.append(mz_d)
    return AggregationOutcome(
        LayeredUpdate(out, batch.layout),
        tuple(selected),
        {"mz_magnitude": mz_m_all, "mz_direction": mz_d_all, "metrics": table},
    )


def fedavg(batch: UpdateBatch) -> AggregationOutcome:
    return AggregationOutcome(
        LayeredUpdate(batch.matrix().mean(axis=0), batch.layout), _all_selected(batch)
    )


def trimmed_mean(batch: UpdateBatch, trim_count: int) -> AggregationOutcome:
    """Per coordinate, drop the ``trim_count`` largest and smallest values and average the rest."""
    b = int(trim_count)
    if b < 0 or 2 * b >= batch.n:
        raise ValueError(f"trim count {b} inadmissible for n={batch.n} (need 2b < n)")
    if b == 0:
        return fedavg(batch)
    ordered = np.sort(batch.matrix(), axis=0)
    agg = ordered[b:batch.n - b].mean(axis=0)
    return AggregationOutcome(LayeredUpdate(agg, batch.layout), _all_selected(batch))


def _geomed_objective(y: np.ndarray, points: np.ndarray) -> float:
    return float(np.linalg.norm(points - y, axis=1).sum())


def geometric_median(batch: UpdateBatch, tol: float = 1e-8, max_iter: int = 200) -> AggregationOutcome:
    """Weiszfeld iteration started from the coordinate-wise mean."""
    points = batch.matrix()
    mean = points.mean(axis=0)
    y = mean.copy()
    start_obj = _geomed_objective(y, points)
    objectives = [start_obj]
    iterations = 0
    for iterations in range(1, max_iter + 1):
        dist = np.linalg.norm(points - y, axis=1)
        if np.any(dist == 0.0):
            nudged = y + 1e-12 * (mean - y)
            if np.array_equal(nudged, y):
                # iterate sits on a data point that is also the mean: every
                # point is identical or the mean is itself optimal enough
                break
            y = nudged
            dist = np.linalg.norm(points - y, axis=1)
            if np.any(dist == 0.0):
                break
        w = 1.0 / dist
        y_new = (w @ points) / w.sum()
        obj = _geomed_objective(y_new, points)
        # Weiszfeld never increases the objective; guard against round-off
        assert obj <= start_obj * (1 + 1e-12) + 1e-300, "Weiszfeld objective rose above start"
        objectives.append(obj)
        moved = float(np.linalg.norm(y_new - y))
        y = y_new
        if moved < tol:
            break
    return AggregationOutcome(
        LayeredUpdate(y, batch.layout),
        _all_selected(batch),
        {"iterations": iterations, "objective": objectives},
    )


def _pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - points[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_scores(points: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared distances from each row to its ``n - f - 2`` nearest other rows."""
    n = points.shape[0]
    neighbours = max(n - f - 2, 0)
    dists = _pairwise_sq_dists(points)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(dists[i], i))
        scores[i] = others[:neighbours].sum()
    return scores


def _krum_order(scores: np.ndarray, ids) -> list[int]:
    # ascending score, ties by client id
    return sorted(range(len(scores)), key=lambda i: (scores[i], ids[i]))


def multi_krum(batch: UpdateBatch, f: int, m: int | None = None) -> AggregationOutcome:
    n = batch.n
    if m is None:
        m = n - f
    if n < 2 * f + 3:
        raise ValueError(f"Multi-Krum needs n >= 2f + 3 (n={n}, f={f})")
    if not 1 <= m <= n - f:
        raise ValueError(f"Multi-Krum needs 1 <= m <= n - f (m={m})")
    points = batch.matrix()
    scores = krum_scores(points, f)
    chosen = _krum_order(scores, batch.client_ids)[:m]
    agg = points[chosen].mean(axis=0)
    return AggregationOutcome(
        LayeredUpdate(agg, batch.layout),
        _same_for_layers(batch, (batch.client_ids[i] for i in chosen)),
        {"scores": scores},
    )


def bulyan(batch: UpdateBatch, f: int) -> AggregationOutcome:
    """Iterated Krum picks ``n - 2f`` candidates; per coordinate the
    ``n - 4f`` candidate values closest to the median are averaged."""
    n = batch.n
    if n < 4 * f + 3:
        raise ValueError(f"Bulyan needs n >= 4f + 3 (n={n}, f={f})")
    points = batch.matrix()
    ids = batch.client_ids
    remaining = list(range(n))
    candidates = []
    for _ in range(n - 2 * f):
        sub = points[remaining]
        scores = krum_scores(sub, f)
        best = _krum_order(scores, [ids[r] for r in remaining])[0]
        candidates.append(remaining.pop(best))
    cand = points[candidates]
    beta = n - 4 * f
    med = np.median(cand, axis=0)
    # stable argsort keeps candidate order on distance ties
    closest = np.argsort(np.abs(cand - med), axis=0, kind="stable")[:beta]
    agg = np.take_along_axis(cand, closest, axis=0).mean(axis=0)
    return AggregationOutcome(
        LayeredUpdate(agg, batch.layout),
        _same_for_layers(batch, (ids[c] for c in candidates)),
        {"candidates": [ids[c] for c in candidates]},
    )


@dataclass(frozen=True)
class SparseFedState:
    """Server error-feedback residual carried between rounds."""

    residual: np.ndarray | None = None


def sparsefed_lite(
    batch: UpdateBatch, k: int, clip: float, state: SparseFedState = SparseFedState()
) -> tuple[AggregationOutcome, SparseFedState]:
    """Clip, average, add carried error, emit the top-k and keep the rest.

    Returns the outcome and the new error state.
    """
    if clip <= 0:
        raise ValueError("clip must be positive")
    points = batch.matrix()
    if math.isfinite(clip):
        norms = np.linalg.norm(points, axis=1)
        scale = np.minimum(1.0, clip / np.maximum(norms, 1e-300))
        points = points * scale[:, None]
    total = points.mean(axis=0)
    if state.residual is not None:
        total = total + state.residual
    emitted = top_k(total, k)
    new_state = SparseFedState(total - emitted)
    outcome = AggregationOutcome(
        LayeredUpdate(emitted, batch.layout), _all_selected(batch), {"pre_sparse": total}
    )
    return outcome, new_state


class SparseFed:
    """Stateful wrapper so SparseFed fits the ``batch -> outcome`` shape."""

    def __init__(self, sparsification: SparsificationLevel | float = 0.3, clip: float = math.inf):
        if not isinstance(sparsification, SparsificationLevel):
            sparsification = SparsificationLevel(float(sparsification))
        self.sparsification = sparsification
        self.clip = clip
        self.state = SparseFedState()

    def __call__(self, batch: UpdateBatch) -> AggregationOutcome:
        k = self.sparsification.k_for(batch.dim)
        outcome, self.state = sparsefed_lite(batch, k, self.clip, self.state)
        return outcome


AGGREGATOR_KEYS = ("lasa", "fedavg", "trmean", "geomed", "multikrum", "bulyan", "sparsefed")

Aggregator = Callable[[UpdateBatch], AggregationOutcome]


def make_aggregator(key: str, params: dict | None = None) -> Aggregator:
    """Build an aggregator from its config key and scalar parameters.

    ``f`` (assumed malicious count) is read by trmean, multikrum and bulyan.
    """
    params = dict(params or {})
    if key == "lasa":
        lp = LasaParams(
            SparsificationLevel(params.get("sparsification_level", 0.3)),
            params.get("lambda_m", 2.0),
            params.get("lambda_d", 1.0),
        )
        return lambda batch: lasa(batch, lp)
    if key == "fedavg":
        return fedavg
    if key == "trmean":
        b = params.get("trim", params.get("f", 0))
        return lambda batch: trimmed_mean(batch, b)
    if key == "geomed":
        tol, it = params.get("tol", 1e-8), params.get("max_iter", 200)
        return lambda batch: geometric_median(batch, tol, it)
    if key == "multikrum":
        f, m = params.get("f", 0), params.get("m")
        return lambda batch: multi_krum(batch, f, m)
    if key == "bulyan":
        f = params.get("f", 0)
        return lambda batch: bulyan(batch, f)
    if key == "sparsefed":
        return SparseFed(params.get("sparsification_level", 0.3), params.get("clip", math.inf))
    raise ValueError(f"unknown aggregator {key!r}; expected one of {AGGREGATOR_KEYS}")
