"""Filtering accuracy, empirical kappa-robustness and the bound audit."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import attacks as atk
from .aggregators import AggregationOutcome
from .data import ClientShard, Dataset
from .engine import local_train, substream
from .model import ModelState, loss_and_grad
from .config import LocalTrainConfig
from .sparsify import SparsificationLevel, energy_split
from .update import LayeredUpdate, UpdateBatch


@dataclass(frozen=True)
class FilterStats:
    """Rates over (client, layer) pairs; a pair is flagged when the client is
    left out of that layer's selection set.

    The client-level rates flag a client excluded from at least half the layers.
    """

    tpr: float
    fpr: float
    per_layer: tuple[tuple[int, frozenset], ...]
    malicious_pairs: int
    benign_pairs: int
    client_tpr: float
    client_fpr: float


def filter_stats(
    outcome: AggregationOutcome, truth: Mapping[int, bool], ids: Sequence[int] | None = None
) -> FilterStats:
    """``truth`` maps client id -> honest; ``ids`` (default: every key of
    ``truth``) are the clients that were in the batch."""
    ids = sorted(truth) if ids is None else list(ids)
    for c in ids:
        if c not in truth:
            raise KeyError(f"client {c} missing from the honesty map")
    for s in outcome.selected:
        stray = set(s) - set(ids)
        if stray:
            raise KeyError(f"selected ids {sorted(stray)} not in the batch")
    L = len(outcome.selected)
    tp = fp = 0
    per_layer = []
    excluded_count = {c: 0 for c in ids}
    for l, sel in enumerate(outcome.selected):
        excluded = frozenset(c for c in ids if c not in sel)
        per_layer.append((l, excluded))
        for c in excluded:
            excluded_count[c] += 1
            if truth[c]:
                fp += 1
            else:
                tp += 1
    n_bad = sum(1 for c in ids if not truth[c])
    n_good = len(ids) - n_bad
    flagged = {c for c, k in excluded_count.items() if 2 * k >= L}
    return FilterStats(
        tpr=tp / (n_bad * L) if n_bad else 0.0,
        fpr=fp / (n_good * L) if n_good else 0.0,
        per_layer=tuple(per_layer),
        malicious_pairs=n_bad * L,
        benign_pairs=n_good * L,
        client_tpr=sum(1 for c in flagged if not truth[c]) / n_bad if n_bad else 0.0,
        client_fpr=sum(1 for c in flagged if truth[c]) / n_good if n_good else 0.0,
    )


def lemma_bound(c_k, b_k, n, f, nu, zeta, c_mal_sq, c_sq) -> float:
    """κ = 2c_k(1 + f/(n-2f))(2ν + ζ + 2C_mal² + 2C²) + b_k C²."""
    return 2 * c_k * (1 + f / (n - 2 * f)) * (2 * nu + zeta + 2 * c_mal_sq + 2 * c_sq) + b_k * c_sq


@dataclass(frozen=True)
class KappaInputs:
    c_k: float
    b_k: float
    nu: float
    zeta: float
    c_sq: float
    c_mal_sq: float


@dataclass
class KappaReport:
    empirical_kappa: float
    bound: float
    inputs: KappaInputs
    trial_errors: list[float] = field(default_factory=list)
    trial_bounds: list[float] = field(default_factory=list)
    preconditions: list[bool] = field(default_factory=list)

    @property
    def violations(self) -> int:
        """Trials where the preconditions hold but the error exceeds the bound."""
        return sum(
            1 for e, b, ok in zip(self.trial_errors, self.trial_bounds, self.preconditions) if ok and e > b
        )

    def to_dict(self) -> dict:
        out = asdict(self)
        out["violations"] = self.violations
        return out


@dataclass(frozen=True)
class KappaScenario:
    """Fixed tiny problem; every trial draws a fresh global iterate.

    Clients ``0 .. n-f-1`` are benign, the last ``f`` malicious.
    """

    data: Dataset
    shards: tuple[ClientShard, ...]
    model: ModelState
    local: LocalTrainConfig
    f: int
    attack: atk.AttackSpec | None
    sparsification: SparsificationLevel = SparsificationLevel(0.0)
    init_scale: float = 0.1
    variance_batches: int = 8

    @property
    def n(self) -> int:
        return len(self.shards)


def make_kappa_scenario(
    n: int = 10,
    f: int = 2,
    attack: atk.AttackSpec | None = None,
    sparsification: float = 0.3,
    seed: int = 0,
    local: LocalTrainConfig | None = None,
    samples_per_client: int = 40,
    dim: int = 8,
    num_classes: int = 4,
) -> KappaScenario:
    """Small logistic-regression problem with IID shards for kappa trials."""
    from .data import partition_iid, synth_gaussian_mixture
    from .model import Architecture

    per_class = max(1, (n * samples_per_client) // num_classes)
    data = synth_gaussian_mixture(num_classes, dim, per_class, 0.5, seed, 1.5)
    shards = tuple(partition_iid(data, n, seed + 1))
    if local is None:
        local = LocalTrainConfig(tau=5, eta=0.1, momentum=0.0, lr_decay=1.0, batch_size=8)
    model = ModelState.init(Architecture("logreg", dim, num_classes))
    return KappaScenario(data, shards, model, local, f, attack, SparsificationLevel(sparsification))


@dataclass(frozen=True)
class TrialResult:
    error: float
    inputs: KappaInputs
    min_selected: int


def _client_xy(s: KappaScenario, c: int):
    idx = s.shards[c].indices
    return s.data.features[idx], s.data.labels[idx]


def _gradient_variance(s: KappaScenario, theta: np.ndarray, c: int, rng) -> float:
    x, y = _client_xy(s, c)
    full = loss_and_grad(s.model.arch, theta, x, y)[1]
    m = y.shape[0]
    bs = min(s.local.batch_size, m)
    if bs == m:
        return 0.0
    devs = []
    for _ in range(s.variance_batches):
        idx = rng.choice(m, size=bs, replace=False)
        g = loss_and_grad(s.model.arch, theta, x[idx], y[idx])[1]
        devs.append(float(np.sum((g - full) ** 2)))
    return float(np.mean(devs))


def run_trial(s: KappaScenario, aggregator: Callable[[UpdateBatch], AggregationOutcome], seed: int, trial: int) -> TrialResult:
    rng = substream(seed, 100, trial)
    theta = rng.normal(0.0, s.init_scale, s.model.params.dim)
    model = s.model.with_params(theta)
    layout = model.params.layout
    n, f = s.n, s.f

    honest = []
    for c in range(n):
        x, y = _client_xy(s, c)
        delta, _ = local_train(model, x, y, s.local, substream(seed, 101, trial, c))
        honest.append(LayeredUpdate(delta, layout))
    benign_ids = tuple(range(n - f))
    bad_ids = tuple(range(n - f, n))
    benign = UpdateBatch(tuple(honest[: n - f]), benign_ids)
    submitted = list(honest)
    if f and s.attack is not None:
        own = UpdateBatch(tuple(honest[n - f:]), bad_ids)
        ctx = atk.AttackContext(benign, bad_ids, int(rng.integers(2**63)), own)
        submitted[n - f:] = atk.generate(ctx, s.attack)
    batch = UpdateBatch(tuple(submitted), tuple(range(n)))
    outcome = aggregator(batch)
    target = benign.matrix().mean(axis=0)
    err = float(np.sum((outcome.aggregate.values - target) ** 2))

    bm = benign.matrix()
    k = s.sparsification.k_for(batch.dim)
    splits = [energy_split(row, k) for row in bm if np.any(row)]
    c_k = float(np.mean([e.c_k for e in splits])) if splits else 1.0
    b_k = float(np.mean([e.b_k for e in splits])) if splits else 0.0
    c_sq = float(np.max(np.sum(bm ** 2, axis=1)))
    survivors = set().union(*outcome.selected) & set(bad_ids)
    c_mal_sq = max((float(np.sum(submitted[i].values ** 2)) for i in survivors), default=0.0)
    grads = np.stack(
        [loss_and_grad(model.arch, theta, *_client_xy(s, c))[1] for c in benign_ids]
    )
    zeta = float(np.mean(np.sum((grads - grads.mean(axis=0)) ** 2, axis=1)))
    var_rng = substream(seed, 102, trial)
    nu = float(np.mean([_gradient_variance(s, theta, c, var_rng) for c in benign_ids]))
    return TrialResult(
        err,
        KappaInputs(c_k, b_k, nu, zeta, c_sq, c_mal_sq),
        min(len(sel) for sel in outcome.selected),
    )


def estimate_kappa(
    aggregator: Callable[[UpdateBatch], AggregationOutcome],
    scenario: KappaScenario,
    trials: int,
    seed: int,
) -> KappaReport:
    """Monte Carlo estimate of ``E||F(x) - mean_B||^2`` next to the closed-form bound.

    The bound's preconditions (``eta <= 1/(2 tau)`` and every ``|S^l| >= n/2 - f``)
    are checked per trial and reported, not enforced.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    n, f = scenario.n, scenario.f
    lr_ok = scenario.local.eta <= 1.0 / (2 * scenario.local.tau)
    results = [run_trial(scenario, aggregator, seed, t) for t in range(trials)]
    errors = [r.error for r in results]
    bounds = [
        lemma_bound(r.inputs.c_k, r.inputs.b_k, n, f, r.inputs.nu, r.inputs.zeta, r.inputs.c_mal_sq, r.inputs.c_sq)
        for r in results
    ]
    pre = [lr_ok and r.min_selected >= n / 2 - f for r in results]
    pooled = KappaInputs(
        c_k=float(np.mean([r.inputs.c_k for r in results])),
        b_k=float(np.mean([r.inputs.b_k for r in results])),
        nu=float(np.mean([r.inputs.nu for r in results])),
        zeta=float(np.mean([r.inputs.zeta for r in results])),
        c_sq=max(r.inputs.c_sq for r in results),
        c_mal_sq=max(r.inputs.c_mal_sq for r in results),
    )
    bound = lemma_bound(pooled.c_k, pooled.b_k, n, f, pooled.nu, pooled.zeta, pooled.c_mal_sq, pooled.c_sq)
    return KappaReport(float(np.mean(errors)), bound, pooled, errors, bounds, pre)


def resilience_audit(records) -> float:
    """Mean over rounds of ``||grad L_B(theta_t)||^2``; needs gradient logging."""
    values = [r.grad_norm_sq for r in records]
    if not values or any(v is None for v in values):
        raise ValueError("records carry no gradient log; rerun with log_gradients enabled")
    return float(np.mean(values))
