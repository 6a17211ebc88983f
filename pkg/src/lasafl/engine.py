"""Federated training loop with Byzantine clients."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import attacks as atk
from .aggregators import AggregationOutcome, make_aggregator
from .config import ExperimentConfig, LocalTrainConfig, resolve_config
from .data import (
    ClientShard,
    Dataset,
    load_idx,
    mark_malicious,
    partition_dirichlet,
    partition_iid,
    split_per_class,
    synth_gaussian_mixture,
)
from .model import Architecture, ModelState, evaluate, loss_and_grad
from .update import LayeredUpdate, UpdateBatch

log = logging.getLogger(__name__)

# spawn-key tags for independent random substreams
_SAMPLE, _CLIENT, _ATTACK = 1, 2, 3


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


@dataclass(frozen=True)
class RoundRecord:
    round: int
    sampled_ids: tuple[int, ...]
    malicious_ids: tuple[int, ...]
    outcome: AggregationOutcome
    test_accuracy: float
    train_loss: float
    agg_norm: float
    grad_norm_sq: float | None = None


@dataclass(frozen=True)
class Federation:
    """Everything fixed for the lifetime of one experiment."""

    train: Dataset
    test: Dataset
    clients: tuple[ClientShard, ...]
    arch: Architecture


def _clip(g: np.ndarray, c: float) -> np.ndarray:
    if c <= 0:
        return g
    norm = np.linalg.norm(g)
    return g if norm <= c else g * (c / norm)


def local_train(
    model: ModelState,
    x: np.ndarray,
    y: np.ndarray,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
    eta: float | None = None,
) -> tuple[np.ndarray, list[float]]:
    """Run ``tau`` momentum-SGD steps; return ``(theta_start - theta_end, grad norms)``."""
    eta = cfg.eta if eta is None else eta
    theta0 = model.params.values
    theta = theta0.copy()
    velocity = np.zeros_like(theta)
    norms = []
    m = y.shape[0]
    bs = min(cfg.batch_size, m)
    for _ in range(cfg.tau):
        idx = rng.choice(m, size=bs, replace=False) if bs < m else np.arange(m)
        _, g = loss_and_grad(model.arch, theta, x[idx], y[idx])
        g = _clip(g, cfg.clip)
        norms.append(float(np.linalg.norm(g)))
        velocity = cfg.momentum * velocity + g
        theta -= eta * velocity
    return theta0 - theta, norms


def local_update(
    model: ModelState,
    shard: ClientShard,
    data: Dataset,
    cfg: LocalTrainConfig,
    rng: np.random.Generator,
    eta: float | None = None,
) -> LayeredUpdate:
    if len(shard) == 0:
        raise ValueError(f"client {shard.client_id} has no data")
    x, y = data.features[shard.indices], data.labels[shard.indices]
    delta, _ = local_train(model, x, y, cfg, rng, eta)
    return LayeredUpdate(delta, model.params.layout)


def honest_gradient_norm_sq(model: ModelState, fed: Federation) -> float:
    """``||grad L_B(theta)||^2`` with ``L_B`` the mean of honest clients' losses."""
    grads = []
    for c in fed.clients:
        if c.honest:
            x, y = fed.train.features[c.indices], fed.train.labels[c.indices]
            grads.append(loss_and_grad(model.arch, model.params.values, x, y)[1])
    g = np.mean(grads, axis=0)
    return float(g @ g)


def craft(
    spec: atk.AttackSpec,
    benign: UpdateBatch,
    own: UpdateBatch,
    seed: int,
) -> list[LayeredUpdate]:
    """Generate malicious submissions; ByzMean with one attacker degrades to its base."""
    ctx = atk.AttackContext(benign, own.client_ids, seed, own)
    if spec.kind == "byzmean" and ctx.f < 2:
        spec = replace(spec, kind=spec.base)
    return atk.generate(ctx, spec)


def run_round(
    model: ModelState,
    fed: Federation,
    cfg: ExperimentConfig,
    aggregator,
    round_idx: int,
) -> tuple[ModelState, RoundRecord]:
    seed = cfg.seed
    n_clients = len(fed.clients)
    sampled = np.sort(substream(seed, _SAMPLE, round_idx).choice(n_clients, size=cfg.h, replace=False))
    eta = cfg.local.eta * cfg.local.lr_decay ** round_idx

    grad_norm_sq = honest_gradient_norm_sq(model, fed) if cfg.log_gradients else None

    # every sampled client trains honestly first; attackers then replace theirs
    updates = {}
    for cid in sampled:
        shard = fed.clients[cid]
        rng = substream(seed, _CLIENT, round_idx, cid)
        updates[int(cid)] = local_update(model, shard, fed.train, cfg.local, rng, eta)

    benign_ids = [int(c) for c in sampled if fed.clients[c].honest]
    bad_ids = [int(c) for c in sampled if not fed.clients[c].honest]
    submitted = dict(updates)
    if cfg.attack is not None and bad_ids:
        if not benign_ids:
            raise ValueError(f"round {round_idx}: no benign client sampled")
        benign = UpdateBatch(tuple(updates[c] for c in benign_ids), tuple(benign_ids))
        own = UpdateBatch(tuple(updates[c] for c in bad_ids), tuple(bad_ids))
        attack_seed = int(substream(seed, _ATTACK, round_idx).integers(2**63))
        for cid, u in zip(bad_ids, craft(cfg.attack, benign, own, attack_seed)):
            submitted[cid] = u
        malicious = tuple(bad_ids)
    else:
        malicious = ()

    ids = tuple(int(c) for c in sampled)
    batch = UpdateBatch(tuple(submitted[c] for c in ids), ids)
    outcome = aggregator(batch)
    new_model = model.with_params(model.params.values - outcome.aggregate.values)
    acc, _ = evaluate(new_model, fed.test.features, fed.test.labels)
    _, train_loss = evaluate(new_model, fed.train.features, fed.train.labels)
    record = RoundRecord(
        round=round_idx,
        sampled_ids=ids,
        malicious_ids=malicious,
        outcome=outcome,
        test_accuracy=acc,
        train_loss=train_loss,
        agg_norm=float(np.linalg.norm(outcome.aggregate.values)),
        grad_norm_sq=grad_norm_sq,
    )
    return new_model, record


def build_federation(cfg: ExperimentConfig) -> Federation:
    ds = cfg.dataset
    if ds.kind == "synthetic":
        full = synth_gaussian_mixture(
            ds.num_classes,
            ds.dim,
            ds.samples_per_class + ds.test_samples_per_class,
            ds.spread,
            cfg.seed,
            ds.separation,
        )
        train, test = split_per_class(full, ds.test_samples_per_class)
    else:
        train = load_idx(ds.train_images, ds.train_labels)
        test = load_idx(ds.test_images, ds.test_labels)
    part_seed = int(substream(cfg.seed, 10).integers(2**63))
    if cfg.partition.kind == "iid":
        shards = partition_iid(train, cfg.n, part_seed)
    else:
        shards = partition_dirichlet(train, cfg.n, cfg.partition.alpha, part_seed)
    mal_seed = int(substream(cfg.seed, 11).integers(2**63))
    shards = mark_malicious(shards, cfg.attack_ratio if cfg.attack else 0.0, mal_seed)
    num_classes = max(train.num_classes, test.num_classes)
    arch = Architecture(cfg.model.arch, train.dim, num_classes, cfg.model.hidden)
    return Federation(train, test, tuple(shards), arch)


def run_experiment(cfg: ExperimentConfig, fed: Federation | None = None) -> list[RoundRecord]:
    cfg = resolve_config(cfg)
    fed = fed or build_federation(cfg)
    model = ModelState.init(fed.arch, cfg.seed)
    aggregator = make_aggregator(cfg.aggregator.key, cfg.aggregator.params())
    records = []
    for t in range(cfg.rounds):
        model, rec = run_round(model, fed, cfg, aggregator, t)
        records.append(rec)
        log.debug("round %d acc=%.4f loss=%.4f", t, rec.test_accuracy, rec.train_loss)
    return records
