import dataclasses

import numpy as np
import pytest

from lasafl.aggregators import fedavg, make_aggregator
from lasafl.attacks import AttackSpec
from lasafl.config import AggregatorConfig, DatasetConfig, ExperimentConfig
from lasafl.engine import build_federation, local_train, run_experiment, run_round, substream
from lasafl.model import ModelState

SMALL = ExperimentConfig(
    dataset=DatasetConfig(num_classes=4, dim=8, samples_per_class=60, test_samples_per_class=30),
    n=10,
    h=6,
    rounds=8,
    aggregator=AggregatorConfig(key="fedavg"),
)


def test_zero_rounds():
    assert run_experiment(dataclasses.replace(SMALL, rounds=0)) == []


def test_single_client_reduces_to_centralised_sgd():
    cfg = dataclasses.replace(SMALL, n=1, h=1, rounds=5)
    records = run_experiment(cfg)
    fed = build_federation(cfg)
    model = ModelState.init(fed.arch, cfg.seed)
    x, y = fed.train.features[fed.clients[0].indices], fed.train.labels[fed.clients[0].indices]
    for t, rec in enumerate(records):
        eta = cfg.local.eta * cfg.local.lr_decay ** t
        delta, _ = local_train(model, x, y, cfg.local, substream(cfg.seed, 2, t, 0), eta)
        model = model.with_params(model.params.values - delta)
        assert np.array_equal(rec.outcome.aggregate.values, delta)


def test_same_seed_same_records():
    cfg = dataclasses.replace(SMALL, attack=AttackSpec("lie"), aggregator=AggregatorConfig(key="lasa"))
    a, b = run_experiment(cfg), run_experiment(cfg)
    for ra, rb in zip(a, b):
        assert ra.sampled_ids == rb.sampled_ids and ra.malicious_ids == rb.malicious_ids
        assert np.array_equal(ra.outcome.aggregate.values, rb.outcome.aggregate.values)
        assert ra.test_accuracy == rb.test_accuracy and ra.train_loss == rb.train_loss
    other = run_experiment(dataclasses.replace(cfg, seed=1))
    assert any(ra.sampled_ids != rc.sampled_ids for ra, rc in zip(a, other))


def test_honest_updates_ignore_attack_choice():
    seen = {}
    for kind in ("signflip", "random", "byzmean"):
        cfg = dataclasses.replace(SMALL, attack=AttackSpec(kind), h=10)
        fed = build_federation(cfg)
        model = ModelState.init(fed.arch, cfg.seed)

        def capture(batch, kind=kind):
            seen[kind] = batch
            return fedavg(batch)

        run_round(model, fed, cfg, capture, 0)
    honest = [c.client_id for c in fed.clients if c.honest]
    rows = {k: {cid: u.values for cid, u in zip(b.client_ids, b.updates)} for k, b in seen.items()}
    for cid in honest:
        assert np.array_equal(rows["signflip"][cid], rows["random"][cid])
        assert np.array_equal(rows["signflip"][cid], rows["byzmean"][cid])


def test_global_update_rule():
    cfg = dataclasses.replace(SMALL, aggregator=AggregatorConfig(key="lasa"))
    fed = build_federation(cfg)
    model = ModelState.init(fed.arch, cfg.seed)
    agg = make_aggregator("lasa", cfg.aggregator.params())
    for t in range(3):
        new, rec = run_round(model, fed, cfg, agg, t)
        delta = rec.outcome.aggregate.values
        assert np.array_equal(new.params.values, model.params.values - delta)
        assert np.allclose(new.params.values + delta, model.params.values, rtol=0, atol=1e-15)
        assert len(rec.sampled_ids) == cfg.h == len(set(rec.sampled_ids))
        model = new


def test_sampled_malicious_are_marked():
    cfg = dataclasses.replace(SMALL, attack=AttackSpec("signflip"), rounds=6)
    fed = build_federation(cfg)
    bad = {c.client_id for c in fed.clients if not c.honest}
    assert len(bad) == 2
    for rec in run_experiment(cfg, fed):
        assert set(rec.malicious_ids) == bad & set(rec.sampled_ids)


def test_no_attack_learns():
    cfg = dataclasses.replace(SMALL, rounds=20)
    recs = run_experiment(cfg)
    assert recs[-1].test_accuracy >= recs[0].test_accuracy
    assert recs[-1].train_loss < recs[0].train_loss


def test_fedavg_degrades_under_random_attack():
    cfg = ExperimentConfig(aggregator=AggregatorConfig(key="fedavg"))  # desk defaults
    clean = run_experiment(cfg)[-1].test_accuracy
    hit = run_experiment(dataclasses.replace(cfg, attack=AttackSpec("random")))[-1].test_accuracy
    assert hit < clean - 0.10


def test_gradient_logging():
    from lasafl.metrics import resilience_audit

    cfg = dataclasses.replace(SMALL, log_gradients=True, rounds=10)
    recs = run_experiment(cfg)
    assert recs[-1].grad_norm_sq < recs[0].grad_norm_sq
    assert resilience_audit(recs) > 0
    with pytest.raises(ValueError):
        resilience_audit(run_experiment(dataclasses.replace(cfg, log_gradients=False)))
