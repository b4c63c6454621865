"""Experiment engine tests: data, partitioning, trajectories, metrics."""

from __future__ import annotations

import numpy as np
import pytest

from gossipmerge.config import ExperimentConfig
from gossipmerge.linalg import RngStream
from gossipmerge.nn import flatten, init_model, unflatten
from gossipmerge.sim import (
    STREAM_BATCH,
    STREAM_INIT,
    AgentState,
    Dataset,
    accuracy,
    consensus_and_gradnorm,
    estimate_heterogeneity,
    load_csv_dataset,
    make_synthetic,
    partition,
    run_experiment,
    split_train_test,
    train_single,
)
from gossipmerge.optim import new_state
from gossipmerge.topology import build_mixing, make_topology, mixing_spectrum


def models_equal(a, b) -> bool:
    return all(np.array_equal(w, ow) and np.array_equal(x, ox)
               for (w, x), (ow, ox) in zip(a.layers, b.layers))


def test_synthetic_dataset_is_deterministic_and_shaped():
    a = make_synthetic(5, 8, 20, 3.0, RngStream(42))
    b = make_synthetic(5, 8, 20, 3.0, RngStream(42))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert a.samples == 100 and a.dims == 8 and a.num_classes == 5
    np.testing.assert_array_equal(a.labels, np.repeat(np.arange(5), 20))


def test_synthetic_centroids_sit_separation_apart():
    ds = make_synthetic(4, 10, 2000, 6.0, RngStream(7))
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(4)])
    for i in range(4):
        for j in range(i + 1, 4):
            gap = float(np.linalg.norm(centroids[i] - centroids[j]))
            assert gap == pytest.approx(6.0, abs=0.15)  # sampling noise ~ 1/sqrt(2000)


def test_synthetic_wide_separation_supports_centroid_classifier():
    ds = make_synthetic(10, 16, 100, 8.0, RngStream(1))
    centroids = np.stack([ds.features[ds.labels == c].mean(axis=0) for c in range(10)])
    d2 = ((ds.features[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assert float(np.mean(np.argmin(d2, axis=1) == ds.labels)) >= 0.99


def test_synthetic_zero_separation_mixes_classes():
    ds = make_synthetic(3, 6, 3000, 0.0, RngStream(5))
    for c in range(3):
        centroid = ds.features[ds.labels == c].mean(axis=0)
        assert float(np.linalg.norm(centroid)) < 0.2


def test_synthetic_validation():
    with pytest.raises(ValueError, match="samples_per_class"):
        make_synthetic(3, 6, 0, 1.0, RngStream(0))
    with pytest.raises(ValueError, match="separation"):
        make_synthetic(3, 6, 5, -1.0, RngStream(0))
    with pytest.raises(ValueError, match="orthonormal"):
        make_synthetic(8, 4, 5, 1.0, RngStream(0))


def test_split_train_test_partitions_the_samples():
    ds = make_synthetic(5, 8, 40, 2.0, RngStream(3))
    train, test = split_train_test(ds, 0.25, RngStream(3, 1))
    assert train.samples == 150 and test.samples == 50
    key = lambda d: np.lexsort(np.vstack([d.features.T, d.labels]))
    merged_feats = np.vstack([train.features, test.features])
    merged_labels = np.concatenate([train.labels, test.labels])
    order_a = np.lexsort(merged_feats.T)
    order_b = np.lexsort(ds.features.T)
    np.testing.assert_array_equal(merged_feats[order_a], ds.features[order_b])
    np.testing.assert_array_equal(merged_labels[order_a], ds.labels[order_b])
    with pytest.raises(ValueError, match="test_fraction"):
        split_train_test(ds, 0.0, RngStream(0))


def test_partition_iid_balances_classes():
    ds = make_synthetic(10, 12, 100, 2.0, RngStream(11))
    part = partition(ds, 5, "iid", RngStream(11, 1))
    seen = set()
    for shard in part.indices:
        assert len(shard) == 200
        counts = np.bincount(ds.labels[list(shard)], minlength=10)
        np.testing.assert_array_equal(counts, np.full(10, 20))
        assert seen.isdisjoint(shard)
        seen.update(shard)
    assert len(seen) == ds.samples


def test_partition_iid_uneven_deviation_at_most_one():
    ds = make_synthetic(3, 4, 10, 2.0, RngStream(13))
    part = partition(ds, 4, "iid", RngStream(13, 1))
    share = 10 / 4
    for shard in part.indices:
        counts = np.bincount(ds.labels[list(shard)], minlength=3)
        assert np.all(np.abs(counts - share) <= 1)


def test_partition_class_shard_gives_whole_classes():
    ds = make_synthetic(10, 12, 30, 2.0, RngStream(17))
    part = partition(ds, 5, "class_shard", RngStream(17, 1))
    seen = set()
    for shard in part.indices:
        labels = set(ds.labels[list(shard)].tolist())
        assert len(labels) == 2  # 10 classes over 5 agents
        assert len(shard) == 60
        assert seen.isdisjoint(shard)
        seen.update(shard)
    assert len(seen) == ds.samples
    with pytest.raises(ValueError, match="class_shard"):
        partition(ds, 11, "class_shard", RngStream(0))


def test_partition_single_agent_owns_everything():
    ds = make_synthetic(4, 6, 10, 2.0, RngStream(19))
    for scheme in ("iid", "class_shard"):
        part = partition(ds, 1, scheme, RngStream(19, 1))
        assert part.indices == (tuple(range(ds.samples)),)


def base_config(**kw) -> ExperimentConfig:
    defaults = dict(seed=0, agents=1, classes=3, dims=4, samples_per_class=40,
                    separation=3.0, hidden=(8,), K=200, batch=16, eval_every=50,
                    topology="fully_connected", merge="activation_match", n=1,
                    matching_batch=32, alpha=0.05)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


@pytest.mark.parametrize("kind", ["sgd", "msgd", "amsgrad"])
def test_single_agent_run_is_bitwise_single_node(kind):
    cfg = base_config(optimizer=kind)
    result = run_experiment(cfg)
    arch = [cfg.dims, *cfg.hidden, cfg.classes]
    model = init_model(arch, RngStream(cfg.seed).derive(STREAM_INIT, 0))
    ref_model, _, losses = train_single(
        model, kind, cfg.hyperparams(), result.train, result.agents[0].shard,
        cfg.batch, cfg.K, RngStream(cfg.seed).derive(STREAM_BATCH, 0))
    assert models_equal(result.agents[0].model, ref_model)
    assert result.records[-1].agent_loss[0] == losses[-1]
    assert not result.diverged


def test_merge_disabled_agents_evolve_independently():
    cfg = base_config(agents=3, topology="ring", K=60, n=61, classes=3,
                      samples_per_class=60, optimizer="msgd")
    result = run_experiment(cfg)
    arch = [cfg.dims, *cfg.hidden, cfg.classes]
    for i in range(3):
        model = init_model(arch, RngStream(cfg.seed).derive(STREAM_INIT, i))
        ref_model, _, _ = train_single(
            model, cfg.optimizer, cfg.hyperparams(), result.train,
            result.agents[i].shard, cfg.batch, cfg.K,
            RngStream(cfg.seed).derive(STREAM_BATCH, i))
        assert models_equal(result.agents[i].model, ref_model)
    assert result.merge_stats == []


def quadratic_config(**kw) -> ExperimentConfig:
    defaults = dict(seed=2, agents=5, topology="ring", merge="identity", n=1,
                    optimizer="sgd", alpha=0.02, loss="mse", hidden=(),
                    classes=3, dims=4, samples_per_class=50, separation=2.0,
                    partition="iid", K=100, batch=10_000, eval_every=1)
    defaults.update(kw)
    return ExperimentConfig(**defaults)


def closed_form_grad(theta, x, y):
    # linear model, mse: 0.5/B * sum ||x w^T + b - y||^2 in flatten order [w, b]
    dims, classes = x.shape[1], y.shape[1]
    w = theta[:classes * dims].reshape(classes, dims)
    b = theta[classes * dims:]
    resid = x @ w.T + b - y
    grad_w = resid.T @ x / x.shape[0]
    grad_b = resid.mean(axis=0)
    return np.concatenate([grad_w.ravel(), grad_b])


def test_quadratic_engine_matches_dense_reference():
    cfg = quadratic_config()
    result = run_experiment(cfg)
    assert not result.diverged
    train = result.train
    onehot = np.zeros((train.samples, cfg.classes))
    onehot[np.arange(train.samples), train.labels] = 1.0
    pi = build_mixing(make_topology("ring", cfg.agents))
    shards = [np.asarray(a.shard) for a in result.agents]
    theta = np.stack([
        flatten(init_model([cfg.dims, cfg.classes], RngStream(cfg.seed).derive(STREAM_INIT, i)))
        for i in range(cfg.agents)])
    reference_consensus = []
    for _ in range(cfg.K):
        grads = np.stack([closed_form_grad(theta[i], train.features[shards[i]],
                                           onehot[shards[i]])
                          for i in range(cfg.agents)])
        theta = pi @ theta - cfg.alpha * grads
        centered = theta - theta.mean(axis=0)
        reference_consensus.append(float(np.mean(np.sum(centered * centered, axis=1))))
    got_consensus = [r.consensus for r in result.records]
    np.testing.assert_allclose(got_consensus, reference_consensus, atol=1e-10)
    for i in range(cfg.agents):
        np.testing.assert_allclose(flatten(result.agents[i].model), theta[i], atol=1e-10)


def test_quadratic_consensus_contracts_and_gradnorm_trend_is_monotone():
    cfg = quadratic_config(K=60)
    result = run_experiment(cfg)
    rho = mixing_spectrum(build_mixing(make_topology("ring", cfg.agents))).contraction
    for stats in result.merge_stats:
        assert stats.post_consensus <= rho * stats.pre_consensus + 1e-9
    gradnorms = np.asarray([r.grad_norm for r in result.records])
    running = np.cumsum(gradnorms) / np.arange(1, len(gradnorms) + 1)
    diffs = np.diff(running[10:])
    assert np.all(diffs <= 1e-12)


def test_identical_configs_and_any_worker_count_reproduce_runs():
    cfg = base_config(agents=4, topology="fully_connected", K=30, eval_every=5,
                      optimizer="amsgrad", n=3, classes=4, dims=6,
                      samples_per_class=30)
    first = run_experiment(cfg)
    second = run_experiment(cfg)
    threaded = run_experiment(ExperimentConfig(**{**cfg.__dict__, "workers": 3}))
    assert first.records == second.records
    assert first.records == threaded.records
    for a, b in zip(first.agents, threaded.agents):
        assert models_equal(a.model, b.model)


def test_heterogeneity_zero_for_shared_shard_full_batches():
    ds = make_synthetic(3, 5, 30, 2.0, RngStream(23))
    shard = tuple(range(ds.samples))
    agents = []
    for i in range(3):
        model = init_model([5, 6, 3], RngStream(23, i))
        agents.append(AgentState(i, model, new_state("sgd", model), shard, RngStream(23, 50 + i)))
    sigma2, kappa2 = estimate_heterogeneity(agents, ds, probe_batches=3,
                                            batch_size=10 ** 6, stream=RngStream(23, 99))
    assert sigma2 == 0.0
    assert kappa2 == pytest.approx(0.0, abs=1e-28)
    with pytest.raises(ValueError, match="probe batches"):
        estimate_heterogeneity(agents, ds, probe_batches=1, batch_size=8, stream=RngStream(0))


def test_class_shards_are_more_heterogeneous_than_iid():
    wins = 0
    for seed in range(10):
        ds = make_synthetic(6, 8, 40, 4.0, RngStream(seed, 7))
        model = init_model([8, 10, 6], RngStream(seed, 8))
        kappas = {}
        for scheme in ("iid", "class_shard"):
            part = partition(ds, 3, scheme, RngStream(seed, 9))
            agents = [AgentState(i, model.copy(), new_state("sgd", model), part.indices[i],
                                 RngStream(seed, 10 + i)) for i in range(3)]
            _, kappas[scheme] = estimate_heterogeneity(
                agents, ds, probe_batches=2, batch_size=16, stream=RngStream(seed, 20))
        if kappas["iid"] < kappas["class_shard"]:
            wins += 1
    assert wins == 10


def test_consensus_and_gradnorm_reference_points():
    ds = make_synthetic(3, 4, 40, 2.0, RngStream(29))
    shard = tuple(range(ds.samples))
    model = init_model([4, 5, 3], RngStream(29, 1))
    same = [AgentState(i, model.copy(), new_state("sgd", model), shard, RngStream(29, 2 + i))
            for i in range(3)]
    consensus, _ = consensus_and_gradnorm(same, ds)
    assert consensus < 1e-30  # identical replicas, only mean-rounding residue

    vec = flatten(model)
    displaced = [
        AgentState(0, unflatten(vec + 0.5, [4, 5, 3]), new_state("sgd", model), shard, RngStream(0)),
        AgentState(1, unflatten(vec - 0.5, [4, 5, 3]), new_state("sgd", model), shard, RngStream(1)),
    ]
    consensus, _ = consensus_and_gradnorm(displaced, ds)
    assert consensus == pytest.approx(0.25 * vec.shape[0], rel=1e-12)


def test_gradnorm_vanishes_at_least_squares_solution():
    ds = make_synthetic(3, 4, 40, 2.0, RngStream(31))
    onehot = np.zeros((ds.samples, 3))
    onehot[np.arange(ds.samples), ds.labels] = 1.0
    aug = np.hstack([ds.features, np.ones((ds.samples, 1))])
    sol, *_ = np.linalg.lstsq(aug, onehot, rcond=None)
    w = sol[:-1].T.copy()
    b = sol[-1].copy()
    theta = np.concatenate([w.ravel(), b])
    part = partition(ds, 2, "iid", RngStream(31, 1))
    agents = [AgentState(i, unflatten(theta, [4, 3]), new_state("sgd", unflatten(theta, [4, 3])),
                         part.indices[i], RngStream(31, 2 + i)) for i in range(2)]
    _, gradnorm = consensus_and_gradnorm(agents, ds, loss="mse")
    assert gradnorm < 1e-6


def test_divergence_aborts_with_diagnostic_record():
    cfg = quadratic_config(alpha=100.0, K=200, eval_every=1000)
    result = run_experiment(cfg)
    assert result.diverged
    assert result.records, "diagnostic record missing"
    last = result.records[-1]
    assert last.iteration < cfg.K
    assert any(not np.isfinite(v) or v > 1e6 for v in last.agent_loss)


def test_pretraining_changes_the_trajectory():
    plain = run_experiment(base_config(K=20, eval_every=20))
    warmed = run_experiment(base_config(K=20, eval_every=20, pretrain_iters=10))
    assert not models_equal(plain.agents[0].model, warmed.agents[0].model)


def test_csv_ingester_round_trip(tmp_path):
    path = tmp_path / "data.csv"
    path.write_text("f0,f1,label\n0.5,1.5,0\n-1.0,2.0,1\n0.0,0.25,1\n2.0,-1.0,0\n")
    ds = load_csv_dataset(str(path))
    assert ds.samples == 4 and ds.dims == 2 and ds.num_classes == 2
    np.testing.assert_array_equal(ds.labels, [0, 1, 1, 0])
    np.testing.assert_allclose(ds.features[1], [-1.0, 2.0])
    bad = tmp_path / "bad.csv"
    bad.write_text("f0,label\n1.0,0.5\n2.0,1.0\n")
    with pytest.raises(ValueError, match="integer labels"):
        load_csv_dataset(str(bad))


def test_dataset_validation():
    with pytest.raises(ValueError, match="finite"):
        Dataset(np.array([[np.inf, 0.0]]), np.array([0]), 1)
    with pytest.raises(ValueError, match="integers"):
        Dataset(np.zeros((2, 2)), np.array([0.0, 1.0]), 2)
    with pytest.raises(ValueError, match=r"\[0, 2\)"):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError, match="empty shard"):
        AgentState(0, init_model([2, 2], RngStream(0)), new_state("sgd", init_model([2, 2], RngStream(0))), (), RngStream(0))
