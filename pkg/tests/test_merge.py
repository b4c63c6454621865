"""Merge operator and scheduling tests."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from gossipmerge.align import LayerPermutation, apply_permutation, apply_permutation_arrays
from gossipmerge.linalg import RngStream
from gossipmerge.merge import (
    MergePlan,
    charge_communication,
    merge_agent,
    merge_round,
    per_event_cost,
    should_merge,
)
from gossipmerge.nn import flatten, init_model
from gossipmerge.topology import build_mixing, make_topology, mixing_spectrum


def random_models(n, dims, base_seed):
    return [init_model(dims, RngStream(base_seed, i)) for i in range(n)]


def test_identity_mode_two_agents_exact_average():
    models = random_models(2, [3, 6, 2], base_seed=1)
    topo = make_topology("fully_connected", 2)
    pi = np.full((2, 2), 0.5)
    result = merge_agent(0, models, pi, topo, MergePlan(mode="identity"))
    for (mw, mb), (aw, ab), (bw, bb) in zip(result.model.layers,
                                            models[0].layers, models[1].layers):
        np.testing.assert_array_equal(mw, 0.5 * aw + 0.5 * bw)
        np.testing.assert_array_equal(mb, 0.5 * ab + 0.5 * bb)


def test_identical_models_are_a_fixed_point_for_every_mode():
    base = init_model([4, 7, 5, 3], RngStream(2))
    models = [base.copy() for _ in range(3)]
    topo = make_topology("fully_connected", 3)
    pi = build_mixing(topo)
    batch = RngStream(2, 9).generator().normal(size=(32, 4))
    for mode in ("identity", "activation_match", "weight_match"):
        plan = MergePlan(mode=mode)
        new_models, _, stats = merge_round(models, pi, topo, plan, batches=[batch] * 3)
        assert stats.fixed_point_fraction == 1.0
        for merged in new_models:
            for (w, b), (ow, ob) in zip(merged.layers, base.layers):
                np.testing.assert_allclose(w, ow, atol=1e-12)
                np.testing.assert_allclose(b, ob, atol=1e-12)


def test_planted_neighbor_merges_back_to_reference():
    model_a = init_model([5, 12, 12, 4], RngStream(3))
    gen = RngStream(3, 1).generator()
    planted = LayerPermutation((gen.permutation(12), gen.permutation(12)))
    model_b = apply_permutation(model_a, planted)
    topo = make_topology("fully_connected", 2)
    pi = np.full((2, 2), 0.5)
    batch = gen.normal(size=(64, 5))
    result = merge_agent(0, [model_a, model_b], pi, topo,
                         MergePlan(mode="activation_match"), batch=batch)
    for (w, b), (ow, ob) in zip(result.model.layers, model_a.layers):
        np.testing.assert_allclose(w, ow, atol=1e-10)
        np.testing.assert_allclose(b, ob, atol=1e-10)


def test_identity_round_preserves_global_mean():
    for kind in ("fully_connected", "ring"):
        topo = make_topology(kind, 5)
        pi = build_mixing(topo)
        models = random_models(5, [3, 8, 2], base_seed=4)
        before = np.mean([flatten(m) for m in models], axis=0)
        new_models, _, _ = merge_round(models, pi, topo, MergePlan(mode="identity"))
        after = np.mean([flatten(m) for m in new_models], axis=0)
        np.testing.assert_allclose(after, before, atol=1e-12)


def test_identity_round_contracts_consensus_at_spectral_rate():
    for kind in ("fully_connected", "ring"):
        topo = make_topology(kind, 5)
        pi = build_mixing(topo)
        rho = mixing_spectrum(pi).contraction  # squared slem
        for seed in range(5):
            models = random_models(5, [3, 6, 2], base_seed=100 + seed)
            _, _, stats = merge_round(models, pi, topo, MergePlan(mode="identity"))
            assert stats.post_consensus <= rho * stats.pre_consensus + 1e-9


def test_communication_cost_matches_topology_formulas():
    fc5 = make_topology("fully_connected", 5)
    ring5 = make_topology("ring", 5)
    assert per_event_cost(fc5) == 4
    assert per_event_cost(ring5) == 2
    assert per_event_cost(make_topology("fully_connected", 1)) == 0
    # barrier every 2 epochs: fully connected pays 0.5*(N-1) per epoch, ring 0.5*2
    plan = MergePlan(mode="identity", frequency_n=20)
    assert charge_communication(fc5, 1, plan, iters_per_epoch=10) == pytest.approx(2.0)
    assert charge_communication(ring5, 1, plan, iters_per_epoch=10) == pytest.approx(1.0)
    assert charge_communication(fc5, 4, plan, iters_per_epoch=10) == pytest.approx(8.0)
    twice = MergePlan(mode="identity", frequency_n=10)
    assert charge_communication(fc5, 1, twice, iters_per_epoch=10) == pytest.approx(4.0)
    assert charge_communication(make_topology("fully_connected", 1), 3, plan, 10) == 0.0


def test_should_merge_schedule():
    every = MergePlan(frequency_n=1)
    assert all(should_merge(k, every) for k in range(1, 6))
    sparse = MergePlan(frequency_n=3)
    assert [should_merge(k, sparse) for k in range(1, 7)] == [False, False, True,
                                                              False, False, True]
    with pytest.raises(ValueError, match="iteration index"):
        should_merge(0, every)


def test_positive_weight_outside_neighborhood_is_rejected():
    topo = make_topology("ring", 5)
    pi = np.full((5, 5), 0.2)  # fully connected weights on a ring topology
    models = random_models(5, [3, 4, 2], base_seed=5)
    with pytest.raises(ValueError, match="topology violation"):
        merge_agent(0, models, pi, topo, MergePlan(mode="identity"))


def test_single_agent_round_is_bitwise_noop():
    topo = make_topology("fully_connected", 1)
    pi = build_mixing(topo)
    model = init_model([4, 5, 3], RngStream(6))
    extra = [(w * 0.25, b + 1.0) for w, b in model.layers]
    new_models, new_extras, stats = merge_round(
        [model], pi, topo, MergePlan(mode="activation_match"), extras=[extra])
    for (w, b), (ow, ob) in zip(new_models[0].layers, model.layers):
        np.testing.assert_array_equal(w, ow)
        np.testing.assert_array_equal(b, ob)
    for (w, b), (ow, ob) in zip(new_extras[0], extra):
        np.testing.assert_array_equal(w, ow)
        np.testing.assert_array_equal(b, ob)
    assert stats.rounds_charged == 0
    assert stats.pre_consensus == 0.0


def test_extras_travel_with_the_model_permutation():
    model_a = init_model([5, 10, 4], RngStream(7))
    extra_a = [(np.abs(w) + 0.5, np.abs(b) + 0.5) for w, b in model_a.layers]
    gen = RngStream(7, 1).generator()
    planted = LayerPermutation((gen.permutation(10),))
    model_b = apply_permutation(model_a, planted)
    extra_b = apply_permutation_arrays(extra_a, planted)
    topo = make_topology("fully_connected", 2)
    pi = np.full((2, 2), 0.5)
    batch = gen.normal(size=(48, 5))
    result = merge_agent(0, [model_a, model_b], pi, topo,
                         MergePlan(mode="activation_match"), batch=batch,
                         extras=[extra_a, extra_b])
    for (w, b), (ow, ob) in zip(result.extra, extra_a):
        np.testing.assert_allclose(w, ow, atol=1e-12)
        np.testing.assert_allclose(b, ob, atol=1e-12)


def test_round_stats_shape_and_ranges():
    topo = make_topology("ring", 4)
    pi = build_mixing(topo)
    models = random_models(4, [3, 5, 2], base_seed=8)
    _, _, stats = merge_round(models, pi, topo, MergePlan(mode="identity"), round_index=7)
    assert stats.round_index == 7
    assert len(stats.pre_distance) == 4 and len(stats.post_distance) == 4
    assert stats.rounds_charged == 2
    assert 0.0 <= stats.fixed_point_fraction <= 1.0
    assert stats.fixed_point_fraction == 1.0  # identity mode never moves a unit


def test_matching_mode_requires_a_batch():
    topo = make_topology("fully_connected", 2)
    pi = build_mixing(topo)
    models = random_models(2, [3, 4, 2], base_seed=9)
    with pytest.raises(ValueError, match="batch"):
        merge_round(models, pi, topo, MergePlan(mode="activation_match"))


def test_threaded_round_matches_serial_round():
    topo = make_topology("fully_connected", 4)
    pi = build_mixing(topo)
    models = random_models(4, [4, 8, 3], base_seed=10)
    batches = [RngStream(10, 50 + i).generator().normal(size=(32, 4)) for i in range(4)]
    plan = MergePlan(mode="activation_match")
    serial, _, _ = merge_round(models, pi, topo, plan, batches=batches)
    with ThreadPoolExecutor(max_workers=3) as pool:
        threaded, _, _ = merge_round(models, pi, topo, plan, batches=batches,
                                     mapper=pool.map)
    for a, b in zip(serial, threaded):
        for (w, x), (ow, ox) in zip(a.layers, b.layers):
            np.testing.assert_array_equal(w, ow)
            np.testing.assert_array_equal(x, ox)


def test_plan_validation():
    with pytest.raises(ValueError, match="merge mode"):
        MergePlan(mode="average")
    with pytest.raises(ValueError, match="frequency"):
        MergePlan(frequency_n=0)
    with pytest.raises(ValueError, match="matching_batch"):
        MergePlan(matching_batch=0)
    with pytest.raises(ValueError, match="match_stat"):
        MergePlan(match_stat="cosine")
    with pytest.raises(ValueError, match="max_sweeps"):
        MergePlan(max_sweeps=0)
