"""Neighborhood model merging over a gossip topology.

A merge round is a synchronous barrier: every agent reads the same
snapshot of all models, aligns each neighbor to itself (per the plan's
mode), and replaces its model with the mixing-weighted average of the
aligned neighborhood. Alignments are recomputed from scratch every round
because the models drift between barriers. Auxiliary per-coordinate
statistics (the adaptive optimizer's gossiped surrogate) travel with the
same weights and the same permutations in the same round.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .align import (
    LayerPermutation,
    activation_match,
    apply_permutation_arrays,
    fixed_point_fraction,
    identity_permutation,
    weight_match,
)
from .nn import LayerArrays, ModelParams, flatten, forward
from .topology import Topology, neighbors, require_mixing

__all__ = [
    "MERGE_MODES",
    "AgentMergeResult",
    "MergePlan",
    "MergeRoundStats",
    "charge_communication",
    "merge_agent",
    "merge_round",
    "per_event_cost",
    "should_merge",
]

MERGE_MODES = ("activation_match", "weight_match", "identity")


@dataclass(frozen=True)
class MergePlan:
    """How and how often agents merge.

    mode "identity" is plain weight averaging; the matching modes align
    each neighbor's hidden units to the merging agent first.
    frequency_n counts local iterations between merge barriers.
    matching_batch is the number of reference-shard samples used for
    activation matching; match_stat selects its statistic.
    """

    mode: str = "activation_match"
    frequency_n: int = 1
    matching_batch: int = 256
    match_stat: str = "covariance"
    max_sweeps: int = 50

    def __post_init__(self) -> None:
        if self.mode not in MERGE_MODES:
            raise ValueError(f"unknown merge mode {self.mode!r}")
        if self.frequency_n < 1:
            raise ValueError(f"merge frequency must be >= 1, got {self.frequency_n}")
        if self.matching_batch < 1:
            raise ValueError(f"matching_batch must be >= 1, got {self.matching_batch}")
        if self.match_stat not in ("covariance", "correlation"):
            raise ValueError(f"unknown match_stat {self.match_stat!r}")
        if self.max_sweeps < 1:
            raise ValueError(f"max_sweeps must be >= 1, got {self.max_sweeps}")


@dataclass(frozen=True)
class MergeRoundStats:
    """One barrier's bookkeeping for the metrics stream."""

    round_index: int
    pre_distance: tuple[float, ...]  # per-agent ||x_i - x_bar||^2 before
    post_distance: tuple[float, ...]
    rounds_charged: int
    fixed_point_fraction: float

    @property
    def pre_consensus(self) -> float:
        return float(np.mean(self.pre_distance))

    @property
    def post_consensus(self) -> float:
        return float(np.mean(self.post_distance))


@dataclass(frozen=True)
class AgentMergeResult:
    model: ModelParams
    extra: LayerArrays | None
    fixed_point_fraction: float


def should_merge(k: int, plan: MergePlan) -> bool:
    if k < 1:
        raise ValueError(f"iteration index must be >= 1, got {k}")
    return k % plan.frequency_n == 0


def per_event_cost(topo: Topology) -> int:
    """Communication rounds charged per merge barrier: the widest neighborhood."""
    return max(len(neighbors(topo, i)) - 1 for i in range(topo.n_agents))


def charge_communication(topo: Topology, epochs: int, plan: MergePlan,
                         iters_per_epoch: int) -> float:
    """Total communication rounds for a run of `epochs` epochs.

    One barrier costs per_event_cost(topo) rounds and fires every
    frequency_n iterations, so the charge scales inversely with the merge
    frequency: at the barrier-every-2-epochs cadence a fully connected
    topology pays 0.5 * (N - 1) rounds per epoch and a ring pays 0.5 * 2.
    """
    if epochs < 1:
        raise ValueError(f"epochs must be >= 1, got {epochs}")
    if iters_per_epoch < 1:
        raise ValueError(f"iters_per_epoch must be >= 1, got {iters_per_epoch}")
    events = epochs * iters_per_epoch / plan.frequency_n
    return per_event_cost(topo) * events


def _align_pair(reference: ModelParams, candidate: ModelParams, plan: MergePlan,
                batch: np.ndarray | None) -> LayerPermutation:
    if plan.mode == "identity":
        return identity_permutation([w.shape[0] for w, _ in reference.layers[:-1]])
    if plan.mode == "weight_match":
        return weight_match(reference, candidate, max_sweeps=plan.max_sweeps)
    if batch is None:
        raise ValueError("activation matching needs a batch from the reference agent's shard")
    _, ref_trace = forward(reference, batch)
    _, cand_trace = forward(candidate, batch)
    return activation_match(ref_trace, cand_trace, stat=plan.match_stat)


def merge_agent(i: int, models, pi, topo: Topology, plan: MergePlan,
                batch: np.ndarray | None = None, extras=None) -> AgentMergeResult:
    """Merge agent i's neighborhood from a pre-round snapshot of all models.

    Every neighbor j with positive mixing weight is aligned to agent i
    (the agent's own block is the identity), then parameters are averaged
    with the mixing weights. extras, when given, is a per-agent list of
    layer-shaped statistics gossiped with the same weights and the same
    permutations.
    """
    n = len(models)
    arr = np.asarray(pi, dtype=np.float64)
    if not 0 <= i < n:
        raise ValueError(f"agent index {i} out of range for {n} models")
    if arr.shape != (n, n) or topo.n_agents != n:
        raise ValueError("mixing matrix, topology, and model list disagree on agent count")
    row = arr[i]
    if np.any(row < 0.0):
        raise ValueError("mixing weights must be nonnegative")
    acc = [(np.zeros_like(w), np.zeros_like(b)) for w, b in models[i].layers]
    acc_extra = None
    if extras is not None:
        acc_extra = [(np.zeros_like(w), np.zeros_like(b)) for w, b in extras[i]]
    fractions = []
    for j in range(n):
        weight = row[j]
        if weight == 0.0:
            continue
        if not topo.adjacency[i, j]:
            raise ValueError(f"topology violation: positive weight for non-neighbor pair ({i}, {j})")
        if j == i:
            lp = identity_permutation([w.shape[0] for w, _ in models[i].layers[:-1]])
        else:
            lp = _align_pair(models[i], models[j], plan, batch)
            fractions.append(fixed_point_fraction(lp))
        aligned = apply_permutation_arrays(models[j].layers, lp)
        for (aw, ab), (w, b) in zip(acc, aligned):
            aw += weight * w
            ab += weight * b
        if acc_extra is not None:
            aligned_extra = apply_permutation_arrays(extras[j], lp)
            for (aw, ab), (w, b) in zip(acc_extra, aligned_extra):
                aw += weight * w
                ab += weight * b
    merged = ModelParams(acc, models[i].activation)
    fpf = float(np.mean(fractions)) if fractions else 1.0
    return AgentMergeResult(merged, acc_extra, fpf)


def _consensus_distances(models) -> tuple[float, ...]:
    stack = np.stack([flatten(m) for m in models])
    centered = stack - stack.mean(axis=0)
    return tuple(float(d) for d in np.sum(centered * centered, axis=1))


def merge_round(models, pi, topo: Topology, plan: MergePlan, batches=None,
                extras=None, round_index: int = 0, mapper=map):
    """Synchronous barrier: merge every agent against the same snapshot.

    batches[i] supplies agent i's matching batch when it acts as the
    reference. mapper may be an executor's map; per-agent merges only read
    the snapshot, and results are collected in agent order either way.

    Returns (new models, new extras or None, MergeRoundStats).
    """
    arr = require_mixing(pi, topo)
    if len(models) != topo.n_agents:
        raise ValueError("model count does not match topology")
    if batches is None:
        batches = [None] * len(models)

    def one(i: int) -> AgentMergeResult:
        return merge_agent(i, models, arr, topo, plan, batches[i], extras)

    results = list(mapper(one, range(len(models))))
    new_models = [r.model for r in results]
    new_extras = [r.extra for r in results] if extras is not None else None
    stats = MergeRoundStats(
        round_index=round_index,
        pre_distance=_consensus_distances(models),
        post_distance=_consensus_distances(new_models),
        rounds_charged=per_event_cost(topo),
        fixed_point_fraction=float(np.mean([r.fixed_point_fraction for r in results])),
    )
    return new_models, new_extras, stats
