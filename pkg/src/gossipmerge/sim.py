"""Multi-agent train-and-merge experiments.

The engine runs K iterations. Each iteration every agent draws a
minibatch from its own shard and computes the gradient at its current
parameters; on barrier iterations (k mod n == 0) all agents then merge
against a synchronous snapshot before the optimizer step lands on the
merged point. The adaptive optimizer splits around the barrier: moments
fold in the gradient first, the gossiped scaling surrogate travels
through the merge, and the position update uses the agent's own
pre-gossip surrogate, exactly mirroring single-node behavior when the
network is a single agent.

Determinism: every random draw comes from a stream derived from the
config seed by fixed (purpose, agent) indices, minibatch indices are
drawn on the orchestration thread, and worker pools only evaluate pure
per-agent functions collected in agent order, so any worker count
reproduces the same run byte for byte.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .align import activation_match, apply_permutation
from .config import ExperimentConfig
from .linalg import RngStream
from .merge import MergePlan, MergeRoundStats, merge_round, should_merge
from .nn import (
    ModelParams,
    flatten,
    forward,
    init_model,
    layer_dims,
    loss_and_grad,
    unflatten,
)
from .optim import (
    HyperParams,
    OptimizerState,
    amsgrad_apply,
    amsgrad_update_moments,
    msgd_step,
    new_state,
    sgd_step,
)
from .topology import build_mixing, make_topology

__all__ = [
    "AgentState",
    "Dataset",
    "MetricsRecord",
    "Partition",
    "RunResult",
    "accuracy",
    "consensus_and_gradnorm",
    "estimate_heterogeneity",
    "load_csv_dataset",
    "make_synthetic",
    "partition",
    "run_experiment",
    "split_train_test",
    "train_single",
]

# fixed purpose indices for stream derivation; part of the determinism contract
STREAM_DATA = 1
STREAM_SPLIT = 2
STREAM_PARTITION = 3
STREAM_INIT = 4
STREAM_BATCH = 5
STREAM_MATCH = 6
STREAM_PROBE = 7

LOSS_DIVERGENCE = 1e6


@dataclass(frozen=True)
class Dataset:
    """Numeric features with integer class labels."""

    features: np.ndarray  # samples x dims
    labels: np.ndarray  # int64 in [0, num_classes)
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise ValueError(f"features must be samples x dims, got shape {self.features.shape}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.labels.ndim != 1 or self.labels.shape[0] != self.features.shape[0]:
            raise ValueError("labels must be one integer per sample")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        if self.features.shape[0] < self.num_classes:
            raise ValueError("need at least one sample per class count")

    @property
    def samples(self) -> int:
        return self.features.shape[0]

    @property
    def dims(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Partition:
    """Disjoint per-agent index lists covering a training set."""

    indices: tuple[tuple[int, ...], ...]
    scheme: str


@dataclass
class AgentState:
    """One node: its model, optimizer buffers, shard, and random stream."""

    id: int
    model: ModelParams
    opt: OptimizerState
    shard: tuple[int, ...]
    rng: RngStream

    def __post_init__(self) -> None:
        if not self.shard:
            raise ValueError(f"agent {self.id} has an empty shard")


@dataclass(frozen=True)
class MetricsRecord:
    """One evaluation point of a run."""

    iteration: int
    agent_loss: tuple[float, ...]
    accuracy_avg: float  # test accuracy of the raw parameter average
    accuracy_aligned: float  # test accuracy of the permutation-aligned average
    accuracy_agents: float  # mean per-agent test accuracy
    consensus: float  # (1/N) sum ||x_i - x_bar||^2
    grad_norm: float  # ||(1/N) sum grad f_i(x_bar)||^2
    comm_rounds: float  # cumulative communication rounds

    def __post_init__(self) -> None:
        for name in ("accuracy_avg", "accuracy_aligned", "accuracy_agents"):
            value = getattr(self, name)
            if np.isfinite(value) and not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {value}")
        if np.isfinite(self.consensus) and self.consensus < 0.0:
            raise ValueError(f"consensus must be >= 0, got {self.consensus}")


@dataclass
class RunResult:
    """Everything a run produced, for reporting and downstream checks."""

    config: ExperimentConfig
    records: list[MetricsRecord]
    merge_stats: list[MergeRoundStats]
    agents: list[AgentState]
    train: Dataset
    test: Dataset
    avg_model: ModelParams
    aligned_avg_model: ModelParams
    diverged: bool = False


def make_synthetic(num_classes: int, dims: int, samples_per_class: int,
                   separation: float, stream: RngStream) -> Dataset:
    """Gaussian class clusters with means `separation` apart on a random frame.

    Means sit at (separation / sqrt(2)) times orthonormal directions, so
    every pair of class means is exactly `separation` apart; covariance is
    the identity. separation=0 collapses all classes onto one
    distribution. Requires dims >= num_classes for the orthonormal frame.
    """
    if num_classes < 1:
        raise ValueError(f"num_classes must be >= 1, got {num_classes}")
    if samples_per_class < 1:
        raise ValueError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if separation < 0:
        raise ValueError(f"separation must be >= 0, got {separation}")
    if dims < num_classes:
        raise ValueError(f"dims ({dims}) must be >= num_classes ({num_classes}) "
                         "to place orthonormal class means")
    frame_gen = stream.derive(0).generator()
    q, _ = np.linalg.qr(frame_gen.normal(size=(dims, num_classes)))
    means = (separation / np.sqrt(2.0)) * q.T  # num_classes x dims
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), samples_per_class)
    noise_gen = stream.derive(1).generator()
    features = means[labels] + noise_gen.normal(size=(labels.shape[0], dims))
    return Dataset(features, labels, num_classes)


def load_csv_dataset(path: str) -> Dataset:
    """Header row, numeric feature columns, final integer label column."""
    table = np.genfromtxt(path, delimiter=",", skip_header=1, dtype=np.float64)
    if table.ndim == 1:
        table = table.reshape(1, -1)
    if table.ndim != 2 or table.shape[1] < 2:
        raise ValueError(f"{path} must have at least one feature column and a label column")
    if not np.all(np.isfinite(table)):
        raise ValueError(f"{path} contains non-numeric or missing entries")
    labels_f = table[:, -1]
    labels = labels_f.astype(np.int64)
    if np.any(labels_f != labels):
        raise ValueError(f"{path}: final column must hold integer labels")
    if labels.min() < 0:
        raise ValueError(f"{path}: labels must be >= 0")
    return Dataset(table[:, :-1].copy(), labels, int(labels.max()) + 1)


def split_train_test(ds: Dataset, test_fraction: float, stream: RngStream):
    """Seeded shuffle split into (train, test)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    order = stream.generator().permutation(ds.samples)
    n_test = min(max(int(round(ds.samples * test_fraction)), 1), ds.samples - 1)
    test_ix = np.sort(order[:n_test])
    train_ix = np.sort(order[n_test:])
    return (Dataset(ds.features[train_ix], ds.labels[train_ix], ds.num_classes),
            Dataset(ds.features[test_ix], ds.labels[test_ix], ds.num_classes))


def partition(ds: Dataset, n_agents: int, scheme: str, stream: RngStream) -> Partition:
    """Split sample indices across agents.

    iid deals every class round-robin after a seeded shuffle, so each
    agent's class histogram is within one sample of the uniform share.
    class_shard shuffles the class list and hands each agent a contiguous
    block of whole classes (ceil(C/N) or floor(C/N) of them).
    """
    if n_agents < 1:
        raise ValueError(f"n_agents must be >= 1, got {n_agents}")
    if scheme not in ("iid", "class_shard"):
        raise ValueError(f"unknown partition scheme {scheme!r}")
    gen = stream.generator()
    shards: list[list[int]] = [[] for _ in range(n_agents)]
    if scheme == "iid":
        for c in range(ds.num_classes):
            members = np.flatnonzero(ds.labels == c)
            members = members[gen.permutation(members.shape[0])]
            for k, sample in enumerate(members):
                shards[(k + c) % n_agents].append(int(sample))
    else:
        if ds.num_classes < n_agents:
            raise ValueError(
                f"class_shard needs num_classes >= n_agents ({ds.num_classes} < {n_agents})")
        class_order = gen.permutation(ds.num_classes)
        for agent, block in enumerate(np.array_split(class_order, n_agents)):
            mask = np.isin(ds.labels, block)
            shards[agent] = [int(s) for s in np.flatnonzero(mask)]
    for agent, shard in enumerate(shards):
        if not shard:
            raise ValueError(f"partition left agent {agent} with an empty shard")
    return Partition(tuple(tuple(sorted(s)) for s in shards), scheme)


def _one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _targets(ds: Dataset, idx: np.ndarray, loss: str):
    return ds.labels[idx] if loss == "cross_entropy" else _one_hot(ds.labels[idx], ds.num_classes)


def draw_batch(gen: np.random.Generator, shard: np.ndarray, size: int) -> np.ndarray:
    """Sample indices without replacement; the whole shard when it is small.

    A full-shard batch consumes no randomness, so exact-gradient runs
    (batch >= shard size) stay deterministic without touching the stream.
    """
    if size >= shard.shape[0]:
        return shard
    return gen.choice(shard, size=size, replace=False)


def accuracy(model: ModelParams, ds: Dataset) -> float:
    logits, _ = forward(model, ds.features)
    return float(np.mean(np.argmax(logits, axis=1) == ds.labels))


def _average_model(models) -> ModelParams:
    ref = models[0]
    vec = np.mean([flatten(m) for m in models], axis=0)
    return unflatten(vec, layer_dims(ref), ref.activation)


def _aligned_average_model(models, probe: np.ndarray) -> ModelParams:
    """Average after aligning every model's hidden units to the first model."""
    if len(models) == 1:
        return models[0].copy()
    _, ref_trace = forward(models[0], probe)
    aligned = [models[0]]
    for other in models[1:]:
        _, trace = forward(other, probe)
        aligned.append(apply_permutation(other, activation_match(ref_trace, trace)))
    return _average_model(aligned)


def consensus_and_gradnorm(agents, train: Dataset, loss: str = "cross_entropy"):
    """Dispersion around the parameter mean, and the gradient norm at it.

    consensus = (1/N) sum_i ||x_i - x_bar||^2. grad_norm evaluates each
    agent's full-shard gradient at the averaged parameters and returns
    the squared norm of the gradient average.
    """
    flats = np.stack([flatten(a.model) for a in agents])
    x_bar = flats.mean(axis=0)
    centered = flats - x_bar
    consensus = float(np.mean(np.sum(centered * centered, axis=1)))
    ref = agents[0].model
    avg_model = unflatten(x_bar, layer_dims(ref), ref.activation)
    grad_sum = None
    for agent in agents:
        idx = np.asarray(agent.shard, dtype=np.int64)
        _, grads = loss_and_grad(avg_model, train.features[idx], _targets(train, idx, loss), loss)
        vec = flatten(grads)
        grad_sum = vec if grad_sum is None else grad_sum + vec
    grad_avg = grad_sum / len(agents)
    return consensus, float(grad_avg @ grad_avg)


def estimate_heterogeneity(agents, train: Dataset, probe_batches: int, batch_size: int,
                           stream: RngStream, loss: str = "cross_entropy"):
    """Estimate the data-heterogeneity constants at the averaged parameters.

    sigma2_hat: mean over agents of the minibatch-gradient variance around
    the agent's full-shard gradient. kappa2_hat: mean squared deviation of
    per-agent full-shard gradients from their average.
    """
    if probe_batches < 2:
        raise ValueError(f"need at least 2 probe batches per agent, got {probe_batches}")
    flats = np.stack([flatten(a.model) for a in agents])
    ref = agents[0].model
    avg_model = unflatten(flats.mean(axis=0), layer_dims(ref), ref.activation)
    gen = stream.generator()
    full_grads = []
    sigma_terms = []
    for agent in agents:
        idx = np.asarray(agent.shard, dtype=np.int64)
        _, grads = loss_and_grad(avg_model, train.features[idx], _targets(train, idx, loss), loss)
        g_full = flatten(grads)
        full_grads.append(g_full)
        deviations = []
        for _ in range(probe_batches):
            b = draw_batch(gen, idx, batch_size)
            _, g = loss_and_grad(avg_model, train.features[b], _targets(train, b, loss), loss)
            diff = flatten(g) - g_full
            deviations.append(float(diff @ diff))
        sigma_terms.append(float(np.mean(deviations)))
    stack = np.stack(full_grads)
    centered = stack - stack.mean(axis=0)
    kappa2 = float(np.mean(np.sum(centered * centered, axis=1)))
    return float(np.mean(sigma_terms)), kappa2


def _local_update(kind: str, model: ModelParams, opt: OptimizerState, grads,
                  hp: HyperParams, x_half: ModelParams | None = None,
                  u_hat_half=None, moments: OptimizerState | None = None):
    """Apply one optimizer step landing on x_half (defaults to the current model).

    For the adaptive optimizer the caller may pass the already-updated
    moments (phase one) and a gossiped surrogate; otherwise both phases
    run back to back, which is the single-node trajectory.
    """
    target = model if x_half is None else x_half
    if kind == "sgd":
        return sgd_step(target, grads, hp), opt
    if kind == "msgd":
        return msgd_step(target, opt, grads, hp)
    state = moments if moments is not None else amsgrad_update_moments(opt, grads, hp)
    half = state.u_hat if u_hat_half is None else u_hat_half
    return amsgrad_apply(target, half, state, hp)


def train_single(model: ModelParams, kind: str, hp: HyperParams, train: Dataset,
                 shard, batch_size: int, iters: int, batch_stream: RngStream,
                 loss: str = "cross_entropy"):
    """Single-node reference trajectory, sharing the engine's batch logic.

    Seeded with the same stream the engine derives for an agent, this
    reproduces that agent's trajectory exactly when no other agent exists.
    Returns (model, optimizer state, per-iteration losses).
    """
    opt = new_state(kind, model)
    gen = batch_stream.generator()
    idx = np.asarray(shard, dtype=np.int64)
    losses = []
    for _ in range(iters):
        b = draw_batch(gen, idx, batch_size)
        value, grads = loss_and_grad(model, train.features[b], _targets(train, b, loss), loss)
        losses.append(value)
        model, opt = _local_update(kind, model, opt, grads, hp)
    return model, opt, losses


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Run the full decentralized train-and-merge loop for one seed."""
    base = RngStream(config.seed)
    if config.data_csv:
        full = load_csv_dataset(config.data_csv)
    else:
        full = make_synthetic(config.classes, config.dims, config.samples_per_class,
                              config.separation, base.derive(STREAM_DATA))
    train, test = split_train_test(full, config.test_fraction, base.derive(STREAM_SPLIT))
    part = partition(train, config.agents, config.partition, base.derive(STREAM_PARTITION))

    arch = [train.dims, *config.hidden, train.num_classes]
    agents = []
    for i in range(config.agents):
        model = init_model(arch, base.derive(STREAM_INIT, i))
        agents.append(AgentState(
            id=i, model=model, opt=new_state(config.optimizer, model),
            shard=part.indices[i], rng=base.derive(STREAM_BATCH, i)))

    topo = make_topology(config.topology, config.agents)
    pi = build_mixing(topo)
    alpha = config.alpha
    if config.alpha_scale == "sqrt_n_over_k":
        alpha = config.alpha * np.sqrt(config.agents / config.K)
    hp = HyperParams(alpha=alpha, beta=config.beta, beta1=config.beta1, beta2=config.beta2,
                     epsilon=config.epsilon, n=config.n, K=config.K, clip=config.clip)
    plan = config.merge_plan()

    batch_gens = [agent.rng.generator() for agent in agents]
    match_gens = [base.derive(STREAM_MATCH, i).generator() for i in range(config.agents)]
    probe_gen = base.derive(STREAM_PROBE).generator()
    all_train = np.arange(train.samples, dtype=np.int64)
    probe_idx = draw_batch(probe_gen, all_train, plan.matching_batch)
    probe = train.features[probe_idx]
    shards = [np.asarray(agent.shard, dtype=np.int64) for agent in agents]

    pool = ThreadPoolExecutor(max_workers=config.workers) if config.workers > 1 else None
    mapper = pool.map if pool is not None else map
    records: list[MetricsRecord] = []
    merge_stats: list[MergeRoundStats] = []
    comm_total = 0.0
    diverged = False

    def evaluate(k: int, losses) -> None:
        consensus, grad_norm = consensus_and_gradnorm(agents, train, config.loss)
        models = [a.model for a in agents]
        avg = _average_model(models)
        aligned = _aligned_average_model(models, probe)
        records.append(MetricsRecord(
            iteration=k,
            agent_loss=tuple(float(v) for v in losses),
            accuracy_avg=accuracy(avg, test),
            accuracy_aligned=accuracy(aligned, test),
            accuracy_agents=float(np.mean([accuracy(m, test) for m in models])),
            consensus=consensus,
            grad_norm=grad_norm,
            comm_rounds=comm_total,
        ))

    def grad_at(i: int, idx: np.ndarray):
        value, grads = loss_and_grad(agents[i].model, train.features[idx],
                                     _targets(train, idx, config.loss), config.loss)
        return value, grads

    try:
        for _ in range(config.pretrain_iters):
            batch_idx = [draw_batch(batch_gens[i], shards[i], config.batch)
                         for i in range(config.agents)]
            results = list(mapper(lambda i: grad_at(i, batch_idx[i]), range(config.agents)))
            for agent, (_, grads) in zip(agents, results):
                agent.model, agent.opt = _local_update(
                    config.optimizer, agent.model, agent.opt, grads, hp)

        for k in range(1, config.K + 1):
            batch_idx = [draw_batch(batch_gens[i], shards[i], config.batch)
                         for i in range(config.agents)]
            results = list(mapper(lambda i: grad_at(i, batch_idx[i]), range(config.agents)))
            losses = [value for value, _ in results]
            if any(not np.isfinite(v) or v > LOSS_DIVERGENCE for v in losses):
                diverged = True
                evaluate(k, losses)
                break

            moments = None
            if config.optimizer == "amsgrad":
                moments = list(mapper(
                    lambda i: amsgrad_update_moments(agents[i].opt, results[i][1], hp),
                    range(config.agents)))

            if should_merge(k, plan):
                models = [a.model for a in agents]
                extras = [m.u_hat for m in moments] if moments is not None else None
                batches = None
                if plan.mode == "activation_match" and config.agents > 1:
                    batches = [train.features[draw_batch(match_gens[i], shards[i],
                                                         plan.matching_batch)]
                               for i in range(config.agents)]
                halves, extra_halves, stats = merge_round(
                    models, pi, topo, plan, batches=batches, extras=extras,
                    round_index=k, mapper=mapper)
                comm_total += stats.rounds_charged
                merge_stats.append(stats)
            else:
                halves = [a.model for a in agents]
                extra_halves = None

            def step(i: int):
                u_half = extra_halves[i] if extra_halves is not None else None
                m = moments[i] if moments is not None else None
                return _local_update(config.optimizer, agents[i].model, agents[i].opt,
                                     results[i][1], hp, x_half=halves[i],
                                     u_hat_half=u_half, moments=m)

            stepped = list(mapper(step, range(config.agents)))
            for agent, (model, opt) in zip(agents, stepped):
                agent.model = model
                agent.opt = opt

            if k % config.eval_every == 0 or k == config.K:
                evaluate(k, losses)
    finally:
        if pool is not None:
            pool.shutdown()

    models = [a.model for a in agents]
    return RunResult(
        config=config,
        records=records,
        merge_stats=merge_stats,
        agents=agents,
        train=train,
        test=test,
        avg_model=_average_model(models),
        aligned_avg_model=_aligned_average_model(models, probe),
        diverged=diverged,
    )
