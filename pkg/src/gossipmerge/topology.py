"""Gossip topologies, mixing matrices, and spectral diagnostics.

A mixing matrix is symmetric, doubly stochastic, and zero outside the
neighborhood structure of its topology. Its second-largest eigenvalue
magnitude (slem) controls how fast a synchronous averaging round contracts
disagreement: consensus error shrinks by at least the factor slem^2 per
round. `verify_permuted_spectrum` checks empirically that interleaving
per-agent permutations with the averaging round never slows that
contraction: the disagreement-restricted norm of (Pi kron I_d) P stays at
or below the slem of Pi for sampled block permutations P.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import RngStream, require_square, second_largest_magnitude

__all__ = [
    "MixingMatrix",
    "SpectralReport",
    "Topology",
    "TOPOLOGIES",
    "build_mixing",
    "make_topology",
    "mixing_spectrum",
    "neighbors",
    "require_mixing",
    "verify_permuted_spectrum",
]

TOPOLOGIES = ("fully_connected", "ring", "custom")

MIXING_SYMMETRY_TOL = 1e-10
MIXING_SUM_TOL = 1e-9
SPECTRAL_SLACK = 1e-9
MAX_PERMUTED_DIM = 512

MixingMatrix = np.ndarray  # symmetric doubly stochastic, validated by require_mixing


@dataclass(frozen=True)
class Topology:
    """Undirected, connected communication graph over agents."""

    n_agents: int
    kind: str
    adjacency: np.ndarray  # bool, symmetric, True diagonal

    def __post_init__(self) -> None:
        if self.kind not in TOPOLOGIES:
            raise ValueError(f"unknown topology kind {self.kind!r}")
        if self.n_agents < 1:
            raise ValueError("topology needs at least one agent")


def make_topology(kind: str, n_agents: int, edges: list[tuple[int, int]] | None = None) -> Topology:
    """Build a topology; `edges` is consumed only by kind='custom'."""
    if n_agents < 1:
        raise ValueError("topology needs at least one agent")
    adj = np.eye(n_agents, dtype=bool)
    if kind == "fully_connected":
        adj[:] = True
    elif kind == "ring":
        for i in range(n_agents):
            adj[i, (i - 1) % n_agents] = True
            adj[i, (i + 1) % n_agents] = True
    elif kind == "custom":
        if not edges:
            raise ValueError("custom topology requires an explicit edge list")
        for a, b in edges:
            if not (0 <= a < n_agents and 0 <= b < n_agents):
                raise ValueError(f"edge ({a}, {b}) out of range for {n_agents} agents")
            adj[a, b] = True
            adj[b, a] = True
    else:
        raise ValueError(f"unknown topology kind {kind!r}")
    topo = Topology(n_agents, kind, adj)
    if not _connected(adj):
        raise ValueError("topology is disconnected")
    return topo


def _connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        i = stack.pop()
        for j in np.flatnonzero(adj[i]):
            if not seen[j]:
                seen[j] = True
                stack.append(int(j))
    return bool(seen.all())


def neighbors(topo: Topology, i: int) -> list[int]:
    """Neighborhood of agent i including i itself, ascending."""
    if not 0 <= i < topo.n_agents:
        raise ValueError(f"agent {i} out of range")
    return [int(j) for j in np.flatnonzero(topo.adjacency[i])]


def build_mixing(topo: Topology) -> MixingMatrix:
    """Mixing matrix for a topology.

    Fully connected and ring cases are written in closed form (uniform rows
    over the neighborhood, e.g. exactly 1/3 bands for a ring of 5 or more).
    Custom graphs start from uniform rows and are projected to the nearest
    symmetric doubly stochastic matrix by Sinkhorn iteration.
    """
    n = topo.n_agents
    if n == 1:
        return np.ones((1, 1))
    if topo.kind == "fully_connected":
        return np.full((n, n), 1.0 / n)
    counts = topo.adjacency.sum(axis=1)
    pi = np.where(topo.adjacency, 1.0, 0.0) / counts[:, None]
    if topo.kind == "ring":
        return pi  # rows are already uniform over symmetric-degree neighborhoods
    return _sinkhorn(pi)


def _sinkhorn(m: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Alternating row/column normalization to a doubly stochastic limit.

    For a symmetric support pattern with self-loops the limit is symmetric;
    a final symmetrization clears the last round's asymmetry residue.
    """
    out = m.copy()
    for _ in range(max_iter):
        out /= out.sum(axis=1, keepdims=True)
        out /= out.sum(axis=0, keepdims=True)
        row_err = float(np.max(np.abs(out.sum(axis=1) - 1.0)))
        col_err = float(np.max(np.abs(out.sum(axis=0) - 1.0)))
        if max(row_err, col_err) <= tol:
            break
    else:
        raise RuntimeError(f"Sinkhorn projection did not reach {tol}")
    out = (out + out.T) / 2.0
    return out / out.sum(axis=1, keepdims=True)


def require_mixing(pi, topo: Topology | None = None) -> MixingMatrix:
    """Validate symmetry, stochasticity, nonnegativity, and support."""
    arr = require_square(pi, "mixing matrix")
    n = arr.shape[0]
    if float(np.max(np.abs(arr - arr.T))) > MIXING_SYMMETRY_TOL:
        raise ValueError(f"mixing matrix asymmetric beyond {MIXING_SYMMETRY_TOL}")
    if float(np.min(arr)) < -1e-15:
        raise ValueError("mixing matrix has negative entries")
    for axis in (0, 1):
        if float(np.max(np.abs(arr.sum(axis=axis) - 1.0))) > MIXING_SUM_TOL:
            raise ValueError(f"mixing matrix row/column sums deviate beyond {MIXING_SUM_TOL}")
    if topo is not None:
        if topo.n_agents != n:
            raise ValueError("mixing matrix size does not match topology")
        if np.any((arr > 0) & ~topo.adjacency):
            raise ValueError("mixing matrix has weight outside the topology's edges")
    return arr


@dataclass(frozen=True)
class SpectralReport:
    """Spectral diagnostics of a mixing matrix and its permuted rounds.

    Permuted-round samples measure the disagreement factor of one averaging
    round interleaved with per-agent permutations: the operator norm of the
    round matrix restricted to the complement of the agreement subspace
    (all agents equal). Whenever the round matrix is symmetric this equals
    the max of its non-top eigenvalue magnitudes; permutations generally
    break symmetry, which is reported per trial rather than assumed.
    """

    slem: float                      # max(|lam_2|, |lam_n|) of the mixing matrix
    contraction: float               # slem^2: per-round consensus contraction factor
    disconnected: bool
    trials: int = 0
    permuted_factor_max: float | None = None
    permuted_factor_samples: tuple[float, ...] = field(default_factory=tuple)
    permuted_symmetric: tuple[bool, ...] = field(default_factory=tuple)
    bound_holds: bool | None = None  # permuted_factor_max <= slem + SPECTRAL_SLACK


def mixing_spectrum(pi) -> SpectralReport:
    """Power-iteration slem of a validated mixing matrix."""
    arr = require_mixing(pi)
    slem = second_largest_magnitude(arr)
    return SpectralReport(slem=slem, contraction=slem * slem,
                          disconnected=bool(slem >= 1.0 - 1e-12))


def _disagreement_norm(m: np.ndarray, n_agents: int) -> float:
    """Operator norm of a stacked round matrix off the agreement subspace.

    The agreement subspace (all agent blocks equal) is spanned by the
    columns of Q = (J/n) kron I_d; it is fixed by every averaging round, so
    the relevant contraction is ||(I - Q) m||. Computed by a dense full
    singular-value decomposition. For symmetric m this equals the largest
    non-top eigenvalue magnitude.
    """
    dim = m.shape[0]
    d = dim // n_agents
    q_m = np.tile(m.reshape(n_agents, d, dim).mean(axis=0), (n_agents, 1))  # Q @ m
    return float(np.linalg.svd(m - q_m, compute_uv=False)[0])


def verify_permuted_spectrum(pi, model_dim: int, trials: int, stream: RngStream,
                             permutation_sampler=None) -> SpectralReport:
    """Measure the disagreement factor of permuted averaging rounds.

    Each trial draws one permutation of the model coordinates per agent
    (agent 0 pinned to identity, matching the align-to-reference
    orientation), stacks them into a block-diagonal permutation P, and
    measures the disagreement-restricted norm of (Pi kron I_d) P with a
    dense decomposition. P generally breaks symmetry, so per-trial symmetry
    is recorded instead of assumed. The dense route caps the stacked
    dimension at n_agents * model_dim <= 512.

    `permutation_sampler(gen, agent, dim)` may override the uniform draw.
    """
    arr = require_mixing(pi)
    n = arr.shape[0]
    if model_dim < 1:
        raise ValueError("model_dim must be >= 1")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if n * model_dim > MAX_PERMUTED_DIM:
        raise ValueError(
            f"stacked dimension {n * model_dim} exceeds dense-decomposition cap {MAX_PERMUTED_DIM}")
    slem = _disagreement_norm(arr, n)  # for symmetric pi: max(|lam_2|, |lam_n|)
    w = np.kron(arr, np.eye(model_dim))
    gen = stream.generator()
    samples = []
    symmetric = []
    for _ in range(trials):
        blocks = np.zeros((n * model_dim, n * model_dim))
        for agent in range(n):
            if permutation_sampler is not None:
                perm = np.asarray(permutation_sampler(gen, agent, model_dim), dtype=np.int64)
            elif agent == 0:
                perm = np.arange(model_dim)
            else:
                perm = gen.permutation(model_dim)
            if sorted(perm.tolist()) != list(range(model_dim)):
                raise ValueError("permutation sampler returned a non-bijection")
            at = agent * model_dim
            blocks[at + np.arange(model_dim), at + perm] = 1.0
        wp = w @ blocks
        for axis in (0, 1):  # permuting cannot be allowed to break stochasticity
            if float(np.max(np.abs(wp.sum(axis=axis) - 1.0))) > MIXING_SUM_TOL:
                raise RuntimeError("permuted round is not doubly stochastic")
        samples.append(_disagreement_norm(wp, n))
        symmetric.append(bool(np.max(np.abs(wp - wp.T)) <= MIXING_SYMMETRY_TOL))
    peak = max(samples)
    return SpectralReport(
        slem=float(slem), contraction=float(slem * slem),
        disconnected=bool(slem >= 1.0 - 1e-12), trials=trials,
        permuted_factor_max=peak, permuted_factor_samples=tuple(samples),
        permuted_symmetric=tuple(symmetric),
        bound_holds=bool(peak <= slem + SPECTRAL_SLACK),
    )
