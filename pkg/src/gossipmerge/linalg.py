"""Dense linear-algebra kernels shared by every other module.

Provides seeded, splittable RNG streams, an exact Hungarian solver for the
linear assignment problem (the primitive behind permutation matching), and
power-iteration extraction of extreme eigenvalues of symmetric matrices
(the primitive behind mixing-matrix spectral diagnostics).

All matrices are dense float64 numpy arrays in row-major order. Functions
validate their inputs and never mutate them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Assignment",
    "RngStream",
    "extreme_eigs_symmetric",
    "require_matrix",
    "require_square",
    "require_symmetric",
    "rng_normal",
    "second_largest_magnitude",
    "solve_lap_max",
]

POWER_TOL = 1e-9
POWER_MAX_ITER = 10_000

_MASK64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# validation helpers

def require_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return `a` as a finite float64 2-D array or raise ValueError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size and not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def require_square(a, name: str = "matrix") -> np.ndarray:
    arr = require_matrix(a, name)
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"{name} must be square, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def require_symmetric(a, tol: float = 1e-10, name: str = "matrix") -> np.ndarray:
    arr = require_square(a, name)
    if float(np.max(np.abs(arr - arr.T))) > tol:
        raise ValueError(f"{name} is not symmetric within {tol}")
    return arr


# ---------------------------------------------------------------------------
# deterministic rng streams

@dataclass(frozen=True)
class RngStream:
    """Keyed source of deterministic random draws.

    Built on the counter-based Philox generator: the pair (seed, stream)
    fully determines the sequence on every platform, and distinct stream
    ids give statistically independent sequences. Derive one stream per
    (purpose, agent) so that adding agents or reordering work never
    perturbs draws made elsewhere.
    """

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not 0 <= int(self.seed) <= _MASK64:
            raise ValueError("seed must be a non-negative 64-bit integer")
        if not 0 <= int(self.stream) <= _MASK64:
            raise ValueError("stream must be a non-negative 64-bit integer")

    def derive(self, *indices: int) -> "RngStream":
        """Fold integer indices into a child stream id."""
        s = self.stream
        for ix in indices:
            if ix < 0:
                raise ValueError("stream indices must be non-negative")
            s = (s * 6364136223846793005 + 2 * ix + 1442695040888963407) & _MASK64
        return RngStream(self.seed, s)

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream."""
        # The key must be an explicit uint64 array: a Python int list would be
        # coerced through float64, whose 2048-ulp spacing at 2^64 collapses
        # nearby derived stream ids into the same key.
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def rng_normal(stream: RngStream, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """Draw `n` iid normal values from `stream` (pure function of the stream)."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return stream.generator().normal(mean, std, n)


# ---------------------------------------------------------------------------
# linear assignment

@dataclass(frozen=True)
class Assignment:
    """Result of a maximum linear assignment: perm[r] is the column given to row r."""

    perm: np.ndarray
    objective: float


def solve_lap_max(score) -> Assignment:
    """Exact maximum-score linear assignment.

    Solves max_perm sum_r score[r, perm[r]] by the shortest-augmenting-path
    Hungarian method in O(d^3). Exact ties between optima are broken toward
    the lexicographically smallest permutation (pairwise-swap refinement on
    exactly tied alternatives), which keeps degenerate matches, e.g. blocks
    of identical units, reproducible.
    """
    s = require_square(score, "score")
    perm = _min_cost_perm(-s)
    perm = _lex_refine(s, perm)
    obj = 0.0
    for r in range(s.shape[0]):
        obj += s[r, perm[r]]
    return Assignment(perm=perm, objective=float(obj))


def _min_cost_perm(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment via augmenting paths with potentials.

    Classic O(n^3) formulation with a sentinel column 0; rows/columns are
    1-indexed internally. The inner column scan is vectorized.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=np.int64)  # owner[j]: row matched to column j
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n, np.inf)  # tightest reduced cost seen per real column
        way = np.zeros(n + 1, dtype=np.int64)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv, np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[owner[j] - 1] = j - 1
    return perm


def _lex_refine(score: np.ndarray, perm: np.ndarray) -> np.ndarray:
    """Swap exactly tied assignment pairs toward the lexicographically smaller perm.

    Only transpositions whose pair sums are bitwise equal are taken, so the
    objective is untouched. Each accepted swap strictly decreases the
    permutation in lexicographic order, hence termination.
    """
    n = len(perm)
    perm = perm.copy()
    pos = np.empty(n, dtype=np.int64)
    pos[perm] = np.arange(n)
    changed = True
    while changed:
        changed = False
        for r in range(n):
            cr = perm[r]
            for c in range(cr):
                r2 = pos[c]
                if r2 <= r:
                    continue  # swapping would make an earlier row larger
                if score[r, c] + score[r2, cr] == score[r, cr] + score[r2, c]:
                    perm[r], perm[r2] = c, cr
                    pos[c], pos[cr] = r, r2
                    changed = True
                    break
    return perm


# ---------------------------------------------------------------------------
# extreme eigenvalues

def extreme_eigs_symmetric(m, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> tuple[float, float]:
    """Largest and smallest eigenvalue of a symmetric matrix.

    Uses power iteration on shifted matrices: with g an upper bound on the
    spectral radius (max absolute row sum), m + g*I and g*I - m are both
    positive semidefinite with dominant eigenvalues lam_max + g and
    g - lam_min. Each iteration stops once the relative eigen-residual
    ||A v - lam v|| <= tol * max(1, |lam|) or after max_iter iterations,
    whichever comes first.
    """
    a = require_symmetric(m)
    a = (a + a.T) / 2.0
    n = a.shape[0]
    bound = float(np.max(np.sum(np.abs(a), axis=1)))
    if bound == 0.0:
        return 0.0, 0.0
    eye = np.eye(n)
    lam_max = _dominant_eig_psd(a + bound * eye, tol, max_iter) - bound
    lam_min = bound - _dominant_eig_psd(bound * eye - a, tol, max_iter)
    return lam_max, lam_min


def _dominant_eig_psd(a: np.ndarray, tol: float, max_iter: int) -> float:
    """Dominant eigenvalue of a PSD matrix by power iteration with Rayleigh quotients."""
    n = a.shape[0]
    for attempt in range(3):
        v = RngStream(0x9E3779B9, 1000 * n + attempt).generator().standard_normal(n)
        v /= np.linalg.norm(v)
        lam = 0.0
        exhausted = False
        for _ in range(max_iter):
            y = a @ v
            lam = float(v @ y)
            ny = float(np.linalg.norm(y))
            if ny == 0.0:
                exhausted = True  # start vector sat exactly in the kernel
                break
            # For symmetric matrices the Rayleigh estimate sits within the
            # eigen-residual of the true spectrum.
            if float(np.linalg.norm(y - lam * v)) <= tol * max(1.0, abs(lam)):
                return lam
            v = y / ny
        if not exhausted:
            return lam
    return 0.0  # every probe landed in the kernel: matrix acts as zero


def second_largest_magnitude(m, tol: float = POWER_TOL, max_iter: int = POWER_MAX_ITER) -> float:
    """Second-largest eigenvalue magnitude of a symmetric doubly stochastic matrix.

    The known top eigenvector 1/sqrt(n) is deflated exactly by subtracting
    the rank-one matrix of 1/n entries, after which the extreme eigenvalues
    of the remainder give max(|lam_2|, |lam_n|). A disconnected topology
    shows up as a return value of 1, not as an error.
    """
    a = require_symmetric(m)
    n = a.shape[0]
    if np.min(a) < -1e-12:
        raise ValueError("matrix has negative entries; not doubly stochastic")
    if float(np.max(np.abs(a.sum(axis=1) - 1.0))) > 1e-9:
        raise ValueError("row sums differ from 1 beyond 1e-9; not doubly stochastic")
    if n == 1:
        return 0.0
    deflated = a - np.full((n, n), 1.0 / n)
    lam_max, lam_min = extreme_eigs_symmetric(deflated, tol, max_iter)
    return max(abs(lam_max), abs(lam_min))
