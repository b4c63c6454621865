"""Permutation discovery and application for hidden units of MLPs.

Two models with identical architectures can differ by a relabeling of
hidden units without differing as functions. This module finds such
relabelings, either from activation statistics on a shared batch
(activation matching) or from the weights themselves (weight matching by
coordinate descent), and applies them exactly. The input and output
layers are never permuted, so an applied permutation preserves the
network function bit for bit up to floating-point reassociation (exactly,
in fact, since reordering rows and columns moves values without
arithmetic).

Orientation convention: perms[layer][r] is the index of the *candidate*
unit that moves into reference slot r. Applying the result to the
candidate lines it up with the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import solve_lap_max
from .nn import ActivationTrace, LayerArrays, ModelParams, flatten

__all__ = [
    "LayerPermutation",
    "MATCH_STATS",
    "activation_match",
    "apply_permutation",
    "apply_permutation_arrays",
    "fixed_point_fraction",
    "identity_permutation",
    "weight_match",
]

MATCH_STATS = ("covariance", "correlation")


@dataclass(frozen=True, eq=False)
class LayerPermutation:
    """One index array per hidden layer; perms[l][r] = candidate unit for slot r."""

    perms: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        checked = []
        for ix, perm in enumerate(self.perms):
            arr = np.asarray(perm, dtype=np.int64)
            if arr.ndim != 1 or sorted(arr.tolist()) != list(range(arr.shape[0])):
                raise ValueError(f"layer {ix} permutation is not a bijection")
            checked.append(arr)
        object.__setattr__(self, "perms", tuple(checked))

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(p.shape[0] for p in self.perms)


def identity_permutation(hidden_widths) -> LayerPermutation:
    return LayerPermutation(tuple(np.arange(int(w)) for w in hidden_widths))


def fixed_point_fraction(lp: LayerPermutation) -> float:
    """Share of hidden units mapped to their own slot, over all hidden layers."""
    total = sum(p.shape[0] for p in lp.perms)
    if total == 0:
        return 1.0
    fixed = sum(int(np.sum(p == np.arange(p.shape[0]))) for p in lp.perms)
    return fixed / total


def _hidden_widths(model: ModelParams) -> list[int]:
    return [w.shape[0] for w, _ in model.layers[:-1]]


def _require_congruent(reference: ModelParams, candidate: ModelParams) -> None:
    ref_shapes = [(w.shape, b.shape) for w, b in reference.layers]
    cand_shapes = [(w.shape, b.shape) for w, b in candidate.layers]
    if ref_shapes != cand_shapes:
        raise ValueError("models have different architectures")


def apply_permutation_arrays(layers: LayerArrays, lp: LayerPermutation) -> LayerArrays:
    """Permute any per-layer (w, b) arrays the way the model parameters move.

    Works for optimizer statistics as well as weights: every buffer shaped
    like the parameters relabels coordinate-wise with the units.
    """
    if len(lp.perms) != len(layers) - 1:
        raise ValueError(
            f"expected {len(layers) - 1} hidden-layer permutations, got {len(lp.perms)}")
    out: LayerArrays = []
    for ix, (w, b) in enumerate(layers):
        new_w = w
        new_b = b
        if ix < len(lp.perms):  # rows and bias entries follow this layer's units
            perm = lp.perms[ix]
            if perm.shape[0] != w.shape[0]:
                raise ValueError(f"layer {ix} permutation length {perm.shape[0]} != width {w.shape[0]}")
            new_w = new_w[perm, :]
            new_b = new_b[perm]
        if ix > 0:  # columns follow the previous layer's units
            prev = lp.perms[ix - 1]
            new_w = new_w[:, prev]
        out.append((new_w.copy(), new_b.copy()))
    return out


def apply_permutation(model: ModelParams, lp: LayerPermutation) -> ModelParams:
    """Relabel hidden units; the returned model computes the same function."""
    return ModelParams(apply_permutation_arrays(model.layers, lp), model.activation)


def activation_match(reference: ActivationTrace, candidate: ActivationTrace,
                     stat: str = "covariance") -> LayerPermutation:
    """Match candidate units to reference units from activations on a shared batch.

    For each hidden layer independently, forms the centered cross-product
    Z_ref Z_cand^T over samples and solves the assignment problem that
    maximizes the matched total. stat="correlation" additionally scales
    each unit's centered activations to unit norm (zero-variance units are
    left unscaled so the problem stays well posed).
    """
    if stat not in MATCH_STATS:
        raise ValueError(f"unknown matching stat {stat!r}")
    if len(reference.layers) != len(candidate.layers):
        raise ValueError("traces have different depths")
    perms = []
    for ref_z, cand_z in zip(reference.layers, candidate.layers):
        if ref_z.shape != cand_z.shape:
            raise ValueError(
                f"trace shapes differ ({ref_z.shape} vs {cand_z.shape}); "
                "matching requires the identical batch")
        score = _centered(ref_z, stat) @ _centered(cand_z, stat).T
        perms.append(solve_lap_max(score).perm)
    return LayerPermutation(tuple(perms))


def _centered(z: np.ndarray, stat: str) -> np.ndarray:
    centered = z - z.mean(axis=1, keepdims=True)
    if stat == "correlation":
        norms = np.linalg.norm(centered, axis=1, keepdims=True)
        centered = centered / np.where(norms > 0.0, norms, 1.0)
    return centered


def weight_match(reference: ModelParams, candidate: ModelParams,
                 max_sweeps: int = 50, return_history: bool = False):
    """Match units by maximizing the dot product of the vectorized weights.

    Coordinate descent: each hidden layer in turn solves the assignment
    problem induced by holding the neighboring layers' permutations fixed.
    Each solve can only grow the global objective
    <vec(reference), vec(apply_permutation(candidate, lp))>, so the sweep
    objective is nondecreasing; iteration stops when a full sweep changes
    nothing or after max_sweeps sweeps.

    Returns the LayerPermutation, or (LayerPermutation, history) with the
    objective after every layer update when return_history is true.
    """
    _require_congruent(reference, candidate)
    if max_sweeps < 1:
        raise ValueError(f"max_sweeps must be >= 1, got {max_sweeps}")
    n_hidden = len(reference.layers) - 1
    perms = [np.arange(w.shape[0]) for w, _ in reference.layers[:-1]]
    ref_vec = flatten(reference)

    def objective() -> float:
        aligned = apply_permutation_arrays(candidate.layers, LayerPermutation(tuple(perms)))
        return float(ref_vec @ flatten(aligned))

    history = [objective()]
    for _ in range(max_sweeps):
        changed = False
        for ell in range(n_hidden):
            w_ref, b_ref = reference.layers[ell]
            w_cand, b_cand = candidate.layers[ell]
            prev = perms[ell - 1] if ell > 0 else np.arange(w_ref.shape[1])
            score = w_ref @ w_cand[:, prev].T + np.outer(b_ref, b_cand)
            w_ref_next = reference.layers[ell + 1][0]
            w_cand_next = candidate.layers[ell + 1][0]
            if ell + 1 < n_hidden:
                w_cand_next = w_cand_next[perms[ell + 1], :]
            score += w_ref_next.T @ w_cand_next
            new_perm = solve_lap_max(score).perm
            if not np.array_equal(new_perm, perms[ell]):
                perms[ell] = new_perm
                changed = True
            value = objective()
            # exact LAP over one block of a re-grouped sum: may only go up
            if value < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
                raise RuntimeError("weight-match objective decreased; scoring is inconsistent")
            history.append(value)
        if not changed:
            break
    lp = LayerPermutation(tuple(perms))
    return (lp, history) if return_history else lp
