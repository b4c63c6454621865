"""First-order optimizer steps for the decentralized train-and-merge loop.

Three update rules are provided: plain SGD, heavy-ball momentum SGD, and an
AMSGrad-style adaptive step. Each takes the (possibly gossip-averaged)
half-iterate x_half and applies a local update computed from the agent's
own gradient. The adaptive rule is split into two phases because its moment
updates happen before the merge barrier while the position update happens
after: `amsgrad_update_moments` folds the gradient into m / v_hat / v (and
initializes the gossiped surrogate u_hat from the first v), then
`amsgrad_apply` consumes the post-gossip x_half and u_hat_half:

    u      = max(u_hat, eps)          elementwise, pre-gossip u_hat
    x      = x_half - alpha * m / sqrt(u)
    u_hat' = u_hat_half - v_prev + v

`amsgrad_step` composes both phases for single-node use. All arithmetic is
float64 and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nn import LayerArrays, ModelParams

__all__ = [
    "HyperParams",
    "OptimizerState",
    "OPTIMIZERS",
    "amsgrad_apply",
    "amsgrad_step",
    "amsgrad_update_moments",
    "clip_gradients",
    "msgd_step",
    "new_state",
    "sgd_step",
]

OPTIMIZERS = ("sgd", "msgd", "amsgrad")


@dataclass(frozen=True)
class HyperParams:
    """Optimizer constants plus the merge cadence and iteration budget."""

    alpha: float = 0.01
    beta: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    n: int = 1
    K: int = 1
    clip: float = 0.0  # infinity-norm gradient clip; 0 disables

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must satisfy 0 <= beta < 1")
        if not 0.0 <= self.beta1 < 1.0:
            raise ValueError("beta1 must satisfy 0 <= beta1 < 1")
        if not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta2 must satisfy 0 <= beta2 < 1")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.n < 1:
            raise ValueError(f"merge frequency n must be >= 1, got {self.n}")
        if self.K < 1:
            raise ValueError(f"iteration budget K must be >= 1, got {self.K}")
        if self.clip < 0:
            raise ValueError(f"clip must be >= 0, got {self.clip}")


@dataclass
class OptimizerState:
    """Per-agent optimizer buffers, all shaped like the model's layers.

    kind=sgd keeps nothing. kind=msgd keeps the momentum v. kind=amsgrad
    keeps the first moment m, the second-moment average v_hat, the running
    maximum v = max(v_hat, previous v), the previous v_prev, and the
    gossiped surrogate u_hat; step counts the moment updates so u_hat can
    initialize from the first v.
    """

    kind: str
    v: LayerArrays | None = None
    m: LayerArrays | None = None
    v_hat: LayerArrays | None = None
    v_prev: LayerArrays | None = None
    u_hat: LayerArrays | None = None
    step: int = 0

    def copy(self) -> "OptimizerState":
        dup = lambda layers: None if layers is None else [(w.copy(), b.copy()) for w, b in layers]
        return OptimizerState(self.kind, dup(self.v), dup(self.m), dup(self.v_hat),
                              dup(self.v_prev), dup(self.u_hat), self.step)


def _zeros_like(model: ModelParams) -> LayerArrays:
    return [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]


def new_state(kind: str, model: ModelParams) -> OptimizerState:
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    if kind == "sgd":
        return OptimizerState("sgd")
    if kind == "msgd":
        return OptimizerState("msgd", v=_zeros_like(model))
    return OptimizerState("amsgrad", v=_zeros_like(model), m=_zeros_like(model),
                          v_hat=_zeros_like(model), v_prev=_zeros_like(model),
                          u_hat=_zeros_like(model))


def clip_gradients(grads: LayerArrays, clip: float) -> LayerArrays:
    """Elementwise infinity-norm clip; clip=0 passes gradients through."""
    if clip == 0.0:
        return grads
    return [(np.clip(gw, -clip, clip), np.clip(gb, -clip, clip)) for gw, gb in grads]


def _check_congruent(model: ModelParams, grads: LayerArrays) -> None:
    if len(grads) != len(model.layers):
        raise ValueError("gradient set does not match model layer count")
    for (w, b), (gw, gb) in zip(model.layers, grads):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ValueError("gradient shapes do not match model shapes")


def sgd_step(x_half: ModelParams, grads: LayerArrays, hp: HyperParams) -> ModelParams:
    """x <- x_half - alpha * g."""
    _check_congruent(x_half, grads)
    grads = clip_gradients(grads, hp.clip)
    layers = [(w - hp.alpha * gw, b - hp.alpha * gb)
              for (w, b), (gw, gb) in zip(x_half.layers, grads)]
    return ModelParams(layers, x_half.activation)


def msgd_step(x_half: ModelParams, state: OptimizerState, grads: LayerArrays,
              hp: HyperParams) -> tuple[ModelParams, OptimizerState]:
    """v <- beta v - alpha g; x <- x_half + v."""
    if state.kind != "msgd":
        raise ValueError(f"state kind {state.kind!r} is not msgd")
    _check_congruent(x_half, grads)
    grads = clip_gradients(grads, hp.clip)
    v = [(hp.beta * vw - hp.alpha * gw, hp.beta * vb - hp.alpha * gb)
         for (vw, vb), (gw, gb) in zip(state.v, grads)]
    layers = [(w + vw, b + vb) for (w, b), (vw, vb) in zip(x_half.layers, v)]
    return ModelParams(layers, x_half.activation), OptimizerState("msgd", v=v, step=state.step + 1)


def amsgrad_update_moments(state: OptimizerState, grads: LayerArrays,
                           hp: HyperParams) -> OptimizerState:
    """Pre-merge phase: fold the gradient into m, v_hat, and the running max v.

    On the first call u_hat initializes to v (the surrogate starts equal to
    the running maximum). v_prev keeps the previous running maximum so the
    post-merge phase can apply the u_hat' = u_hat_half - v_prev + v update.
    """
    if state.kind != "amsgrad":
        raise ValueError(f"state kind {state.kind!r} is not amsgrad")
    grads = clip_gradients(grads, hp.clip)
    m = [(hp.beta1 * mw + (1.0 - hp.beta1) * gw, hp.beta1 * mb + (1.0 - hp.beta1) * gb)
         for (mw, mb), (gw, gb) in zip(state.m, grads)]
    v_hat = [(hp.beta2 * vw + (1.0 - hp.beta2) * gw * gw,
              hp.beta2 * vb + (1.0 - hp.beta2) * gb * gb)
             for (vw, vb), (gw, gb) in zip(state.v_hat, grads)]
    v_prev = state.v
    v = [(np.maximum(hw, pw), np.maximum(hb, pb))
         for (hw, hb), (pw, pb) in zip(v_hat, v_prev)]
    u_hat = [(w.copy(), b.copy()) for w, b in v] if state.step == 0 else state.u_hat
    return OptimizerState("amsgrad", v=v, m=m, v_hat=v_hat, v_prev=v_prev,
                          u_hat=u_hat, step=state.step + 1)


def amsgrad_apply(x_half: ModelParams, u_hat_half: LayerArrays,
                  state: OptimizerState, hp: HyperParams) -> tuple[ModelParams, OptimizerState]:
    """Post-merge phase: scaled position update and surrogate advance."""
    if state.kind != "amsgrad":
        raise ValueError(f"state kind {state.kind!r} is not amsgrad")
    if state.step == 0:
        raise ValueError("amsgrad_apply called before any moment update")
    _check_congruent(x_half, u_hat_half)
    layers = []
    u_next = []
    for (w, b), (uw_half, ub_half), (uw, ub), (mw, mb), (vw, vb), (pw, pb) in zip(
            x_half.layers, u_hat_half, state.u_hat, state.m, state.v, state.v_prev):
        u_w = np.maximum(uw, hp.epsilon)
        u_b = np.maximum(ub, hp.epsilon)
        floor_ok = (u_w.size == 0 or u_w.min() >= hp.epsilon) and (u_b.size == 0 or u_b.min() >= hp.epsilon)
        if not floor_ok:  # written so NaN fails the check instead of passing it
            raise RuntimeError("scaling floor violated: some u entry < epsilon after flooring")
        layers.append((w - hp.alpha * mw / np.sqrt(u_w), b - hp.alpha * mb / np.sqrt(u_b)))
        u_next.append((uw_half - pw + vw, ub_half - pb + vb))
    new_state_ = OptimizerState("amsgrad", v=state.v, m=state.m, v_hat=state.v_hat,
                                v_prev=[(w.copy(), b.copy()) for w, b in state.v],
                                u_hat=u_next, step=state.step)
    return ModelParams(layers, x_half.activation), new_state_


def amsgrad_step(x_half: ModelParams, u_hat_half: LayerArrays, state: OptimizerState,
                 grads: LayerArrays, hp: HyperParams) -> tuple[ModelParams, OptimizerState]:
    """Single-node composition: moment update followed by the position update.

    Callers that merge must run the phases separately with the gossiped
    u_hat_half in between; here u_hat_half defaults to the agent's own
    surrogate when None is passed (no gossip).
    """
    state = amsgrad_update_moments(state, grads, hp)
    if u_hat_half is None:
        u_hat_half = state.u_hat
    return amsgrad_apply(x_half, u_hat_half, state, hp)
