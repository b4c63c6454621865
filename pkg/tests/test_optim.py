"""Tests for the SGD, momentum, and adaptive optimizer steps."""

import numpy as np
import pytest

from gossipmerge.linalg import RngStream
from gossipmerge.nn import ModelParams, flatten, init_model, loss_and_grad
from gossipmerge.optim import (
    HyperParams,
    amsgrad_step,
    amsgrad_update_moments,
    msgd_step,
    new_state,
    sgd_step,
)

from oracles import scalar_amsgrad_trajectory


def _scalar_model(x0=0.0):
    return ModelParams([(np.array([[x0]]), np.zeros(1))])


def _scalar_grads(g):
    return [(np.array([[g]]), np.zeros(1))]


def _rand_grads(model, seed):
    gen = RngStream(seed, 77).generator()
    return [(gen.normal(0.0, 1.0, w.shape), gen.normal(0.0, 1.0, b.shape))
            for w, b in model.layers]


def test_sgd_zero_gradient_is_identity():
    model = init_model([3, 4, 2], RngStream(0, 1))
    grads = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
    out = sgd_step(model, grads, HyperParams(alpha=0.1))
    np.testing.assert_array_equal(flatten(out), flatten(model))


def test_sgd_single_step_moves_against_gradient():
    out = sgd_step(_scalar_model(0.0), _scalar_grads(1.0), HyperParams(alpha=0.1))
    assert out.layers[0][0][0, 0] == pytest.approx(-0.1)


def test_sgd_contracts_quadratic():
    # On f(x) = x^2 / 2 the map is x <- (1 - alpha) x.
    x = 1.0
    hp = HyperParams(alpha=0.1)
    model = _scalar_model(x)
    for _ in range(10):
        g = model.layers[0][0][0, 0]
        model = sgd_step(model, _scalar_grads(g), hp)
    assert model.layers[0][0][0, 0] == pytest.approx(0.9 ** 10, rel=1e-12)


def test_msgd_with_zero_beta_equals_sgd_bitwise():
    model = init_model([4, 6, 3], RngStream(5, 2))
    grads = _rand_grads(model, 5)
    hp = HyperParams(alpha=0.03, beta=0.0)
    plain = sgd_step(model, grads, hp)
    with_momentum, _ = msgd_step(model, new_state("msgd", model), grads, hp)
    np.testing.assert_array_equal(flatten(plain), flatten(with_momentum))


def test_msgd_constant_gradient_gives_geometric_momentum():
    hp = HyperParams(alpha=0.1, beta=0.5)
    model = _scalar_model(0.0)
    state = new_state("msgd", model)
    expect_v = 0.0
    expect_x = 0.0
    for _ in range(6):
        model, state = msgd_step(model, state, _scalar_grads(1.0), hp)
        expect_v = hp.beta * expect_v - hp.alpha
        expect_x += expect_v
        assert state.v[0][0][0, 0] == pytest.approx(expect_v, rel=1e-14)
        assert model.layers[0][0][0, 0] == pytest.approx(expect_x, rel=1e-14)


def test_msgd_zero_gradient_decays_momentum_geometrically():
    hp = HyperParams(alpha=0.1, beta=0.5)
    model = _scalar_model(0.0)
    state = new_state("msgd", model)
    model, state = msgd_step(model, state, _scalar_grads(1.0), hp)
    v0 = state.v[0][0][0, 0]
    x = model.layers[0][0][0, 0]
    for k in range(1, 5):
        model, state = msgd_step(model, state, _scalar_grads(0.0), hp)
        assert state.v[0][0][0, 0] == pytest.approx(v0 * hp.beta ** k, rel=1e-14)
        x += v0 * hp.beta ** k
        assert model.layers[0][0][0, 0] == pytest.approx(x, rel=1e-14)


def test_amsgrad_reduces_to_sign_sgd_without_averaging():
    # beta1 = beta2 = 0 and g*g >= eps turn the step into x - alpha * sign(g).
    hp = HyperParams(alpha=0.01, beta1=0.0, beta2=0.0, epsilon=1e-8)
    model = _scalar_model(0.0)
    state = new_state("amsgrad", model)
    model, state = amsgrad_step(model, None, state, _scalar_grads(-2.0), hp)
    assert model.layers[0][0][0, 0] == pytest.approx(0.01, rel=1e-12)


def test_amsgrad_zero_gradients_leave_model_fixed():
    model = init_model([3, 5, 2], RngStream(8, 3))
    state = new_state("amsgrad", model)
    zero = [(np.zeros_like(w), np.zeros_like(b)) for w, b in model.layers]
    hp = HyperParams(alpha=0.5)
    before = flatten(model)
    for _ in range(4):
        model, state = amsgrad_step(model, None, state, zero, hp)
    np.testing.assert_array_equal(flatten(model), before)


def test_amsgrad_matches_scalar_recurrence_oracle():
    hp = HyperParams(alpha=0.1, beta1=0.9, beta2=0.99, epsilon=1e-8)
    want = scalar_amsgrad_trajectory(0.0, [1.0, 2.0, 1.0], hp.alpha, hp.beta1, hp.beta2, hp.epsilon)
    model = _scalar_model(0.0)
    state = new_state("amsgrad", model)
    got = []
    for g in (1.0, 2.0, 1.0):
        model, state = amsgrad_step(model, None, state, _scalar_grads(g), hp)
        got.append(model.layers[0][0][0, 0])
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-16)


def test_amsgrad_running_max_is_nondecreasing():
    for seed in range(5):
        model = init_model([4, 6, 3], RngStream(seed, 4))
        state = new_state("amsgrad", model)
        hp = HyperParams(alpha=0.01)
        prev = None
        for step in range(200):
            grads = _rand_grads(model, 1000 * seed + step)
            model, state = amsgrad_step(model, None, state, grads, hp)
            cur = flatten(state.v)
            if prev is not None:
                assert np.all(cur >= prev - 1e-18)
            prev = cur


def test_amsgrad_clip_bounds_running_max():
    clip = 0.5
    hp = HyperParams(alpha=0.01, clip=clip)
    model = init_model([3, 4, 2], RngStream(3, 9))
    state = new_state("amsgrad", model)
    for step in range(50):
        grads = [(g * 10.0, gb * 10.0) for g, gb in _rand_grads(model, step)]
        model, state = amsgrad_step(model, None, state, grads, hp)
    assert float(flatten(state.v).max()) <= clip * clip + 1e-15


def test_amsgrad_surrogate_telescopes_without_gossip():
    # With no merging, u_hat' = u_hat - v_prev + v telescopes to v_1 + v_k:
    # the surrogate tracks the running max up to the constant first-step offset.
    model = init_model([3, 4, 2], RngStream(6, 5))
    state = new_state("amsgrad", model)
    hp = HyperParams(alpha=0.01)
    model, state = amsgrad_step(model, None, state, _rand_grads(model, 50), hp)
    v_first = flatten(state.v)
    for step in range(1, 20):
        model, state = amsgrad_step(model, None, state, _rand_grads(model, 50 + step), hp)
    np.testing.assert_allclose(flatten(state.u_hat), v_first + flatten(state.v), rtol=0, atol=1e-15)


def test_hyperparams_validate_ranges():
    with pytest.raises(ValueError, match="beta must satisfy 0 <= beta < 1"):
        HyperParams(beta=1.5)
    with pytest.raises(ValueError):
        HyperParams(alpha=0.0)
    with pytest.raises(ValueError):
        HyperParams(epsilon=0.0)
    with pytest.raises(ValueError):
        HyperParams(n=0)
    with pytest.raises(ValueError):
        HyperParams(clip=-1.0)


def test_steps_reject_mismatched_state_kind():
    model = _scalar_model(0.0)
    with pytest.raises(ValueError):
        msgd_step(model, new_state("sgd", model), _scalar_grads(1.0), HyperParams())
    with pytest.raises(ValueError):
        amsgrad_update_moments(new_state("msgd", model), _scalar_grads(1.0), HyperParams())
    with pytest.raises(ValueError):
        new_state("adamw", model)
