import numpy as np
import pytest

from pcrnn.model import ModelDims, ModelWeights, NetworkState, Precisions, step_open_loop
from pcrnn.prior import GmmPrior
from pcrnn.rng import make_rng
from pcrnn.targets import generate_targets
from pcrnn.training import (
    AdamState,
    TrainConfig,
    adam_step,
    backprop,
    compute_gradients,
    loss_mse,
    train,
    unroll,
)

PREC = Precisions(sigma_x=1.0, sigma_h=10.0, sigma_c=0.1, tau=5.0, prior_step="implicit")


def setup(seed, n=6, d=3, p=2, T=20):
    rng = make_rng(seed, 0)
    w = ModelWeights.initialize(ModelDims(n=n, p=p, d=d), rng)
    targets = 0.8 * rng.standard_normal((p, T, 2))
    return w, GmmPrior.one_hot(p), np.eye(p), targets


def fd_gradient(w, prior, c0, targets, mode, name, eps=1e-6):
    base = unroll(w, PREC, prior, c0, targets.shape[1], mode=mode, targets=targets)
    frozen = base if mode == "pc_detached" else None
    grad = np.zeros_like(getattr(w, name))
    for idx in np.ndindex(grad.shape):
        vals = []
        for sign in (1, -1):
            v = w.copy()
            getattr(v, name)[idx] += sign * eps
            roll = unroll(v, PREC, prior, c0, targets.shape[1], mode=mode, frozen=frozen)
            vals.append(loss_mse(roll.x, targets))
        grad[idx] = (vals[0] - vals[1]) / (2 * eps)
    return grad


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("mode", ["open_loop", "pc_detached"])
def test_backprop_matches_finite_differences(seed, mode):
    w, prior, c0, targets = setup(seed)
    _, grads = compute_gradients(w, PREC, prior, c0, targets, mode=mode)
    for name in ("w_f", "w_p", "w_c", "w_out", "h_init"):
        fd = fd_gradient(w, prior, c0, targets, mode, name)
        err = np.linalg.norm(grads[name] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-5, (name, err)


def test_detached_rollout_is_step_composition():
    w, prior, c0, targets = setup(3, T=15)
    roll = unroll(w, PREC, prior, c0, 15, mode="pc_detached", targets=targets)
    for b in range(2):
        state = NetworkState.initial(w, c0[b])
        for t in range(15):
            state = step_open_loop(state, targets[b, t], w, PREC, prior)
            np.testing.assert_allclose(roll.x[b, t], state.x, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(roll.h_post[b, t + 1], state.h_post, rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(roll.c[b, t + 1], state.c, rtol=1e-12, atol=1e-14)


def test_single_step_closed_form():
    w, prior, c0, _ = setup(1)
    roll = unroll(w, PREC, prior, c0, 1, mode="open_loop")
    z = (c0 @ w.w_c) * (np.tanh(w.h_init) @ w.w_p)
    h1 = 0.8 * w.h_init + z @ w.w_f.T / 5
    np.testing.assert_allclose(roll.h[:, 0], h1, rtol=1e-14)
    np.testing.assert_allclose(roll.x[:, 0], np.tanh(h1) @ w.w_out.T, rtol=1e-14)


def test_zero_forward_weights_decay_geometrically():
    w, prior, c0, _ = setup(2)
    w.w_f[:] = 0
    roll = unroll(w, PREC, prior, c0, 30, mode="open_loop")
    k = np.arange(1, 31)[:, None]
    np.testing.assert_allclose(roll.h[0], (0.8**k) * w.h_init, rtol=1e-12)


def test_open_loop_ignores_targets():
    w, prior, c0, targets = setup(4)
    a = unroll(w, PREC, prior, c0, 20, mode="open_loop")
    b = unroll(w, PREC, prior, c0, 20, mode="open_loop", targets=targets * 100)
    np.testing.assert_array_equal(a.x, b.x)


def test_unroll_argument_checks():
    w, prior, c0, targets = setup(0)
    with pytest.raises(ValueError):
        unroll(w, PREC, prior, c0, 20, mode="teacher")
    with pytest.raises(ValueError):
        unroll(w, PREC, prior, c0, 20, mode="pc_detached")
    with pytest.raises(ValueError):
        unroll(w, PREC, prior, c0, 25, mode="pc_detached", targets=targets)


def test_loss_mse():
    assert loss_mse([[0.0, 0.0]], [[3.0, 4.0]]) == 12.5
    assert loss_mse(np.ones((2, 3, 2)), np.ones((2, 3, 2))) == 0.0
    with pytest.raises(ValueError):
        loss_mse(np.zeros((2, 2)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        loss_mse(np.zeros((0, 2)), np.zeros((0, 2)))


def test_adam_first_steps_by_hand():
    params = {"a": np.array([1.0, -2.0])}
    state = AdamState.zeros_like(params)
    g = {"a": np.array([0.5, -4.0])}
    params, state = adam_step(params, g, state, lr=0.1, eps=0.0)
    # bias correction makes the first step exactly lr * sign(g)
    np.testing.assert_allclose(params["a"], [0.9, -1.9], rtol=1e-15)
    g2 = {"a": np.array([1.5, 0.0])}
    params, state = adam_step(params, g2, state, lr=0.1, eps=0.0)
    m = 0.9 * 0.1 * g["a"] + 0.1 * g2["a"]
    v = 0.999 * 0.001 * g["a"] ** 2 + 0.001 * g2["a"] ** 2
    step = 0.1 * (m / (1 - 0.81)) / np.sqrt(v / (1 - 0.999**2))
    np.testing.assert_allclose(params["a"], np.array([0.9, -1.9]) - step, rtol=1e-13)
    assert state.t == 2


def test_adam_zero_and_constant_gradients():
    params = {"a": np.array([0.3, 0.7])}
    state = AdamState.zeros_like(params)
    same, _ = adam_step(params, {"a": np.zeros(2)}, state, lr=0.5)
    np.testing.assert_array_equal(same["a"], params["a"])
    p, s = params, state
    for _ in range(50):
        p, s = adam_step(p, {"a": np.array([2.0, -3.0])}, s, lr=0.01, eps=0.0)
    # a constant gradient moves every coordinate by lr per step
    np.testing.assert_allclose(p["a"], params["a"] + np.array([-0.5, 0.5]), rtol=1e-12)


def test_adam_does_not_mutate_inputs():
    params = {"a": np.ones(3)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"a": np.ones(3)}, state)
    np.testing.assert_array_equal(params["a"], 1.0)
    np.testing.assert_array_equal(state.m["a"], 0.0)


def tiny_config(**kw):
    base = dict(n=12, d=6, period=12, length=36, iterations=40, learning_rate=0.01, seed=3, log_every=0)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_iterations_returns_init():
    cfg = tiny_config(iterations=0)
    w, losses = train(cfg)
    assert losses.shape == (0,)
    again, _ = train(cfg)
    np.testing.assert_array_equal(w.w_f, again.w_f)


def test_training_reduces_loss():
    w, losses = train(tiny_config())
    assert losses.shape == (40,)
    assert np.all(np.isfinite(losses))
    assert losses[-1] < 0.5 * losses[0]


def test_training_is_deterministic():
    a, la = train(tiny_config(iterations=10))
    b, lb = train(tiny_config(iterations=10))
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_array_equal(a.w_out, b.w_out)


def test_h_init_is_not_trained():
    w0, _ = train(tiny_config(iterations=0))
    w, _ = train(tiny_config(iterations=5))
    np.testing.assert_array_equal(w.h_init, w0.h_init)
    assert not np.array_equal(w.w_f, w0.w_f)


def test_config_round_trip_and_unknown_keys():
    cfg = tiny_config()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    with pytest.raises(ValueError):
        tiny_config(rollout_mode="teacher")
    with pytest.raises(ValueError):
        tiny_config(learning_rate=0.0)


def test_curriculum_lengths():
    cfg = tiny_config(length=120, curriculum_start=24, curriculum_iterations=4)
    assert [cfg.rollout_length(i) for i in range(6)] == [24, 48, 72, 96, 120, 120]
    assert tiny_config().rollout_length(0) == 36
    held = tiny_config(length=120, curriculum_start=24, curriculum_hold=2, curriculum_iterations=4)
    assert [held.rollout_length(i) for i in range(8)] == [24, 24, 24, 48, 72, 96, 120, 120]
    with pytest.raises(ValueError):
        tiny_config(curriculum_start=0)
    with pytest.raises(ValueError):
        tiny_config(curriculum_start=37)


def test_curriculum_first_loss_uses_prefix():
    cfg = tiny_config(iterations=1, curriculum_start=12, curriculum_iterations=10, rollout_mode="open_loop")
    _, losses = train(cfg)
    w = train(tiny_config(iterations=0))[0]
    targets = np.stack([generate_targets(s) for s in cfg.target_specs()])
    roll = unroll(w, cfg.precisions, GmmPrior.one_hot(3), np.eye(3), 12, mode="open_loop")
    assert losses[0] == loss_mse(roll.x, targets[:, :12])


def test_readout_gradient_single_step():
    w, prior, c0, targets = setup(5, T=1)
    roll = unroll(w, PREC, prior, c0, 1, mode="open_loop")
    y = np.tanh(roll.h[:, 0])
    eps = roll.x[:, 0] - targets[:, 0]
    expect = 2 * eps.T @ y / eps.size
    _, grads = compute_gradients(w, PREC, prior, c0, targets, mode="open_loop")
    np.testing.assert_allclose(grads["w_out"], expect, rtol=1e-13)


def test_zero_everything_gives_zero_gradients():
    w, prior, c0, targets = setup(6)
    for name in ("w_f", "w_p", "w_c", "w_out"):
        setattr(w, name, np.zeros_like(getattr(w, name)))
    _, grads = compute_gradients(w, PREC, prior, c0, np.zeros_like(targets), mode="pc_detached")
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)


@pytest.mark.parametrize("seed", [0, 1])
def test_tiny_run_fits_targets(seed):
    # pinned from oracle runs: final MSE was 1.4-1.5 % of the target variance
    cfg = TrainConfig(n=16, length=120, iterations=300, seed=seed, rollout_mode="open_loop", log_every=0)
    _, losses = train(cfg)
    variance = np.mean([generate_targets(s).var(axis=0).mean() for s in cfg.target_specs()])
    assert losses[-1] < 0.1 * variance


def test_learning_rate_schedule():
    assert tiny_config().learning_rate_at(39) == 0.01
    cfg = tiny_config(iterations=10, learning_rate_final=1e-4)
    assert cfg.learning_rate_at(0) == 0.01
    np.testing.assert_allclose(cfg.learning_rate_at(5), 1e-3, rtol=1e-12)
    held = tiny_config(iterations=10, length=120, curriculum_start=24, curriculum_hold=6, learning_rate_final=1e-4)
    assert held.learning_rate_at(5) == held.learning_rate_at(6) == 0.01
    np.testing.assert_allclose(held.learning_rate_at(8), 1e-3, rtol=1e-12)
    with pytest.raises(ValueError):
        tiny_config(learning_rate_final=0.0)
