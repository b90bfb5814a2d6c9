import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tscbench.agent.nets import (
    Architecture,
    greedy_action,
    init_weights,
    policy_forward,
    value_forward,
    zero_weights,
)
from tscbench.agent.ppo import (
    Batch,
    PpoConfig,
    RolloutBuffer,
    clipped_surrogate,
    compute_gae,
    ppo_objective,
    td_advantage,
    train,
)
from tscbench.env import make_env_factory
from tscbench.errors import ConfigError, NumericInputError
from tscbench.harness import demand_profile
from tscbench.sim import SimConfig, new_simulation


def toy_net(obs_dim=6, hidden=(5, 4), seed=0):
    arch = Architecture(obs_dim=obs_dim, hidden=hidden, n_actions=4)
    w = init_weights(arch, np.random.default_rng(seed))
    # widen the final policy layer so probabilities are far from uniform
    w.params["pi.W%d" % len(hidden)] *= 100.0
    return w


def reference_forward(params, head, x, n_layers):
    h = np.asarray(x, float)
    for i in range(n_layers):
        h = h @ params[f"{head}.W{i}"] + params[f"{head}.b{i}"]
        if i < n_layers - 1:
            h = np.tanh(h)
    return h


# -- forward pass -------------------------------------------------------------

def test_zero_weights_uniform_policy():
    w = zero_weights(Architecture())
    p = policy_forward(w, np.arange(40.0))
    assert p.tolist() == [0.25] * 4
    assert value_forward(w, np.arange(40.0)) == 0.0


def test_toy_network_hand_computed():
    arch = Architecture(obs_dim=2, hidden=(2,), n_actions=4)
    w = zero_weights(arch)
    w.params["pi.W0"] = np.eye(2)
    w.params["pi.b1"] = np.log([1.0, 2.0, 3.0, 4.0])
    p = policy_forward(w, [0.0, 0.0])
    assert np.allclose(p, [0.1, 0.2, 0.3, 0.4], atol=1e-15)

    w.params["pi.b1"] = np.zeros(4)
    w.params["pi.W1"] = np.array([[1.0, 0, 0, 0], [0, 0, 0, 0]])
    p = policy_forward(w, [0.5, -0.5])
    t = math.exp(math.tanh(0.5))
    assert p[0] == pytest.approx(t / (t + 3), abs=1e-15)
    assert p[1] == pytest.approx(1 / (t + 3), abs=1e-15)

    w.params["v.W0"] = np.eye(2)
    w.params["v.W1"] = np.array([[2.0], [-1.0]])
    w.params["v.b1"] = np.array([0.25])
    assert value_forward(w, [0.5, -0.5]) == pytest.approx(3 * math.tanh(0.5) + 0.25, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), x=st.lists(st.floats(-1e3, 1e3), min_size=6, max_size=6))
def test_policy_is_a_distribution(seed, x):
    w = toy_net(seed=seed)
    p = policy_forward(w, x)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) <= 1e-9
    ref = reference_forward(w.params, "pi", x, 3)
    assert greedy_action(w, x) == int(np.argmax(ref))


def test_value_matches_reference():
    w = toy_net(seed=3)
    x = np.random.default_rng(1).normal(size=(10, 6))
    assert np.allclose(value_forward(w, x), reference_forward(w.params, "v", x, 3)[:, 0], atol=1e-14)


def test_non_finite_input_rejected():
    w = toy_net()
    with pytest.raises(NumericInputError):
        policy_forward(w, [np.nan] + [0.0] * 5)
    with pytest.raises(NumericInputError):
        value_forward(w, [np.inf] + [0.0] * 5)


def test_input_scale_applied():
    arch = Architecture(obs_dim=2, hidden=(2,), n_actions=4, input_scale=(2.0, 0.5))
    w = zero_weights(arch)
    w.params["v.W0"] = np.eye(2)
    w.params["v.W1"] = np.array([[1.0], [1.0]])
    assert value_forward(w, [0.1, 0.4]) == pytest.approx(math.tanh(0.2) + math.tanh(0.2), abs=1e-15)


# -- advantages ---------------------------------------------------------------

@pytest.mark.parametrize("r,v,v2,gamma,expected", [
    (-3.0, 0.03, 0.0, 0.99, -3.03),
    (-3.0, 0.0, 0.0, 0.99, -3.0),
    (1.0, 2.0, 3.0, 0.5, 0.5),
])
def test_td_advantage(r, v, v2, gamma, expected):
    assert td_advantage(r, v, v2, gamma) == pytest.approx(expected, abs=1e-12)


def _buffer(rewards, values, next_values, ends):
    buf = RolloutBuffer()
    for r, v, nv, e in zip(rewards, values, next_values, ends):
        buf.add(None, 0, 0.0, r, v, nv, e)
    return buf


def test_gae_hand_trace():
    # deltas 1, -1, 2.1 with gamma*lambda = 0.25
    buf = _buffer([1.0, 0.0, 2.0], [0.5, 1.0, 0.0], [1.0, 0.0, 0.2], [False, False, True])
    adv, ret = compute_gae(buf, 0.5, 0.5)
    assert np.allclose(adv, [0.88125, -0.475, 2.1], atol=1e-12)
    assert np.allclose(ret, adv + [0.5, 1.0, 0.0], atol=1e-12)


def test_gae_resets_at_episode_end():
    buf = _buffer([1.0, 0.0, 2.0], [0.5, 1.0, 0.0], [1.0, 0.0, 0.2], [False, True, True])
    adv, _ = compute_gae(buf, 0.5, 0.5)
    assert np.allclose(adv, [0.75, -1.0, 2.1], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(data=st.lists(st.tuples(st.floats(-10, 10), st.floats(-10, 10), st.floats(-10, 10)), min_size=1, max_size=20),
       gamma=st.floats(0.01, 0.99))
def test_gae_lambda_zero_is_td(data, gamma):
    r, v, nv = map(list, zip(*data))
    buf = _buffer(r, v, nv, [False] * (len(r) - 1) + [True])
    adv, _ = compute_gae(buf, gamma, 0.0)
    assert np.allclose(adv, [td_advantage(a, b, c, gamma) for a, b, c in data], atol=1e-12)
    single = _buffer(r[:1], v[:1], nv[:1], [True])
    adv1, _ = compute_gae(single, gamma, 0.7)
    assert adv1[0] == pytest.approx(td_advantage(r[0], v[0], nv[0], gamma), abs=1e-12)


def test_gae_empty_buffer():
    with pytest.raises(ValueError):
        compute_gae(RolloutBuffer(), 0.9, 0.9)


# -- surrogate and gradients --------------------------------------------------

def test_clipped_surrogate_cases():
    eps = 0.2
    assert clipped_surrogate(np.array([1.5]), np.array([1.0]), eps)[0] == pytest.approx(1.2)
    assert clipped_surrogate(np.array([0.5]), np.array([-1.0]), eps)[0] == pytest.approx(-0.8)
    assert clipped_surrogate(np.array([1.1]), np.array([2.0]), eps)[0] == pytest.approx(2.2)


def _batch(w, rng, n=8, noise=0.3):
    obs = rng.normal(size=(n, w.arch.obs_dim))
    p = policy_forward(w, obs)
    actions = np.array([rng.choice(4, p=pi) for pi in p])
    logp = np.log(p[np.arange(n), actions])
    return Batch(obs, actions, logp + rng.normal(0, noise, n), rng.normal(size=n), rng.normal(size=n))


def _far_from_kinks(w, batch, eps):
    p = policy_forward(w, batch.obs)
    ratio = p[np.arange(len(batch.actions)), batch.actions] / np.exp(batch.old_log_probs)
    return np.all(np.abs(ratio - (1 - eps)) > 1e-3) and np.all(np.abs(ratio - (1 + eps)) > 1e-3)


def test_gradients_match_finite_differences():
    cfg = PpoConfig(clip_eps=0.2, value_coef=0.5, entropy_coef=0.05)
    h = 1e-5
    checked = 0
    seed = 0
    while checked < 20:
        rng = np.random.default_rng(seed)
        w = toy_net(seed=seed)
        for k in w.params:
            w.params[k] = w.params[k] + rng.normal(0, 0.1, w.params[k].shape)
        batch = _batch(w, rng)
        seed += 1
        if not _far_from_kinks(w, batch, cfg.clip_eps):
            continue
        _, grads, _ = ppo_objective(batch, w, cfg)
        for name, theta in w.params.items():
            for idx in np.ndindex(theta.shape):
                orig = theta[idx]
                theta[idx] = orig + h
                up = ppo_objective(batch, w, cfg)[0]
                theta[idx] = orig - h
                down = ppo_objective(batch, w, cfg)[0]
                theta[idx] = orig
                num = (up - down) / (2 * h)
                ana = grads[name][idx]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-6)
                assert err < 1e-4, (seed, name, idx, ana, num)
        checked += 1


def test_ratio_one_when_policies_agree():
    w = toy_net(seed=4)
    rng = np.random.default_rng(4)
    batch = _batch(w, rng, noise=0.0)
    _, _, info = ppo_objective(batch, w, PpoConfig())
    assert info.policy_term == pytest.approx(float(np.mean(batch.advantages)), abs=1e-12)
    assert info.clip_fraction == 0.0
    assert info.approx_kl == pytest.approx(0.0, abs=1e-12)


def test_infinite_clip_equals_policy_gradient():
    w = toy_net(seed=5)
    rng = np.random.default_rng(5)
    batch = _batch(w, rng, noise=0.0)
    cfg = PpoConfig(clip_eps=math.inf, value_coef=0.0, entropy_coef=0.0)
    _, grads, _ = ppo_objective(batch, w, cfg)
    # unclipped policy gradient at ratio 1: d(-mean(A log pi))/dlogits = -A (onehot - p) / n
    p = policy_forward(w, batch.obs)
    n = len(batch.actions)
    onehot = np.eye(4)[batch.actions]
    d_logits = -(batch.advantages[:, None] * (onehot - p)) / n
    h1 = np.tanh(batch.obs @ w.params["pi.W0"] + w.params["pi.b0"])
    h2 = np.tanh(h1 @ w.params["pi.W1"] + w.params["pi.b1"])
    assert np.allclose(grads["pi.W2"], h2.T @ d_logits, atol=1e-12)
    assert np.allclose(grads["pi.b2"], d_logits.sum(axis=0), atol=1e-12)
    for k in ("v.W0", "v.b2"):
        assert not np.any(grads[k])


def test_large_log_ratio_is_clamped(caplog):
    w = toy_net(seed=6)
    rng = np.random.default_rng(6)
    batch = _batch(w, rng)
    batch.old_log_probs = batch.old_log_probs - 50.0
    with caplog.at_level(logging.WARNING):
        loss, _, _ = ppo_objective(batch, w, PpoConfig())
    assert math.isfinite(loss)
    assert "clamping" in caplog.text


@pytest.mark.parametrize("kw,field", [({"gamma": 1.0}, "gamma"), ({"clip_eps": 0.0}, "clip_eps"),
                                      ({"minibatch": 0}, "minibatch"), ({"total_slots": -1}, "total_slots")])
def test_config_validation(kw, field):
    with pytest.raises(ConfigError) as exc:
        PpoConfig(**kw)
    assert exc.value.field == field


# -- training -----------------------------------------------------------------

def test_train_zero_budget_returns_initial_weights():
    sim = SimConfig()
    arch = Architecture.for_sim(sim)
    init = init_weights(arch, np.random.default_rng(0))
    w, curve = train(make_env_factory(sim), PpoConfig(total_slots=0), weights=init.copy())
    assert curve == []
    for k in init.params:
        assert np.array_equal(w.params[k], init.params[k])


def test_train_is_deterministic():
    sim = SimConfig(emergency_prob=0.0)
    cfg = PpoConfig(total_slots=512, rollout_slots=256, seed=3)
    w1, c1 = train(make_env_factory(sim), cfg, Architecture.for_sim(sim))
    w2, c2 = train(make_env_factory(sim), cfg, Architecture.for_sim(sim))
    assert c1 == c2
    assert all(np.array_equal(w1.params[k], w2.params[k]) for k in w1.params)


def test_learns_single_phase_demand():
    sim = SimConfig(arrival_rate_vps=demand_profile("phase1"), emergency_prob=0.0)
    w, _ = train(make_env_factory(sim), PpoConfig(seed=0, total_slots=20_000), Architecture.for_sim(sim))
    s = new_simulation(sim, 99)
    probs = []
    obs = s.observe()
    for _ in range(100):
        obs = s.advance_slot(greedy_action(w, obs.flat())).true_observation
        # only states with vehicles on the loaded approaches
        if obs.sv[[1, 3], 0].max() >= 0:
            probs.append(policy_forward(w, obs.flat())[1])
    assert len(probs) > 50
    assert min(probs) > 0.9


@pytest.mark.slow
def test_learning_curve_improves_across_seeds():
    sim = SimConfig(emergency_prob=0.0)
    gains = []
    for seed in range(5):
        _, curve = train(make_env_factory(sim), PpoConfig(seed=seed, total_slots=30_000), Architecture.for_sim(sim))
        n = max(1, len(curve) // 10)
        gains.append(np.mean(curve[-n:]) - np.mean(curve[:n]))
    assert np.mean(gains) > 0
    assert all(g > 0 for g in gains)
