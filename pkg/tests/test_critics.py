from __future__ import annotations

import numpy as np
import pytest

from riskgate.critics import CriticEnsemble, Transition, TransitionBatch


def _batch(rng, n, f, a, terminal=None):
    return TransitionBatch(
        features=rng.normal(size=(n, f)),
        actions=rng.integers(0, a, n),
        shaped_rewards=rng.uniform(-1, 1, n),
        risks=rng.uniform(0, 1, n),
        next_features=rng.normal(size=(n, f)),
        next_risks=rng.uniform(0, 1, (n, a)),
        terminals=np.zeros(n, bool) if terminal is None else terminal,
        weights=rng.uniform(0.5, 1.5, n),
    )


def _flat(params):
    return np.concatenate([v.ravel() for v in params.values()])


def _set_flat(params, flat):
    k = 0
    for name, v in params.items():
        params[name] = flat[k : k + v.size].reshape(v.shape).copy()
        k += v.size


@pytest.mark.parametrize("hidden", [0, 6])
def test_td_gradient_matches_finite_differences(hidden):
    rng = np.random.default_rng(1)
    ens = CriticEnsemble(3, 4, ensemble_size=2, hidden_dim=hidden, seed=2)
    if hidden == 0:
        ens.params["w"] = rng.normal(size=ens.params["w"].shape)
        ens.params["c"] = rng.normal(size=ens.params["c"].shape)
    batch = _batch(rng, 9, 3, 4)
    targets = rng.normal(size=(2, 9))
    mask = (rng.random((2, 9)) < 0.7).astype(float)
    _, grads = ens.loss_and_grad(batch, targets, mask)
    flat = _flat(ens.params)
    analytic = np.concatenate([grads[k].ravel() for k in ens.params])
    numeric = np.zeros_like(flat)
    h = 1e-6
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        _set_flat(ens.params, flat + e)
        up = ens.loss_and_grad(batch, targets, mask)[0].sum()
        _set_flat(ens.params, flat - e)
        down = ens.loss_and_grad(batch, targets, mask)[0].sum()
        numeric[i] = (up - down) / (2 * h)
    _set_flat(ens.params, flat)
    rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
    assert rel < 1e-6


def test_q_values_batch_agrees_with_single():
    rng = np.random.default_rng(0)
    ens = CriticEnsemble(5, 3, ensemble_size=4, hidden_dim=8, seed=1)
    x = rng.normal(size=(6, 5))
    r = rng.uniform(0, 1, (6, 3))
    batch = ens.q_values_batch(x, r)
    for i in range(6):
        np.testing.assert_allclose(batch[:, i, :], ens.q_values(x[i], r[i]), atol=1e-12)


def _linear_with_next_q(q_next):
    ens = CriticEnsemble(1, len(q_next), ensemble_size=1, hidden_dim=0, discount=0.5, init="zeros")
    ens.target_params["w"][0, 0, :] = q_next
    return ens


def test_bootstrap_uses_safe_restricted_max():
    ens = _linear_with_next_q([10.0, 1.0, 3.0])
    b = TransitionBatch(np.ones((1, 1)), np.array([0]), np.array([0.0]), np.zeros(1), np.ones((1, 1)),
                        np.array([[0.9, 0.1, 0.2]]), np.zeros(1, bool), np.ones(1))
    np.testing.assert_allclose(ens.td_targets(b, r_max=0.25), [[0.5 * 3.0]])


def test_bootstrap_falls_back_to_min_risk():
    ens = _linear_with_next_q([10.0, 1.0, 3.0])
    b = TransitionBatch(np.ones((1, 1)), np.array([0]), np.array([1.0]), np.zeros(1), np.ones((1, 1)),
                        np.array([[0.9, 0.6, 0.7]]), np.zeros(1, bool), np.ones(1))
    np.testing.assert_allclose(ens.td_targets(b, r_max=0.25), [[1.0 + 0.5 * 1.0]])


def test_terminal_has_no_bootstrap():
    ens = _linear_with_next_q([10.0, 1.0])
    b = TransitionBatch(np.ones((1, 1)), np.array([0]), np.array([0.3]), np.zeros(1), np.ones((1, 1)),
                        np.zeros((1, 2)), np.ones(1, bool), np.ones(1))
    np.testing.assert_allclose(ens.td_targets(b, r_max=1.0), [[0.3]])


def test_reward_clip():
    ens = CriticEnsemble(1, 2, ensemble_size=1, hidden_dim=0, init="zeros", reward_clip=1.0)
    b = TransitionBatch(np.ones((1, 1)), np.array([0]), np.array([5.0]), np.zeros(1), np.ones((1, 1)),
                        np.zeros((1, 2)), np.ones(1, bool), np.ones(1))
    np.testing.assert_allclose(ens.td_targets(b, r_max=1.0), [[1.0]])


def test_targets_change_only_on_sync():
    rng = np.random.default_rng(0)
    ens = CriticEnsemble(2, 2, ensemble_size=1, hidden_dim=4, sync_interval=3, seed=0)
    before = {k: v.copy() for k, v in ens.target_params.items()}
    batch = _batch(rng, 8, 2, 2)
    ens.td_update(batch)
    ens.td_update(batch)
    assert all(np.array_equal(before[k], ens.target_params[k]) for k in before)
    ens.td_update(batch)
    assert all(np.array_equal(ens.params[k], ens.target_params[k]) for k in before)


def test_bootstrap_mask_probability():
    ens = CriticEnsemble(1, 2, ensemble_size=5, bootstrap_p=0.5, seed=0)
    m = ens.bootstrap_mask(20_000)
    assert abs(m.mean() - 0.5) < 0.02


def test_fit_converges_to_fixed_targets():
    ens = CriticEnsemble(2, 2, ensemble_size=3, hidden_dim=16, learning_rate=1e-2, bootstrap_p=1.0, seed=0)
    x = np.eye(2)
    b = TransitionBatch(x, np.array([0, 1]), np.array([0.5, -0.5]), np.zeros(2), x, np.zeros((2, 2)),
                        np.ones(2, bool), np.ones(2))
    for _ in range(1500):
        ens.td_update(b)
    q = ens.q_values_batch(x, np.zeros((2, 2)))
    np.testing.assert_allclose(q[:, 0, 0], 0.5, atol=1e-2)
    np.testing.assert_allclose(q[:, 1, 1], -0.5, atol=1e-2)


def test_q_stays_bounded_with_clipped_rewards():
    rng = np.random.default_rng(3)
    beta, clip = 0.9, 1.0
    ens = CriticEnsemble(3, 2, ensemble_size=2, hidden_dim=8, discount=beta, learning_rate=1e-2,
                         sync_interval=20, reward_clip=clip, seed=1)
    states = rng.normal(size=(5, 3))
    worst = 0.0
    for _ in range(800):
        i, j = rng.integers(0, 5, 32), rng.integers(0, 5, 32)
        b = TransitionBatch(states[i], rng.integers(0, 2, 32), rng.uniform(-3, 3, 32), np.zeros(32), states[j],
                            np.zeros((32, 2)), np.zeros(32, bool), np.ones(32))
        ens.td_update(b)
        worst = max(worst, np.abs(ens.q_values_batch(states, np.zeros((5, 2)))).max())
    assert worst <= 1.1 * clip / (1 - beta)


def test_save_load_round_trip(tmp_path):
    ens = CriticEnsemble(3, 2, ensemble_size=2, hidden_dim=4, seed=5)
    ens.save(tmp_path / "c.ckpt")
    loaded = CriticEnsemble.load(tmp_path / "c.ckpt")
    x, r = np.array([0.1, 0.2, 0.3]), np.array([0.1, 0.9])
    np.testing.assert_array_equal(ens.q_values(x, r), loaded.q_values(x, r))


def test_from_transitions():
    t = Transition(np.zeros(2), 1, 0.5, 0.6, 1.0, True, 0.3, np.ones(2), np.array([0.1, 0.2]))
    b = TransitionBatch.from_transitions([t, t])
    assert len(b) == 2 and b.hazards.all() and b.actions.tolist() == [1, 1]


def test_invalid_arguments():
    with pytest.raises(ValueError):
        CriticEnsemble(2, 2, ensemble_size=0)
    with pytest.raises(ValueError):
        CriticEnsemble(2, 2, discount=1.0)
    with pytest.raises(ValueError):
        CriticEnsemble(2, 2).q_values(np.zeros(2), np.zeros(3))
